"""Function-encoder feedback policies for parametric optimal control."""

__version__ = "0.1.0"
