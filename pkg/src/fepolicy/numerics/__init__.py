from . import autodiff
from .adam import AdamState, adam_step
from .autodiff import Tape, Var, grad, value_and_grad
from .linalg import mat_solve_spd
from .mlp import MlpParams, init_mlp, mlp_forward, mlp_forward_taped

__all__ = [
    "AdamState",
    "MlpParams",
    "Tape",
    "Var",
    "adam_step",
    "autodiff",
    "grad",
    "init_mlp",
    "mat_solve_spd",
    "mlp_forward",
    "mlp_forward_taped",
    "value_and_grad",
]
