"""Dense SPD solves used for the Gram systems."""

import numpy as np

from ..errors import NotPositiveDefinite, ShapeMismatch


def cholesky(a):
    """Lower Cholesky factor of a (batch of) SPD matrices."""
    a = np.asarray(a, dtype=np.float64)
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(
            "matrix is not positive definite; increase the Tikhonov parameter"
        ) from exc


def mat_solve_spd(a, b):
    """Solve ``a x = b`` by Cholesky factorization.

    Parameters
    ----------
    a : (..., p, p) ndarray
        Symmetric positive definite.
    b : (..., p) or (..., p, k) ndarray

    Returns
    -------
    ndarray shaped like ``b``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeMismatch(f"expected square matrix, got {a.shape}")
    vec = b.ndim == a.ndim - 1
    if b.shape[a.ndim - 2 if not vec else -1] != a.shape[-1]:
        raise ShapeMismatch(f"rhs {b.shape} incompatible with {a.shape}")
    if not np.all(np.isfinite(a)) or not np.all(np.isfinite(b)):
        raise NotPositiveDefinite("non-finite entries in linear system")
    low = cholesky(a)
    rhs = b[..., None] if vec else b
    y = np.linalg.solve(low, rhs)
    x = np.linalg.solve(np.swapaxes(low, -1, -2), y)
    return x[..., 0] if vec else x
