"""Function-encoder bases for feedback policies.

A :class:`BasisSet` maps ``(x, t)`` to ``p`` candidate control vectors.  A
task's policy is ``u(x, t) = sum_j c_j phi_j(x, t)`` with coefficients found
by regularized least squares on that task's samples.  Training (``fe_train``)
backpropagates the reconstruction error through the least-squares solve.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dataset import TaskDataset
from .errors import DimensionMismatch, DivergedTraining, NotPositiveDefinite
from .numerics import autodiff as ad
from .numerics.adam import AdamState, adam_step
from .numerics.linalg import mat_solve_spd
from .numerics.mlp import MlpParams, apply_layers, init_mlp
from .problems import TaskSpec

log = logging.getLogger(__name__)

__all__ = [
    "BasisSet",
    "CoefficientVector",
    "FeTrainConfig",
    "TaskDataset",
    "fe_train",
    "gram_and_rhs",
    "infer_coefficients_ls",
    "policy_eval",
    "policy_fn",
    "reconstruction_loss",
]


@dataclass
class BasisSet:
    params: MlpParams
    state_dim: int
    control_dim: int
    problem: str = ""
    input_shift: np.ndarray | None = None
    input_scale: np.ndarray | None = None

    def __post_init__(self):
        d = self.state_dim + 1
        if self.params.input_dim != d:
            raise DimensionMismatch(f"basis input must be state + time ({d})")
        if self.params.head_dim != self.control_dim:
            raise DimensionMismatch("head width must equal the control dimension")
        if self.input_shift is None:
            self.input_shift = np.zeros(d)
        if self.input_scale is None:
            self.input_scale = np.ones(d)
        self.input_shift = np.asarray(self.input_shift, dtype=np.float64)
        self.input_scale = np.asarray(self.input_scale, dtype=np.float64)

    @property
    def p(self) -> int:
        return self.params.head_count

    def _inputs(self, x, t):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.state_dim:
            raise DimensionMismatch(f"state must have length {self.state_dim}")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), x.shape[:-1])
        return np.concatenate([x, t[..., None]], axis=-1)

    def evaluate_inputs(self, z) -> np.ndarray:
        """Basis values at stacked ``(x, t)`` inputs: (..., d) -> (..., p, m)."""
        z = np.asarray(z, dtype=np.float64)
        flat = ((z - self.input_shift) / self.input_scale).reshape(-1, z.shape[-1])
        out = apply_layers(self.params.weights, self.params.biases, self.params.activation, flat)
        return out.reshape(z.shape[:-1] + (self.p, self.control_dim))

    def evaluate(self, x, t) -> np.ndarray:
        return self.evaluate_inputs(self._inputs(x, t))

    def describe(self) -> dict:
        return {
            "mlp": self.params.describe(),
            "state_dim": self.state_dim,
            "control_dim": self.control_dim,
            "problem": self.problem,
            "input_shift": [float(v) for v in self.input_shift],
            "input_scale": [float(v) for v in self.input_scale],
        }

    def checksum(self) -> str:
        from .persist import canonical_json

        h = hashlib.sha256(canonical_json(self.describe()))
        h.update(np.ascontiguousarray(self.params.flat(), dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass
class CoefficientVector:
    c: np.ndarray
    source: str = "LS"  # or "Operator"
    task: TaskSpec | None = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.c)):
            raise ValueError("coefficients must be finite")


@dataclass
class FeTrainConfig:
    p: int = 64
    hidden: tuple[int, ...] = (128, 128, 128)
    activation: str = "tanh"
    lambda_basis: float = 0.0
    lambda_tik: float = 1e-3
    alpha: float = 1e-3
    steps: int = 10_000
    batch: int | None = None  # tasks per step; None = all
    batch_samples: int = 256
    seed: int = 0
    detach_coefficients: bool = False
    log_every: int = 0

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("p must be at least 1")
        if self.lambda_tik <= 0:
            raise ValueError("lambda_tik must be positive")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")


def gram_and_rhs(basis: BasisSet, dataset: TaskDataset):
    """Monte Carlo Gram matrix and projection vector.

    ``G[j, k] = mean_i <phi_j(z_i), phi_k(z_i)>``,
    ``r[j] = mean_i <u_i, phi_j(z_i)>``.
    """
    phi = basis.evaluate(dataset.x, dataset.t)  # (M, p, m)
    return gram_from_values(phi, dataset.u)


def gram_from_values(phi, u):
    M = phi.shape[0]
    G = np.einsum("ipa,iqa->pq", phi, phi) / M
    G = 0.5 * (G + G.T)
    r = np.einsum("ia,ipa->p", u, phi) / M
    return G, r


def solve_tikhonov(G, r, lambda_tik, retries=3):
    """``(G + lambda I)^-1 r``, raising lambda tenfold on a failed factorization."""
    eye = np.eye(G.shape[-1])
    lam = lambda_tik
    for attempt in range(retries + 1):
        try:
            return mat_solve_spd(G + lam * eye, r)
        except NotPositiveDefinite:
            if attempt == retries:
                raise
            lam *= 10.0
            log.warning("Gram system not PD; retrying with lambda=%g", lam)


def infer_coefficients_ls(basis: BasisSet, dataset: TaskDataset, lambda_tik: float = 1e-3):
    if lambda_tik <= 0:
        raise ValueError("lambda_tik must be positive")
    G, r = gram_and_rhs(basis, dataset)
    return CoefficientVector(solve_tikhonov(G, r, lambda_tik), "LS", dataset.task)


def ls_objective(basis: BasisSet, dataset: TaskDataset, c, lambda_tik=0.0) -> float:
    """Mean squared reconstruction error plus ``lambda |c|^2``."""
    phi = basis.evaluate(dataset.x, dataset.t)
    pred = np.einsum("p,ipa->ia", np.asarray(c), phi)
    return float(np.mean(np.sum((dataset.u - pred) ** 2, axis=1)) + lambda_tik * np.dot(c, c))


def policy_eval(basis: BasisSet, c, x, t) -> np.ndarray:
    """``u = sum_j c_j phi_j(x, t)``; batch axes of ``x`` are preserved."""
    c = c.c if isinstance(c, CoefficientVector) else np.asarray(c, dtype=np.float64)
    if c.shape != (basis.p,):
        raise DimensionMismatch(f"expected {basis.p} coefficients, got {c.shape}")
    return np.einsum("p,...pa->...a", c, basis.evaluate(x, t))


def policy_fn(basis: BasisSet, c):
    """Closure ``(x, t) -> u`` for rollouts."""
    return lambda x, t: policy_eval(basis, c, x, t)


def reconstruction_loss(basis: BasisSet, datasets: Sequence[TaskDataset], lambda_tik=1e-3):
    """Mean over tasks of the LS-projected reconstruction error on full data."""
    losses = []
    for ds in datasets:
        c = infer_coefficients_ls(basis, ds, lambda_tik)
        losses.append(ls_objective(basis, ds, c.c))
    return float(np.mean(losses))


def _fit_normalization(datasets):
    z = np.concatenate([ds.inputs for ds in datasets])
    scale = z.std(axis=0)
    return z.mean(axis=0), np.where(scale > 1e-8, scale, 1.0)


def _taped_loss(tape, params, theta_arrays, z, u, lambda_tik, lambda_basis, detach):
    """Batched FE loss for K tasks of b samples each.

    ``z`` (K, b, d) normalized inputs, ``u`` (K, b, m).
    """
    K, b, d = z.shape
    m = u.shape[-1]
    p = params.head_count
    leaves = [tape.var(a) for a in theta_arrays]
    out = apply_layers(leaves[0::2], leaves[1::2], params.activation, z.reshape(K * b, d))
    phi = ad.reshape(out, (K, b, p, m))
    phi = ad.reshape(ad.swapaxes(phi, -1, -2), (K, b * m, p))  # rows: (sample, control dim)
    phi_t = ad.swapaxes(phi, -1, -2)
    G = ad.div(ad.matmul(phi_t, phi), float(b))
    target = u.reshape(K, b * m, 1)
    r = ad.div(ad.matmul(phi_t, target), float(b))
    system = ad.add(G, lambda_tik * np.eye(p))
    c = ad.solve_spd(ad.value_of(system) if detach else system, r)
    if detach:
        c = ad.value_of(c)
    resid = ad.sub(target, ad.matmul(phi, c))
    rec = ad.div(ad.sum(ad.square(resid)), float(K * b))
    loss = rec
    if lambda_basis > 0:
        eye = np.eye(p)
        trace = ad.sum(ad.mul(G, eye))
        loss = ad.add(loss, ad.mul(lambda_basis / K, trace))
    return loss, rec, leaves


def fe_train(datasets: Sequence[TaskDataset], config: FeTrainConfig, basis: BasisSet | None = None):
    """Learn ``p`` bases from task datasets.

    Each step draws ``batch_samples`` samples from every task in the step's
    task batch, computes coefficients by the regularized LS solve, and takes
    one Adam step on the mean reconstruction loss (plus the optional basis
    norm penalty).  Returns ``(basis, loss_curve)``.
    """
    if not datasets:
        raise ValueError("need at least one dataset")
    rng = np.random.default_rng(config.seed)
    n = datasets[0].x.shape[1]
    m = datasets[0].u.shape[1]
    if basis is None:
        params = init_mlp(
            [n + 1, *config.hidden, config.p * m], config.p, m, config.activation, rng
        )
        shift, scale = _fit_normalization(datasets)
        basis = BasisSet(params, n, m, datasets[0].problem, shift, scale)
    params = basis.params
    theta = params.flat()
    state = AdamState(alpha=config.alpha)
    inputs = [(ds.inputs - basis.input_shift) / basis.input_scale for ds in datasets]
    b = min(config.batch_samples, min(ds.M for ds in datasets))
    n_tasks = len(datasets)
    per_step = n_tasks if config.batch is None else min(config.batch, n_tasks)
    losses = np.zeros(config.steps)
    for step in range(config.steps):
        tasks = np.arange(n_tasks) if per_step == n_tasks else rng.choice(n_tasks, per_step, replace=False)
        zs, us = [], []
        for k in tasks:
            rows = rng.choice(datasets[k].M, b, replace=False) if datasets[k].M > b else np.arange(b)
            zs.append(inputs[k][rows])
            us.append(datasets[k].u[rows])
        tape = ad.Tape()
        arrays = params.with_flat(theta).arrays()
        loss, rec, leaves = _taped_loss(
            tape, params, arrays, np.stack(zs), np.stack(us),
            config.lambda_tik, config.lambda_basis, config.detach_coefficients,
        )
        value = float(loss.value)
        if not np.isfinite(value):
            raise DivergedTraining(f"non-finite loss at step {step}")
        grads = ad.grad(loss, leaves)
        theta, state = adam_step(theta, np.concatenate([g.ravel() for g in grads]), state)
        losses[step] = value
        if config.log_every and step % config.log_every == 0:
            log.info("fe step %d loss %.6g", step, value)
    basis = BasisSet(params.with_flat(theta), n, m, basis.problem, basis.input_shift, basis.input_scale)
    return basis, losses
