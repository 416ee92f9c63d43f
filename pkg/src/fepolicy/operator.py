"""Operator network mapping a task's target coordinates to basis coefficients."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .dataset import TaskDataset
from .encoder import BasisSet, CoefficientVector, infer_coefficients_ls
from .errors import BasisMismatch, DivergedTraining, UnsupportedTaskKind
from .numerics import autodiff as ad
from .numerics.adam import AdamState, adam_step
from .numerics.mlp import MlpParams, apply_layers, init_mlp
from .problems import TaskSpec

# number of free target coordinates per problem
ETA_DIMS = {"PointMass2D": 2, "Quadcopter12D": 3}


def encode_eta(task: TaskSpec, box_low, box_high) -> np.ndarray:
    """Target coordinates rescaled so the training box maps to [0, 1]^d."""
    if task.kind != "Target":
        raise UnsupportedTaskKind(
            f"{task.kind} tasks have no compact parameterization; use LS inference"
        )
    low = np.asarray(box_low, dtype=np.float64)
    high = np.asarray(box_high, dtype=np.float64)
    width = np.where(high > low, high - low, 1.0)
    return (np.asarray(task.target[: len(low)]) - low) / width


@dataclass
class OperatorTrainConfig:
    beta: float = 1e-3
    steps: int = 5000
    seed: int = 0
    hidden: tuple[int, ...] = (64, 64, 64)
    activation: str = "tanh"
    lambda_tik: float = 1e-3

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")


@dataclass
class OperatorNet:
    params: MlpParams
    box_low: np.ndarray
    box_high: np.ndarray
    coef_shift: np.ndarray
    coef_scale: np.ndarray
    basis_checksum: str
    problem: str = ""

    @property
    def p(self) -> int:
        return self.params.head_count

    def predict(self, eta) -> np.ndarray:
        """Coefficients for already-encoded inputs ``eta`` of shape (..., d)."""
        eta = np.asarray(eta, dtype=np.float64)
        flat = eta.reshape(-1, eta.shape[-1])
        out = apply_layers(self.params.weights, self.params.biases, self.params.activation, flat)
        out = self.coef_shift + self.coef_scale * out
        return out.reshape(eta.shape[:-1] + (self.p,))

    def describe(self) -> dict:
        return {
            "mlp": self.params.describe(),
            "box_low": [float(v) for v in self.box_low],
            "box_high": [float(v) for v in self.box_high],
            "coef_shift": [float(v) for v in self.coef_shift],
            "coef_scale": [float(v) for v in self.coef_scale],
            "problem": self.problem,
        }

    def checksum(self) -> str:
        from .persist import canonical_json

        h = hashlib.sha256(canonical_json(self.describe()))
        h.update(self.basis_checksum.encode())
        h.update(np.ascontiguousarray(self.params.flat(), dtype="<f8").tobytes())
        return h.hexdigest()

    @classmethod
    def from_description(cls, mlp: MlpParams, arch: dict, basis_checksum: str) -> "OperatorNet":
        return cls(
            mlp,
            np.array(arch["box_low"]),
            np.array(arch["box_high"]),
            np.array(arch["coef_shift"]),
            np.array(arch["coef_scale"]),
            basis_checksum,
            arch["problem"],
        )


class OperatorFit(NamedTuple):
    net: OperatorNet
    final_loss: float
    loss_curve: np.ndarray
    targets: np.ndarray  # cached LS coefficients, one row per task


def target_coefficients(basis: BasisSet, datasets: Sequence[TaskDataset], lambda_tik=1e-3):
    return np.stack([infer_coefficients_ls(basis, ds, lambda_tik).c for ds in datasets])


def operator_train(
    basis: BasisSet,
    pairs: Sequence[tuple[TaskSpec, TaskDataset]],
    config: OperatorTrainConfig,
    eta_dim: int | None = None,
) -> OperatorFit:
    """Fit the coefficient map by Adam on the mean squared coefficient error.

    The basis is only read.  LS targets are computed once up front since
    the basis does not change during this phase.
    """
    if len(pairs) < 1:
        raise ValueError("need at least one (task, dataset) pair")
    rng = np.random.default_rng(config.seed)
    tasks = [t for t, _ in pairs]
    d = eta_dim or ETA_DIMS.get(basis.problem, len(tasks[0].target))
    coords = np.array([t.target[:d] for t in tasks], dtype=np.float64)
    low, high = coords.min(axis=0), coords.max(axis=0)
    eta = np.stack([encode_eta(t, low, high) for t in tasks])
    targets = target_coefficients(basis, [ds for _, ds in pairs], config.lambda_tik)
    shift = targets.mean(axis=0)
    spread = float(targets.std())
    scale = np.full(basis.p, spread if spread > 1e-12 else 1.0)
    params = init_mlp([d, *config.hidden, basis.p], basis.p, 1, config.activation, rng)
    net = OperatorNet(params, low, high, shift, scale, basis.checksum(), basis.problem)

    theta = params.flat()
    state = AdamState(alpha=config.beta)
    losses = np.zeros(config.steps)

    def loss_of(tape, arrays):
        leaves = [tape.var(a) for a in arrays]
        out = apply_layers(leaves[0::2], leaves[1::2], params.activation, eta)
        pred = ad.add(shift, ad.mul(scale, out))
        err = ad.sum(ad.square(ad.sub(targets, pred)), axis=1)
        return ad.mean(err), leaves

    for step in range(config.steps):
        tape = ad.Tape()
        loss, leaves = loss_of(tape, params.with_flat(theta).arrays())
        value = float(loss.value)
        if not np.isfinite(value):
            raise DivergedTraining(f"operator loss non-finite at step {step}")
        grads = ad.grad(loss, leaves)
        theta, state = adam_step(theta, np.concatenate([g.ravel() for g in grads]), state)
        losses[step] = value
    net.params = params.with_flat(theta)
    final = float(np.mean(np.sum((targets - net.predict(eta)) ** 2, axis=1)))
    return OperatorFit(net, final, losses, targets)


def operator_infer(net: OperatorNet, task: TaskSpec, basis: BasisSet | None = None) -> CoefficientVector:
    if basis is not None and basis.checksum() != net.basis_checksum:
        raise BasisMismatch("operator network was trained against a different basis")
    eta = encode_eta(task, net.box_low, net.box_high)
    return CoefficientVector(net.predict(eta), "Operator", task)
