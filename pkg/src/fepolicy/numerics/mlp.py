"""Multi-head MLP: shared trunk, one linear layer producing ``p * m`` outputs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeMismatch
from . import autodiff as ad


@dataclass
class MlpParams:
    weights: list[np.ndarray]  # (fan_in, fan_out)
    biases: list[np.ndarray]
    activation: str = "tanh"
    head_count: int = 1
    head_dim: int = 1

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeMismatch("need one bias per weight matrix")
        for w0, w1 in zip(self.weights, self.weights[1:]):
            if w0.shape[1] != w1.shape[0]:
                raise ShapeMismatch("consecutive layer shapes do not chain")
        for w, b in zip(self.weights, self.biases):
            if b.shape != (w.shape[1],):
                raise ShapeMismatch("bias length must match layer width")
        if self.weights[-1].shape[1] != self.head_count * self.head_dim:
            raise ShapeMismatch("final layer must emit head_count * head_dim values")
        if self.activation not in ad.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    @property
    def n_params(self) -> int:
        return int(sum(a.size for a in self.arrays()))

    def with_flat(self, theta) -> "MlpParams":
        """Same architecture with parameters taken from a flat vector."""
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise ShapeMismatch(f"expected {self.n_params} parameters, got {theta.shape}")
        ws, bs, k = [], [], 0
        for w, b in zip(self.weights, self.biases):
            ws.append(theta[k : k + w.size].reshape(w.shape))
            k += w.size
            bs.append(theta[k : k + b.size].copy())
            k += b.size
        return MlpParams([w.copy() for w in ws], bs, self.activation, self.head_count, self.head_dim)

    def describe(self) -> dict:
        return {
            "sizes": self.sizes,
            "activation": self.activation,
            "head_count": self.head_count,
            "head_dim": self.head_dim,
        }


def init_mlp(sizes, head_count=1, head_dim=1, activation="tanh", rng=None) -> MlpParams:
    """Glorot-uniform weights and zero biases.

    ``sizes`` lists input width, hidden widths and the output width, which
    must equal ``head_count * head_dim``.
    """
    rng = np.random.default_rng(rng)
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    return MlpParams(ws, bs, activation, head_count, head_dim)


def apply_layers(weights, biases, activation, x):
    """Trunk + head on a batch ``x`` of shape (..., d); works on Vars."""
    act = ad.ACTIVATIONS[activation]
    h = x
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        h = ad.add(ad.matmul(h, w), b)
        if i < last:
            h = act(h)
    return h


def mlp_forward(params: MlpParams, inputs) -> np.ndarray:
    """Evaluate all heads.

    A single input vector gives a ``(head_count, head_dim)`` matrix; a batch
    of shape ``(..., d)`` gives ``(..., head_count, head_dim)``.
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.shape[-1] != params.input_dim:
        raise ShapeMismatch(f"input length {x.shape[-1]} != {params.input_dim}")
    out = apply_layers(params.weights, params.biases, params.activation, x)
    return out.reshape(x.shape[:-1] + (params.head_count, params.head_dim))


def mlp_forward_taped(tape: ad.Tape, params: MlpParams, x):
    """Like :func:`mlp_forward` but records onto ``tape``.

    Returns ``(output_var, leaf_vars)`` where ``leaf_vars`` follow
    :meth:`MlpParams.arrays` order.
    """
    leaves = [tape.var(a) for a in params.arrays()]
    out = apply_layers(leaves[0::2], leaves[1::2], params.activation, x)
    shape = np.shape(ad.value_of(x))[:-1] + (params.head_count, params.head_dim)
    return ad.reshape(out, shape), leaves
