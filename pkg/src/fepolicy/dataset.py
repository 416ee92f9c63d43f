from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch
from .problems import TaskSpec


@dataclass
class TaskDataset:
    """Labelled state-time-control samples for one task.

    Samples from the same trajectory are contiguous; trajectory ``j`` owns
    rows ``j * traj_len`` to ``(j + 1) * traj_len``.
    """

    task: TaskSpec
    x: np.ndarray  # (M, n)
    t: np.ndarray  # (M,)
    u: np.ndarray  # (M, m)
    objectives: np.ndarray = field(default_factory=lambda: np.zeros(0))
    traj_len: int = 0
    problem: str = ""
    seed: tuple[int, ...] = ()

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        self.u = np.asarray(self.u, dtype=np.float64)
        self.objectives = np.asarray(self.objectives, dtype=np.float64).reshape(-1)
        if self.x.ndim != 2 or self.u.ndim != 2:
            raise ShapeMismatch("x and u must be 2-D sample arrays")
        if not (len(self.x) == len(self.t) == len(self.u)):
            raise ShapeMismatch("x, t and u must have the same number of samples")
        if len(self.x) < 1:
            raise ShapeMismatch("a dataset needs at least one sample")
        self.seed = tuple(int(s) for s in self.seed)

    @property
    def M(self) -> int:
        return len(self.x)

    @property
    def n_traj(self) -> int:
        return len(self.objectives)

    @property
    def inputs(self) -> np.ndarray:
        """(M, n + 1) array of state concatenated with time."""
        return np.concatenate([self.x, self.t[:, None]], axis=1)

    def first_trajectories(self, k: int) -> "TaskDataset":
        """Dataset restricted to the first ``k`` trajectories."""
        if self.traj_len <= 0:
            raise ValueError("dataset has no trajectory structure")
        k = min(k, self.n_traj)
        rows = k * self.traj_len
        return TaskDataset(
            self.task, self.x[:rows], self.t[:rows], self.u[:rows], self.objectives[:k],
            self.traj_len, self.problem, self.seed,
        )

    def subsample(self, idx) -> "TaskDataset":
        return TaskDataset(self.task, self.x[idx], self.t[idx], self.u[idx], problem=self.problem)
