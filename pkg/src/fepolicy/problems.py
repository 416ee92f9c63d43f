"""Benchmark problem families: dynamics, costs, initial-state laws, RK4.

All dynamics and cost functions take arrays with arbitrary leading batch
axes (state ``(..., n)``, control ``(..., m)``) and are written against
:mod:`fepolicy.numerics.autodiff`, so they can be differentiated by the
open-loop solver.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionMismatch, NonFiniteState
from .numerics import autodiff as ad

TASK_KINDS = ("Target", "SingleObstacle", "DoubleObstacle")


@dataclass(frozen=True)
class Obstacle:
    amplitude: float
    center: tuple[float, float]
    width: float

    def __post_init__(self):
        if self.width <= 0:
            raise ValueError("obstacle width must be positive")
        if self.amplitude < 0:
            raise ValueError("obstacle amplitude must be non-negative")


@dataclass(frozen=True)
class TaskSpec:
    """One problem instance: target state, obstacles, terminal weight."""

    kind: str
    target: tuple[float, ...]
    obstacles: tuple[Obstacle, ...] = ()
    terminal_weight: float = 50.0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.kind == "Target" and self.obstacles:
            raise ValueError("Target tasks carry no obstacles")
        if self.kind == "SingleObstacle" and len(self.obstacles) != 1:
            raise ValueError("SingleObstacle needs exactly one obstacle")
        if self.kind == "DoubleObstacle" and len(self.obstacles) != 2:
            raise ValueError("DoubleObstacle needs exactly two obstacles")
        object.__setattr__(self, "target", tuple(float(v) for v in self.target))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "target": list(self.target),
            "obstacles": [
                {"amplitude": o.amplitude, "center": list(o.center), "width": o.width}
                for o in self.obstacles
            ],
            "terminal_weight": self.terminal_weight,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        obs = tuple(
            Obstacle(float(o["amplitude"]), tuple(float(c) for c in o["center"]), float(o["width"]))
            for o in d.get("obstacles", ())
        )
        return cls(d["kind"], tuple(d["target"]), obs, float(d.get("terminal_weight", 50.0)))


@dataclass
class TaskBatch:
    """Task parameters as arrays, optionally with a leading batch axis.

    Obstacle lists are padded with zero-amplitude entries so tasks with
    different obstacle counts can share one batch.
    """

    target: np.ndarray  # (..., n)
    amplitude: np.ndarray  # (..., k)
    center: np.ndarray  # (..., k, 2)
    width: np.ndarray  # (..., k)
    terminal_weight: np.ndarray  # (...)

    @classmethod
    def from_tasks(cls, tasks: Sequence[TaskSpec]) -> "TaskBatch":
        k = max((len(t.obstacles) for t in tasks), default=0)
        b = len(tasks)
        amp, ctr, wid = np.zeros((b, k)), np.zeros((b, k, 2)), np.ones((b, k))
        for i, t in enumerate(tasks):
            for j, o in enumerate(t.obstacles):
                amp[i, j], ctr[i, j], wid[i, j] = o.amplitude, o.center, o.width
        return cls(
            np.array([t.target for t in tasks], dtype=np.float64),
            amp,
            ctr,
            wid,
            np.array([t.terminal_weight for t in tasks], dtype=np.float64),
        )

    @classmethod
    def from_task(cls, task: TaskSpec) -> "TaskBatch":
        b = cls.from_tasks([task])
        return cls(b.target[0], b.amplitude[0], b.center[0], b.width[0], b.terminal_weight[0])

    def take(self, idx) -> "TaskBatch":
        return TaskBatch(
            self.target[idx], self.amplitude[idx], self.center[idx], self.width[idx],
            self.terminal_weight[idx],
        )


def as_batch(task) -> TaskBatch:
    if isinstance(task, TaskBatch):
        return task
    if isinstance(task, TaskSpec):
        return TaskBatch.from_task(task)
    return TaskBatch.from_tasks(list(task))


@dataclass
class ControlProblem:
    name: str
    state_dim: int
    control_dim: int
    horizon: float
    n_steps: int
    dynamics: Callable  # f(x, u, t) -> xdot
    state_cost: Callable  # Q(x, task_batch) -> (...)
    init_mean: np.ndarray
    init_cov: np.ndarray
    terminal_weight: float
    position_dims: tuple[int, ...] = (0, 1)
    default_target: tuple[float, ...] | None = None
    nominal_control: tuple[float, ...] | None = None  # solver warm start
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.n_steps < 1:
            raise ValueError("n_steps must be at least 1")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)

    def make_target_task(self, coords) -> TaskSpec:
        """Target task from the free target coordinates (rest zero)."""
        y = np.zeros(self.state_dim)
        y[: len(coords)] = coords
        return TaskSpec("Target", tuple(y), (), self.terminal_weight)

    def make_obstacle_task(self, obstacles) -> TaskSpec:
        kind = "SingleObstacle" if len(obstacles) == 1 else "DoubleObstacle"
        return TaskSpec(kind, self.default_target, tuple(obstacles), self.terminal_weight)


# ---------------------------------------------------------------------------
# dynamics


def _point_mass_dynamics(x, u, t):
    return u


QUAD_MASS = 1.0
GRAVITY = 9.8


def _quadcopter_dynamics(x, u, t):
    """First-order form; state is (pos[3], angles psi/theta/phi, vel[3], rates[3])."""
    psi, theta, phi = x[..., 3], x[..., 4], x[..., 5]
    thrust = u[..., 0] / QUAD_MASS
    s_psi, c_psi = ad.sin(psi), ad.cos(psi)
    s_th, c_th = ad.sin(theta), ad.cos(theta)
    s_phi, c_phi = ad.sin(phi), ad.cos(phi)
    ax = thrust * (s_psi * s_phi + c_psi * s_th * c_phi)
    ay = thrust * (-c_psi * s_phi + s_psi * s_th * c_phi)
    az = thrust * c_th * c_phi - GRAVITY
    acc = ad.stack([ax, ay, az], axis=-1)
    return ad.concatenate([x[..., 6:12], acc, u[..., 1:4]], axis=-1)


WHEELBASE = 0.5


def _bicycle_dynamics(x, u, t):
    theta, v = x[..., 2], x[..., 3]
    steer, accel = u[..., 0], u[..., 1]
    return ad.stack(
        [v * ad.cos(theta), v * ad.sin(theta), v / WHEELBASE * ad.tan(steer), accel],
        axis=-1,
    )


# ---------------------------------------------------------------------------
# state costs Q(x)


def _point_mass_obstacle(x, task):
    return 50.0 * ad.exp(-1.25 * ad.sum(ad.square(x), axis=-1))


def _no_state_cost(x, task):
    return 0.0 * ad.sum(x, axis=-1)


def gaussian_obstacles(pos, amplitude, center, width):
    """Sum of Gaussian bumps at positions ``pos`` of shape (..., 2)."""
    if np.size(amplitude) == 0:
        return 0.0 * ad.sum(pos, axis=-1)
    amplitude = np.asarray(amplitude)
    # batch layout: pos (B, 2) or (2,), params (B, k) / (k,)
    diff = ad.sub(ad.reshape(pos, np.shape(ad.value_of(pos))[:-1] + (1, 2)), center)
    d2 = ad.sum(ad.square(diff), axis=-1)
    bumps = amplitude * ad.exp(-d2 / (2.0 * np.asarray(width) ** 2))
    return ad.sum(bumps, axis=-1)


def _bicycle_obstacles(x, task):
    return gaussian_obstacles(x[..., 0:2], task.amplitude, task.center, task.width)


# ---------------------------------------------------------------------------
# factories


def point_mass_2d(obstacle: bool = True) -> ControlProblem:
    return ControlProblem(
        name="PointMass2D",
        state_dim=2,
        control_dim=2,
        horizon=1.0,
        n_steps=20,
        dynamics=_point_mass_dynamics,
        state_cost=_point_mass_obstacle if obstacle else _no_state_cost,
        init_mean=np.array([-1.5, -1.5]),
        init_cov=0.4 * np.eye(2),
        terminal_weight=50.0,
        position_dims=(0, 1),
        meta={"obstacle": obstacle},
    )


def quadcopter_12d(n_steps: int = 50) -> ControlProblem:
    mean = np.zeros(12)
    mean[:3] = -2.0
    cov = np.zeros((12, 12))
    cov[[0, 1, 2], [0, 1, 2]] = 0.5**2
    return ControlProblem(
        name="Quadcopter12D",
        state_dim=12,
        control_dim=4,
        horizon=2.0,
        n_steps=n_steps,
        dynamics=_quadcopter_dynamics,
        state_cost=_no_state_cost,
        init_mean=mean,
        init_cov=cov,
        terminal_weight=500.0,
        position_dims=(0, 1, 2),
        nominal_control=(GRAVITY, 0.0, 0.0, 0.0),
    )


def bicycle_4d(n_steps: int = 50) -> ControlProblem:
    cov = np.zeros((4, 4))
    cov[[0, 1], [0, 1]] = 0.35**2
    return ControlProblem(
        name="Bicycle4D",
        state_dim=4,
        control_dim=2,
        horizon=5.0,
        n_steps=n_steps,
        dynamics=_bicycle_dynamics,
        state_cost=_bicycle_obstacles,
        init_mean=np.array([0.0, 0.0, np.pi / 4, 0.0]),
        init_cov=cov,
        terminal_weight=50.0,
        position_dims=(0, 1),
        default_target=(5.0, 5.0, np.pi / 4, 0.0),
    )


PROBLEMS = {
    "PointMass2D": point_mass_2d,
    "Quadcopter12D": quadcopter_12d,
    "Bicycle4D": bicycle_4d,
}

_ALIASES = {"pointmass2d": "PointMass2D", "quadcopter12d": "Quadcopter12D", "bicycle4d": "Bicycle4D"}


def get_problem(name: str, **kwargs) -> ControlProblem:
    key = _ALIASES.get(name.lower().replace("_", "").replace("-", ""), name)
    if key not in PROBLEMS:
        raise KeyError(f"unknown problem {name!r}; choose from {sorted(PROBLEMS)}")
    return PROBLEMS[key](**kwargs)


# ---------------------------------------------------------------------------
# evaluation helpers


def _check(problem: ControlProblem, x=None, u=None):
    if x is not None and np.shape(ad.value_of(x))[-1] != problem.state_dim:
        raise DimensionMismatch(f"{problem.name}: state must have length {problem.state_dim}")
    if u is not None and np.shape(ad.value_of(u))[-1] != problem.control_dim:
        raise DimensionMismatch(f"{problem.name}: control must have length {problem.control_dim}")


def dynamics_eval(problem: ControlProblem, x, u, t=0.0):
    _check(problem, x, u)
    if not isinstance(x, ad.Var) and not isinstance(u, ad.Var):
        x, u = np.asarray(x, dtype=np.float64), np.asarray(u, dtype=np.float64)
    return problem.dynamics(x, u, t)


def control_cost(u):
    return 0.5 * ad.sum(ad.square(u), axis=-1)


def state_cost(problem: ControlProblem, task, x):
    _check(problem, x)
    if not isinstance(x, ad.Var):
        x = np.asarray(x, dtype=np.float64)
    return problem.state_cost(x, as_batch(task))


def running_cost(problem: ControlProblem, task, x, u):
    """``0.5 |u|^2 + Q(x)``."""
    _check(problem, x, u)
    if not isinstance(u, ad.Var):
        u = np.asarray(u, dtype=np.float64)
    return ad.add(control_cost(u), state_cost(problem, task, x))


def terminal_cost(problem: ControlProblem, task, x_final):
    """``w |x_T - y|^2`` with the task's terminal weight."""
    _check(problem, x_final)
    tb = as_batch(task)
    if not isinstance(x_final, ad.Var):
        x_final = np.asarray(x_final, dtype=np.float64)
    return tb.terminal_weight * ad.sum(ad.square(ad.sub(x_final, tb.target)), axis=-1)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (N+1, n)
    controls: np.ndarray  # (N, m)
    objective: float = float("nan")
    converged: bool = True
    grad_norm: float = float("nan")


def rk4_step(problem: ControlProblem, x, u, t, h):
    f = problem.dynamics
    k1 = f(x, u, t)
    k2 = f(ad.add(x, ad.mul(0.5 * h, k1)), u, t + 0.5 * h)
    k3 = f(ad.add(x, ad.mul(0.5 * h, k2)), u, t + 0.5 * h)
    k4 = f(ad.add(x, ad.mul(h, k3)), u, t + h)
    incr = ad.add(ad.add(k1, ad.mul(2.0, k2)), ad.add(ad.mul(2.0, k3), k4))
    return ad.add(x, ad.mul(h / 6.0, incr))


def integrate_controls(problem: ControlProblem, x0, controls):
    """Zero-order-hold RK4 under an open-loop control grid.

    ``controls`` has shape ``(..., N, m)``; returns the list of the N+1
    states (each ``(..., n)``), Vars if the inputs are on a tape.
    """
    h = problem.dt
    times = problem.times
    x = x0
    states = [x]
    for k in range(problem.n_steps):
        x = rk4_step(problem, x, controls[..., k, :], times[k], h)
        states.append(x)
    return states


def rk4_rollout(problem: ControlProblem, x0, control_fn) -> Trajectory:
    """Closed-loop RK4 rollout with ``u_k = control_fn(x_k, t_k)`` held per step.

    ``x0`` may carry leading batch axes, in which case ``states`` is
    ``(..., N+1, n)``.  ``objective`` is left unset here.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    _check(problem, x0)
    h = problem.dt
    times = problem.times
    x = x0
    states, controls = [x], []
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(problem.n_steps):
            u = np.asarray(control_fn(x, times[k]), dtype=np.float64)
            u = np.broadcast_to(u, x.shape[:-1] + (problem.control_dim,))
            x = rk4_step(problem, x, u, times[k], h)
            if not np.all(np.isfinite(x)):
                raise NonFiniteState(f"state left the finite range at step {k + 1}")
            states.append(x)
            controls.append(u)
    return Trajectory(
        times=times,
        states=np.stack(states, axis=-2),
        controls=np.stack(controls, axis=-2),
    )


def sample_initial_states(problem: ControlProblem, count: int, rng) -> np.ndarray:
    """Draw ``count`` initial states, shape ``(count, n)``.

    The benchmark covariances are diagonal, so draws are mean + std * z;
    zero-variance components are returned exactly equal to the mean.
    """
    rng = np.random.default_rng(rng)
    cov = np.asarray(problem.init_cov)
    if np.any(cov != np.diag(np.diag(cov))):
        raise ValueError("only diagonal initial covariances are supported")
    std = np.sqrt(np.diag(cov))
    live = std > 0
    z = np.zeros((count, problem.state_dim))
    z[:, live] = rng.standard_normal((count, int(live.sum())))
    return problem.init_mean + z * std


def sample_initial_state(problem: ControlProblem, rng_seed) -> np.ndarray:
    return sample_initial_states(problem, 1, rng_seed)[0]
