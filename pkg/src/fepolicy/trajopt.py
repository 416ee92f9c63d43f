"""Direct-transcription open-loop solver used as data generator and oracle.

The decision variables are the piecewise-constant controls on the time grid.
The objective is rolled out with RK4 and differentiated with the tape; all
trajectories of a batch are optimized together but independently (the batch
objective is a sum of separable terms, and every optimizer state is kept
per trajectory).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .dataset import TaskDataset
from .errors import DatagenFailure, NonFiniteState, NotConverged
from .numerics import autodiff as ad
from .numerics.adam import AdamState, adam_step
from .problems import (
    ControlProblem,
    TaskBatch,
    TaskSpec,
    Trajectory,
    as_batch,
    integrate_controls,
    sample_initial_states,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverOptions:
    method: str = "lbfgs"  # or "adam"
    max_iters: int = 3000
    grad_tol: float = 1e-4
    lr: float = 0.05  # adam only
    history: int = 60  # lbfgs memory
    multistart: int = 1
    restart_scale: float = 1.0
    quadrature: str = "left"  # or "trapezoid"
    seed: int = 0


def cost_terms(problem: ControlProblem, task, states, controls, quadrature="left"):
    """Control, state and terminal parts of the objective along a trajectory.

    ``states`` is the list of N+1 states (each ``(..., n)``) and ``controls``
    is ``(..., N, m)``.  Each returned term has shape ``(...)``.
    """
    tb = as_batch(task)
    h = problem.dt
    ctrl = h * 0.5 * ad.sum(ad.sum(ad.square(controls), axis=-1), axis=-1)
    # time-major stack so task arrays (batch, ...) broadcast from the right
    xs = ad.stack(states, axis=0)
    q = problem.state_cost(xs, tb)  # (N+1, ...)
    if quadrature == "left":
        state = h * ad.sum(q[:-1], axis=0)
    elif quadrature == "trapezoid":
        state = h * ad.sum(0.5 * (q[:-1] + q[1:]), axis=0)
    else:
        raise ValueError(f"unknown quadrature {quadrature!r}")
    term = tb.terminal_weight * ad.sum(ad.square(ad.sub(states[-1], tb.target)), axis=-1)
    return ctrl, state, term


def objective_terms(problem: ControlProblem, task, controls, x0, quadrature="left"):
    """Roll out open-loop ``controls`` from ``x0`` and split the objective.

    Returns ``(control, state, terminal, states)``; works on tape Vars.
    """
    states = integrate_controls(problem, x0, controls)
    return (*cost_terms(problem, task, states, controls, quadrature), states)


def discretized_objective(problem, task, controls, x0, quadrature="left"):
    """``h * sum_k L(x_k, u_k) + G(x_N)`` under ZOH RK4 rollout."""
    ctrl, state, term, states = objective_terms(problem, task, controls, x0, quadrature)
    if not isinstance(term, ad.Var):
        if not np.all(np.isfinite(ad.value_of(states[-1]))):
            raise NonFiniteState("open-loop rollout diverged")
    return ad.add(ad.add(ctrl, state), term)


def _batch_funcs(problem, tasks: TaskBatch, x0, quadrature):
    n_steps, m = problem.n_steps, problem.control_dim

    def fun(U, idx):
        with np.errstate(over="ignore", invalid="ignore"):
            c, s, g, _ = objective_terms(
                problem, tasks.take(idx), U.reshape(-1, n_steps, m), x0[idx], quadrature
            )
            J = c + s + g
        return np.where(np.isfinite(J), J, np.inf)

    def value_and_grad(U, idx):
        tape = ad.Tape()
        leaf = tape.var(U.reshape(-1, n_steps, m))
        c, s, g, _ = objective_terms(problem, tasks.take(idx), leaf, x0[idx], quadrature)
        J = ad.add(ad.add(c, s), g)
        (gu,) = ad.grad(ad.sum(J), [leaf])
        return J.value.copy(), gu.reshape(len(idx), -1)

    return fun, value_and_grad


def _lbfgs(fun, vg, U0, opts: SolverOptions):
    """Per-row L-BFGS with Armijo backtracking; rows never interact."""
    B, d = U0.shape
    H = opts.history
    x = U0.copy()
    all_idx = np.arange(B)
    f, g = vg(x, all_idx)
    S = np.zeros((B, H, d))
    Y = np.zeros((B, H, d))
    rho = np.zeros((B, H))
    gamma = 1.0 / np.maximum(1.0, np.abs(g).max(axis=1))
    stalled = np.zeros(B, dtype=bool)
    iters = np.zeros(B, dtype=int)
    for it in range(opts.max_iters):
        gnorm = np.abs(g).max(axis=1)
        active = (gnorm > opts.grad_tol) & ~stalled
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        iters[idx] += 1
        q = g[idx].copy()
        order = [(it - 1 - j) % H for j in range(min(it, H))]
        alphas = []
        for s in order:
            a = rho[idx, s] * np.einsum("bd,bd->b", S[idx, s], q)
            q -= a[:, None] * Y[idx, s]
            alphas.append(a)
        r = gamma[idx, None] * q
        for s, a in zip(reversed(order), reversed(alphas)):
            beta = rho[idx, s] * np.einsum("bd,bd->b", Y[idx, s], r)
            r += S[idx, s] * (a - beta)[:, None]
        direction = -r
        gd = np.einsum("bd,bd->b", g[idx], direction)
        bad = ~(gd < 0)
        if bad.any():
            scale = 1.0 / np.maximum(1.0, np.abs(g[idx][bad]).max(axis=1))
            direction[bad] = -g[idx][bad] * scale[:, None]
            gd[bad] = np.einsum("bd,bd->b", g[idx][bad], direction[bad])

        step = np.ones(idx.size)
        accepted = np.zeros(idx.size, dtype=bool)
        f_new = np.empty(idx.size)
        pending = np.arange(idx.size)
        for _ in range(50):
            trial = x[idx[pending]] + step[pending, None] * direction[pending]
            ft = fun(trial, idx[pending])
            ok = ft <= f[idx[pending]] + 1e-4 * step[pending] * gd[pending]
            f_new[pending[ok]] = ft[ok]
            accepted[pending[ok]] = True
            pending = pending[~ok]
            if pending.size == 0:
                break
            step[pending] *= 0.5
        stalled[idx[~accepted]] = True
        acc = idx[accepted]
        if acc.size == 0:
            continue
        x_new = x[acc] + step[accepted, None] * direction[accepted]
        f_chk, g_new = vg(x_new, acc)
        s_vec = x_new - x[acc]
        y_vec = g_new - g[acc]
        sy = np.einsum("bd,bd->b", s_vec, y_vec)
        yy = np.einsum("bd,bd->b", y_vec, y_vec)
        good = sy > 1e-12 * np.sqrt(yy * np.einsum("bd,bd->b", s_vec, s_vec))
        slot = it % H
        S[acc, slot] = np.where(good[:, None], s_vec, 0.0)
        Y[acc, slot] = np.where(good[:, None], y_vec, 0.0)
        rho[acc, slot] = np.where(good, 1.0 / np.where(good, sy, 1.0), 0.0)
        gamma[acc] = np.where(good, sy / np.where(good, yy, 1.0), gamma[acc])
        x[acc], f[acc], g[acc] = x_new, f_chk, g_new
    return x, f, np.abs(g).max(axis=1), iters


def _adam(fun, vg, U0, opts: SolverOptions):
    B = U0.shape[0]
    all_idx = np.arange(B)
    x = U0.copy()
    f, g = vg(x, all_idx)
    best_x, best_f, best_g = x.copy(), f.copy(), np.abs(g).max(axis=1)
    state = AdamState(alpha=opts.lr)
    iters = np.zeros(B, dtype=int)
    for _ in range(opts.max_iters):
        done = best_g <= opts.grad_tol
        if done.all():
            break
        # frozen rows see zero gradient, which Adam leaves unchanged only if
        # their moments are zero too; so mask the update instead
        x_new, state = adam_step(x, g, state)
        x = np.where(done[:, None], x, x_new)
        iters[~done] += 1
        f, g = vg(x, all_idx)
        gn = np.abs(g).max(axis=1)
        better = (f < best_f) & ~done
        best_x[better], best_f[better], best_g[better] = x[better], f[better], gn[better]
    return best_x, best_f, best_g, iters


def solve_batch(
    problem: ControlProblem,
    tasks: TaskSpec | Sequence[TaskSpec],
    x0,
    opts: SolverOptions | None = None,
) -> list[Trajectory]:
    """Solve one open-loop problem per row of ``x0``.

    ``tasks`` is either a single task shared by all rows or one task per row.
    Returns trajectories with ``converged`` flags; never raises on
    non-convergence.
    """
    opts = opts or SolverOptions()
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    B = len(x0)
    if isinstance(tasks, TaskSpec):
        tasks = [tasks] * B
    tasks = list(tasks)
    if len(tasks) != B:
        raise ValueError("need one task per initial state")
    k = max(1, opts.multistart)
    N, m = problem.n_steps, problem.control_dim
    rng = np.random.default_rng(opts.seed)
    U0 = np.zeros((k, B, N * m))
    if problem.nominal_control is not None:
        U0 += np.tile(np.asarray(problem.nominal_control, dtype=np.float64), N)
    if k > 1:
        U0[1:] = opts.restart_scale * rng.standard_normal((k - 1, B, N * m))
    tb = TaskBatch.from_tasks(tasks * k)
    xs = np.tile(x0, (k, 1))
    fun, vg = _batch_funcs(problem, tb, xs, opts.quadrature)
    solver = {"lbfgs": _lbfgs, "adam": _adam}[opts.method]
    U, f, gn, iters = solver(fun, vg, U0.reshape(k * B, -1), opts)
    U, f, gn = U.reshape(k, B, -1), f.reshape(k, B), gn.reshape(k, B)
    conv = gn <= opts.grad_tol
    # prefer converged starts, then lowest objective
    rank = np.where(conv, f, np.inf)
    pick = np.where(conv.any(axis=0), np.argmin(rank, axis=0), np.argmin(f, axis=0))
    cols = np.arange(B)
    U_best = U[pick, cols].reshape(B, N, m)
    states = np.stack(integrate_controls(problem, x0, U_best), axis=1)
    out = []
    for b in range(B):
        out.append(
            Trajectory(
                times=problem.times,
                states=states[b],
                controls=U_best[b],
                objective=float(f[pick[b], b]),
                converged=bool(conv[pick[b], b]),
                grad_norm=float(gn[pick[b], b]),
            )
        )
    return out


def solve_open_loop(problem, task, x0, opts: SolverOptions | None = None) -> Trajectory:
    """Solve a single instance; raises :class:`NotConverged` with the best iterate."""
    (traj,) = solve_batch(problem, task, np.asarray(x0, dtype=np.float64)[None], opts)
    if not traj.converged:
        raise NotConverged(
            f"gradient norm {traj.grad_norm:.3e} above tolerance",
            trajectory=traj,
            diagnostics={"grad_norm": traj.grad_norm, "objective": traj.objective},
        )
    return traj


def trajectories_to_dataset(problem, task, trajs, seed=()) -> TaskDataset:
    N = problem.n_steps
    x = np.concatenate([tr.states[:N] for tr in trajs])
    t = np.tile(problem.times[:N], len(trajs))
    u = np.concatenate([tr.controls for tr in trajs])
    return TaskDataset(
        task, x, t, u, np.array([tr.objective for tr in trajs]), N, problem.name, seed
    )


def _as_seed(seed) -> tuple[int, ...]:
    return tuple(int(s) for s in np.atleast_1d(seed))


def generate_datasets(
    problem: ControlProblem,
    tasks: Sequence[TaskSpec],
    n_traj: int,
    seeds,
    opts: SolverOptions | None = None,
    max_unconverged: float = 0.1,
) -> list[TaskDataset]:
    """Solve ``n_traj`` instances per task in one batch and build datasets.

    ``seeds[i]`` seeds task ``i``'s initial-state draws.  Unconverged
    trajectories are dropped; more than ``max_unconverged`` of them in any
    task raises :class:`DatagenFailure`.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be at least 1")
    tasks = list(tasks)
    seeds = [_as_seed(s) for s in seeds]
    x0 = np.concatenate([sample_initial_states(problem, n_traj, list(s)) for s in seeds])
    row_tasks = [t for t in tasks for _ in range(n_traj)]
    trajs = solve_batch(problem, row_tasks, x0, opts)
    out = []
    for i, task in enumerate(tasks):
        chunk = trajs[i * n_traj : (i + 1) * n_traj]
        good = [tr for tr in chunk if tr.converged]
        bad = n_traj - len(good)
        if bad:
            log.warning("task %d: %d of %d trajectories unconverged", i, bad, n_traj)
        if bad > max_unconverged * n_traj or not good:
            raise DatagenFailure(f"task {i}: {bad} of {n_traj} trajectories did not converge")
        out.append(trajectories_to_dataset(problem, task, good, seeds[i]))
    return out


def generate_task_dataset(problem, task, n_traj, seed, opts=None) -> TaskDataset:
    return generate_datasets(problem, [task], n_traj, [seed], opts)[0]


def with_options(opts: SolverOptions | None, **changes) -> SolverOptions:
    return replace(opts or SolverOptions(), **changes)
