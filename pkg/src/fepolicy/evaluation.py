"""Closed-loop deployment of FE policies and the comparison metrics."""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoder import BasisSet, infer_coefficients_ls, policy_fn
from .errors import NonFiniteState
from .operator import OperatorNet, operator_infer
from .problems import ControlProblem, TaskSpec, Trajectory, rk4_rollout, sample_initial_states
from .trajopt import SolverOptions, cost_terms, solve_batch, trajectories_to_dataset

log = logging.getLogger(__name__)

METHODS = ("ls", "operator")


@dataclass
class EvalTask:
    task_id: int
    task: TaskSpec
    tag: str = "seen"  # seen | interpolation | extrapolation | test


@dataclass
class EvalPlan:
    problem: ControlProblem
    basis: BasisSet
    tasks: list[EvalTask]
    methods: tuple[str, ...] = ("ls",)
    operator: OperatorNet | None = None
    n_init: int = 10
    seed: int = 0
    budget: int = 1  # oracle trajectories per task for LS inference
    lambda_tik: float = 1e-3
    solver: SolverOptions = field(default_factory=SolverOptions)
    threads: int | None = None

    def __post_init__(self):
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ValueError(f"unknown inference methods {sorted(bad)}")
        if "operator" in self.methods and self.operator is None:
            raise ValueError("operator inference requested without an operator network")
        ids = [et.task_id for et in self.tasks]
        if len(set(ids)) != len(ids):
            raise ValueError("evaluation task ids must be unique")


@dataclass
class EvalRow:
    task_id: int
    tag: str
    method: str
    true_objective: float
    predicted_objective: float
    control_cost: float
    obstacle_cost: float
    terminal_cost: float
    terminal_deviation: float
    oracle_control_cost: float
    oracle_obstacle_cost: float
    oracle_terminal_deviation: float
    n_rollouts: int
    n_diverged: int = 0
    oracle_unconverged: int = 0

    @property
    def gap(self) -> float:
        return self.predicted_objective - self.true_objective

    @property
    def ratio(self) -> float:
        return self.predicted_objective / self.true_objective


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    # keys: (task_id, method) and (task_id, "oracle") -> states (n_init, N+1, n)
    trajectories: dict = field(default_factory=dict)
    tasks: dict = field(default_factory=dict)  # task_id -> TaskSpec
    problem: str = ""

    def select(self, tag=None, method=None) -> list[EvalRow]:
        return [
            r for r in self.rows
            if (tag is None or r.tag == tag) and (method is None or r.method == method)
        ]

    def mean(self, column: str, tag=None, method=None) -> float:
        rows = self.select(tag, method)
        return float(np.mean([getattr(r, column) for r in rows])) if rows else float("nan")

    def groups(self) -> list[tuple[str, str]]:
        seen = []
        for r in self.rows:
            if (r.tag, r.method) not in seen:
                seen.append((r.tag, r.method))
        return seen

    def aggregate(self) -> list[dict]:
        out = []
        for tag, method in self.groups():
            out.append({
                "tag": tag,
                "method": method,
                "true_objective": self.mean("true_objective", tag, method),
                "predicted_objective": self.mean("predicted_objective", tag, method),
                "control_cost": self.mean("control_cost", tag, method),
                "obstacle_cost": self.mean("obstacle_cost", tag, method),
                "terminal_deviation": self.mean("terminal_deviation", tag, method),
                "oracle_control_cost": self.mean("oracle_control_cost", tag, method),
                "oracle_obstacle_cost": self.mean("oracle_obstacle_cost", tag, method),
                "oracle_terminal_deviation": self.mean("oracle_terminal_deviation", tag, method),
            })
        return out

    def dominance_violations(self, slack: float = 0.01) -> list[EvalRow]:
        """Rows where the FE policy beats the oracle by more than ``slack``."""
        return [r for r in self.rows if r.predicted_objective < r.true_objective * (1.0 - slack)]


def _terms(problem, task, states, controls):
    """Per-rollout (control, state, terminal) costs and terminal deviation."""
    seq = [states[:, k] for k in range(states.shape[1])]
    c, s, g = cost_terms(problem, task, seq, controls)
    y = np.asarray(task.target)
    pos = list(problem.position_dims)
    dev = np.linalg.norm(states[:, -1, pos] - y[pos], axis=-1)
    return np.asarray(c), np.asarray(s), np.asarray(g), dev


def rollout_policy(basis: BasisSet, c, problem: ControlProblem, x0, task: TaskSpec | None = None) -> Trajectory:
    """Closed-loop rollout of ``u = sum_j c_j phi_j(x, t)``.

    With a ``task`` the realized discretized objective is recorded.
    """
    traj = rk4_rollout(problem, x0, policy_fn(basis, c))
    if task is not None:
        states = traj.states if traj.states.ndim == 3 else traj.states[None]
        controls = traj.controls if traj.controls.ndim == 3 else traj.controls[None]
        cc, ss, gg, _ = _terms(problem, task, states, controls)
        J = cc + ss + gg
        traj.objective = J if traj.states.ndim == 3 else float(J[0])
    return traj


def _rollouts(problem, basis, c, x0):
    """Batched rollout; rows that blow up come back as ``None``."""
    try:
        tr = rk4_rollout(problem, x0, policy_fn(basis, c))
        return list(tr.states), list(tr.controls)
    except NonFiniteState:
        states, controls = [], []
        for x in x0:
            try:
                tr = rk4_rollout(problem, x, policy_fn(basis, c))
                states.append(tr.states)
                controls.append(tr.controls)
            except NonFiniteState:
                states.append(None)
                controls.append(None)
        return states, controls


def evaluate_plan(plan: EvalPlan) -> EvalReport:
    """Infer coefficients per task, roll out, and compare with the oracle.

    Every task draws its initial states from ``(seed, task_id, 0)`` and its
    LS inference data from ``(seed, task_id, 1)``, so reports are
    reproducible and independent of task order.
    """
    problem, basis = plan.problem, plan.basis
    report = EvalReport(problem=problem.name)
    if not plan.tasks:
        return report
    N = problem.n_steps
    specs = [et.task for et in plan.tasks]
    x0s = [sample_initial_states(problem, plan.n_init, [plan.seed, et.task_id, 0]) for et in plan.tasks]

    oracle = solve_batch(
        problem, [t for t in specs for _ in range(plan.n_init)], np.concatenate(x0s), plan.solver
    )
    coeffs: dict = {}
    if "ls" in plan.methods:
        ls_x0 = [
            sample_initial_states(problem, plan.budget, [plan.seed, et.task_id, 1]) for et in plan.tasks
        ]
        ls_trajs = solve_batch(
            problem, [t for t in specs for _ in range(plan.budget)], np.concatenate(ls_x0), plan.solver
        )
        for i, et in enumerate(plan.tasks):
            chunk = ls_trajs[i * plan.budget : (i + 1) * plan.budget]
            ds = trajectories_to_dataset(problem, et.task, chunk)
            coeffs[(et.task_id, "ls")] = infer_coefficients_ls(basis, ds, plan.lambda_tik).c
    if "operator" in plan.methods:
        for et in plan.tasks:
            coeffs[(et.task_id, "operator")] = operator_infer(plan.operator, et.task, basis).c

    jobs = [(i, et, method) for i, et in enumerate(plan.tasks) for method in plan.methods]

    def run(job):
        i, et, method = job
        return _rollouts(problem, basis, coeffs[(et.task_id, method)], x0s[i])

    threads = plan.threads or int(os.environ.get("FEPOLICY_THREADS", "1"))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    zero_u = np.zeros((plan.n_init, N, problem.control_dim))
    for (i, et, method), (states, controls) in zip(jobs, results):
        orc = oracle[i * plan.n_init : (i + 1) * plan.n_init]
        o_states = np.stack([tr.states for tr in orc])
        o_c, o_s, o_g, o_dev = _terms(problem, et.task, o_states, np.stack([tr.controls for tr in orc]))
        diverged = [k for k, s in enumerate(states) if s is None]
        if diverged:
            log.warning("task %d (%s): %d rollouts diverged", et.task_id, method, len(diverged))
            # pessimistic imputation: a diverged rollout scores as doing nothing
            base = rk4_rollout(problem, x0s[i], lambda x, t: np.zeros(problem.control_dim))
            for k in diverged:
                states[k], controls[k] = base.states[k], zero_u[k]
        states, controls = np.stack(states), np.stack(controls)
        c, s, g, dev = _terms(problem, et.task, states, controls)
        report.rows.append(EvalRow(
            task_id=et.task_id,
            tag=et.tag,
            method=method,
            true_objective=float(np.mean(o_c + o_s + o_g)),
            predicted_objective=float(np.mean(c + s + g)),
            control_cost=float(np.mean(c)),
            obstacle_cost=float(np.mean(s)),
            terminal_cost=float(np.mean(g)),
            terminal_deviation=float(np.mean(dev)),
            oracle_control_cost=float(np.mean(o_c)),
            oracle_obstacle_cost=float(np.mean(o_s)),
            oracle_terminal_deviation=float(np.mean(o_dev)),
            n_rollouts=plan.n_init,
            n_diverged=len(diverged),
            oracle_unconverged=sum(not tr.converged for tr in orc),
        ))
        report.trajectories[(et.task_id, method)] = states
        report.trajectories[(et.task_id, "oracle")] = o_states
        report.tasks[et.task_id] = et.task
    return report


def worst_case_select(report: EvalReport, k: int, method: str | None = None) -> list[int]:
    """Task ids with the largest predicted-minus-true gap, ties by task id."""
    rows = report.select(method=method)
    if not rows:
        raise ValueError("report has no rows")
    best: dict[int, float] = {}
    for r in rows:
        best[r.task_id] = max(best.get(r.task_id, -np.inf), r.gap)
    order = sorted(best, key=lambda tid: (-best[tid], tid))
    return order[:k]


CSV_FIELDS = [f for f in EvalRow.__dataclass_fields__]


def write_csv(report: EvalReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for r in report.rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in asdict(r).items()})
    return path


def read_csv(path) -> list[EvalRow]:
    rows = []
    with Path(path).open() as fh:
        for rec in csv.DictReader(fh):
            kw = {}
            for name, fld in EvalRow.__dataclass_fields__.items():
                val = rec[name]
                kw[name] = int(val) if fld.type == "int" else (val if fld.type == "str" else float(val))
            rows.append(EvalRow(**kw))
    return rows


def format_table(report: EvalReport) -> str:
    head = f"{'evaluation':<16}{'method':<10}{'true obj':>12}{'pred obj':>12}{'ratio':>8}{'ctrl':>10}{'obst':>10}{'term dev':>10}"
    lines = [head, "-" * len(head)]
    for agg in report.aggregate():
        ratio = agg["predicted_objective"] / agg["true_objective"]
        lines.append(
            f"{agg['tag']:<16}{agg['method']:<10}{agg['true_objective']:>12.4f}"
            f"{agg['predicted_objective']:>12.4f}{ratio:>8.4f}{agg['control_cost']:>10.4f}"
            f"{agg['obstacle_cost']:>10.4f}{agg['terminal_deviation']:>10.5f}"
        )
    return "\n".join(lines)


def save_trajectories(report: EvalReport, path) -> Path:
    arrays = {f"{tid}__{name}": v for (tid, name), v in report.trajectories.items()}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **arrays)
    return path


def load_trajectories(path) -> dict:
    out = {}
    with np.load(path) as data:
        for key in data.files:
            tid, name = key.split("__", 1)
            out[(int(tid), name)] = data[key]
    return out


def save_report(report: EvalReport, out_dir) -> list[Path]:
    """``report.csv``, ``report.json`` (tasks + rows) and ``trajectories.npz``."""
    import json

    out_dir = Path(out_dir)
    csv_path = write_csv(report, out_dir / "report.csv")
    meta = {
        "problem": report.problem,
        "tasks": {str(tid): t.to_dict() for tid, t in sorted(report.tasks.items())},
        "rows": [asdict(r) for r in report.rows],
    }
    json_path = out_dir / "report.json"
    json_path.write_text(json.dumps(meta, indent=1, sort_keys=True))
    return [csv_path, json_path, save_trajectories(report, out_dir / "trajectories.npz")]


def load_report(out_dir) -> EvalReport:
    import json

    out_dir = Path(out_dir)
    meta = json.loads((out_dir / "report.json").read_text())
    traj_path = out_dir / "trajectories.npz"
    return EvalReport(
        rows=[EvalRow(**r) for r in meta["rows"]],
        trajectories=load_trajectories(traj_path) if traj_path.exists() else {},
        tasks={int(k): TaskSpec.from_dict(v) for k, v in meta["tasks"].items()},
        problem=meta["problem"],
    )
