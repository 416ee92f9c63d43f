"""Command-line pipeline: datagen -> train-fe -> train-op -> eval -> plot.

All artifacts of a run live under one output directory next to an
append-only ``manifest.json``.  Configuration is YAML validated against the
schema below; unknown keys are rejected before any compute happens.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path
from typing import List, Literal, Optional, Tuple

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import __version__
from .encoder import FeTrainConfig, fe_train, infer_coefficients_ls, policy_fn
from .errors import ConfigError, FepolicyError
from .evaluation import EvalPlan, EvalTask, evaluate_plan, format_table, load_report, save_report
from .operator import OperatorTrainConfig, operator_infer, operator_train
from .persist import canonical_json, load_checkpoint, load_dataset, save_checkpoint, save_dataset
from .plots import emit_svg_plots
from .problems import Obstacle, TaskSpec, get_problem, rk4_rollout, sample_initial_states
from .trajopt import SolverOptions, cost_terms, generate_datasets

log = logging.getLogger("fepolicy")

SUBCOMMANDS = ("datagen", "train-fe", "train-op", "infer-ls", "infer-op", "rollout", "eval", "plot")


# ---------------------------------------------------------------------------
# config schema


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GridSpec(_Strict):
    low: List[float]
    high: List[float]
    counts: List[int]

    @model_validator(mode="after")
    def _same_len(self):
        if not (len(self.low) == len(self.high) == len(self.counts)):
            raise ValueError("low, high and counts must have equal length")
        if any(c < 1 for c in self.counts):
            raise ValueError("counts must be positive")
        return self


class ObstacleSpec(_Strict):
    amplitude: float = Field(ge=0)
    center: Tuple[float, float]
    width: float = Field(gt=0)


class RandomObstacles(_Strict):
    count: int = Field(ge=1)
    amplitude: List[float]
    center_low: Tuple[float, float]
    center_high: Tuple[float, float]
    width: List[float]
    per_task: int = Field(default=1, ge=1, le=2)
    seed: int = 0


class TaskGroup(_Strict):
    """Any mix of explicit targets, a target grid, and obstacle configs."""

    tag: str = "seen"
    targets: List[List[float]] = []
    grid: Optional[GridSpec] = None
    obstacles: List[List[ObstacleSpec]] = []
    random_obstacles: Optional[RandomObstacles] = None


class SolverSection(_Strict):
    method: Literal["lbfgs", "adam"] = "lbfgs"
    max_iters: int = Field(default=3000, ge=1)
    grad_tol: float = Field(default=1e-4, gt=0)
    lr: float = Field(default=0.05, gt=0)
    history: int = Field(default=60, ge=1)
    multistart: int = Field(default=1, ge=1)
    quadrature: Literal["left", "trapezoid"] = "left"


class DatagenSection(_Strict):
    n_traj: int = Field(default=40, ge=1)
    tasks: TaskGroup = TaskGroup()
    max_unconverged: float = Field(default=0.1, ge=0, le=1)


class FeSection(_Strict):
    p: int = Field(default=64, ge=1)
    hidden: List[int] = [128, 128, 128]
    activation: Literal["tanh", "relu", "gelu"] = "tanh"
    lambda_basis: float = Field(default=0.0, ge=0)
    lambda_tik: float = Field(default=1e-3, gt=0)
    alpha: float = Field(default=1e-3, gt=0)
    steps: int = Field(default=10_000, ge=1)
    batch: Optional[int] = Field(default=None, ge=1)
    batch_samples: int = Field(default=256, ge=1)


class OperatorSection(_Strict):
    beta: float = Field(default=1e-3, gt=0)
    steps: int = Field(default=5000, ge=1)
    hidden: List[int] = [64, 64, 64]
    activation: Literal["tanh", "relu", "gelu"] = "tanh"


class EvalSection(_Strict):
    basis: Optional[str] = None
    operator: Optional[str] = None
    methods: List[Literal["ls", "operator"]] = ["ls"]
    n_init: int = Field(default=10, ge=1)
    budget: int = Field(default=1, ge=1)
    lambda_tik: float = Field(default=1e-3, gt=0)
    groups: List[TaskGroup] = []


class ExperimentConfig(_Strict):
    problem: str = "PointMass2D"
    seed: int = 0
    out: str = "runs/default"
    solver: SolverSection = SolverSection()
    datagen: DatagenSection = DatagenSection()
    fe: FeSection = FeSection()
    operator: OperatorSection = OperatorSection()
    eval: EvalSection = EvalSection()

    @model_validator(mode="after")
    def _known_problem(self):
        try:
            get_problem(self.problem)
        except KeyError as exc:
            raise ValueError(f"unknown problem {self.problem!r}") from exc
        return self


def _format_validation(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        where = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{where}: {err['msg']}")
    return "\n".join(lines)


def load_config(path: str | None, overrides: dict) -> ExperimentConfig:
    """YAML file (optional) plus dotted-key overrides, validated."""
    raw: dict = {}
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"config: cannot read {path}: {exc}") from exc
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            where = f" line {mark.line + 1}" if mark else ""
            raise ConfigError(f"config:{where} invalid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config: top level must be a mapping")
    for dotted, value in overrides.items():
        node = raw
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node.setdefault(key, {})
        node[leaf] = value
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_format_validation(exc)) from exc


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_json(cfg.model_dump(mode="json"))).hexdigest()


# ---------------------------------------------------------------------------
# task construction


def build_tasks(problem, group: TaskGroup) -> list[TaskSpec]:
    tasks = [problem.make_target_task(t) for t in group.targets]
    if group.grid is not None:
        axes = [np.linspace(lo, hi, n) for lo, hi, n in zip(group.grid.low, group.grid.high, group.grid.counts)]
        mesh = np.meshgrid(*axes, indexing="ij")
        for coords in np.stack([m.ravel() for m in mesh], axis=1):
            tasks.append(problem.make_target_task(tuple(float(c) for c in coords)))
    for obs in group.obstacles:
        tasks.append(problem.make_obstacle_task([Obstacle(o.amplitude, tuple(o.center), o.width) for o in obs]))
    ro = group.random_obstacles
    if ro is not None:
        rng = np.random.default_rng(ro.seed)
        for _ in range(ro.count):
            obs = []
            for _ in range(ro.per_task):
                center = rng.uniform(ro.center_low, ro.center_high)
                obs.append(Obstacle(
                    float(rng.choice(ro.amplitude)),
                    (float(center[0]), float(center[1])),
                    float(rng.choice(ro.width)),
                ))
            tasks.append(problem.make_obstacle_task(obs))
    return tasks


def solver_options(cfg: ExperimentConfig) -> SolverOptions:
    return SolverOptions(seed=cfg.seed, **cfg.solver.model_dump())


# ---------------------------------------------------------------------------
# manifest


def _versions() -> dict:
    import pydantic

    return {
        "fepolicy": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "pydantic": pydantic.__version__,
        "pyyaml": yaml.__version__,
    }


def append_manifest(out: Path, command: str, cfg: ExperimentConfig, outputs: list[Path]):
    path = out / "manifest.json"
    entries = json.loads(path.read_text()) if path.exists() else []
    entries.append({
        "command": command,
        "config_hash": config_hash(cfg),
        "config": cfg.model_dump(mode="json"),
        "seed": cfg.seed,
        "versions": _versions(),
        "outputs": [str(Path(p).relative_to(out)) if Path(p).is_relative_to(out) else str(p) for p in outputs],
    })
    path.write_text(json.dumps(entries, indent=1, sort_keys=True))


# ---------------------------------------------------------------------------
# subcommands


def _datasets_dir(out: Path) -> Path:
    return out / "datasets"


def _load_datasets(out: Path):
    files = sorted(_datasets_dir(out).glob("task_*.feds"))
    if not files:
        raise ConfigError(f"datasets: no dataset files under {_datasets_dir(out)}; run datagen first")
    return [load_dataset(f) for f in files]


def cmd_datagen(cfg, args, out: Path) -> list[Path]:
    problem = get_problem(cfg.problem)
    tasks = build_tasks(problem, cfg.datagen.tasks)
    if not tasks:
        raise ConfigError("datagen.tasks: no tasks specified")
    seeds = [[cfg.seed, i] for i in range(len(tasks))]
    datasets = generate_datasets(
        problem, tasks, cfg.datagen.n_traj, seeds, solver_options(cfg), cfg.datagen.max_unconverged
    )
    files = []
    for i, ds in enumerate(datasets):
        files.append(save_dataset(ds, _datasets_dir(out) / f"task_{i:03d}.feds"))
    print(f"wrote {len(files)} datasets ({sum(ds.M for ds in datasets)} samples) to {_datasets_dir(out)}")
    return files


def cmd_train_fe(cfg, args, out: Path) -> list[Path]:
    datasets = _load_datasets(out)
    fe = cfg.fe
    conf = FeTrainConfig(
        p=fe.p, hidden=tuple(fe.hidden), activation=fe.activation, lambda_basis=fe.lambda_basis,
        lambda_tik=fe.lambda_tik, alpha=fe.alpha, steps=fe.steps, batch=fe.batch,
        batch_samples=fe.batch_samples, seed=cfg.seed,
    )
    basis, losses = fe_train(datasets, conf)
    prov = {"config_hash": config_hash(cfg), "seed": cfg.seed, "steps": fe.steps}
    path = save_checkpoint(basis, out / "basis.feck", prov)
    np.savetxt(out / "fe_loss.txt", losses)
    print(f"basis p={basis.p} trained for {fe.steps} steps; final loss {losses[-1]:.6g}")
    return [path, out / "fe_loss.txt"]


def _basis_path(cfg, out: Path) -> Path:
    path = Path(cfg.eval.basis) if cfg.eval.basis else out / "basis.feck"
    if not path.exists():
        raise ConfigError(f"eval.basis: basis checkpoint {path} not found (set eval.basis or --basis)")
    return path


def _operator_path(cfg, out: Path) -> Path:
    path = Path(cfg.eval.operator) if cfg.eval.operator else out / "operator.feck"
    if not path.exists():
        raise ConfigError(f"eval.operator: operator checkpoint {path} not found (set eval.operator or --operator)")
    return path


def cmd_train_op(cfg, args, out: Path) -> list[Path]:
    basis = load_checkpoint(_basis_path(cfg, out))
    datasets = _load_datasets(out)
    op = cfg.operator
    conf = OperatorTrainConfig(
        beta=op.beta, steps=op.steps, seed=cfg.seed, hidden=tuple(op.hidden),
        activation=op.activation, lambda_tik=cfg.fe.lambda_tik,
    )
    fit = operator_train(basis, [(ds.task, ds) for ds in datasets], conf)
    prov = {"config_hash": config_hash(cfg), "seed": cfg.seed, "steps": op.steps}
    path = save_checkpoint(fit.net, out / "operator.feck", prov)
    print(f"operator trained; final coefficient loss {fit.final_loss:.6g}")
    return [path]


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))
    return path


def cmd_infer_ls(cfg, args, out: Path) -> list[Path]:
    basis = load_checkpoint(_basis_path(cfg, out))
    if not args.dataset:
        raise ConfigError("dataset: --dataset is required for infer-ls")
    ds = load_dataset(args.dataset)
    if args.budget:
        ds = ds.first_trajectories(args.budget)
    cv = infer_coefficients_ls(basis, ds, cfg.eval.lambda_tik)
    path = _write_json(out / "coefficients_ls.json", {"c": cv.c.tolist(), "source": "LS", "task": ds.task.to_dict()})
    print(json.dumps(cv.c.tolist()))
    return [path]


def _target_task(problem, args) -> TaskSpec:
    if not args.target:
        raise ConfigError("target: --target is required")
    return problem.make_target_task([float(v) for v in args.target.split(",")])


def cmd_infer_op(cfg, args, out: Path) -> list[Path]:
    problem = get_problem(cfg.problem)
    net = load_checkpoint(_operator_path(cfg, out))
    basis = load_checkpoint(_basis_path(cfg, out))
    task = _target_task(problem, args)
    cv = operator_infer(net, task, basis)
    path = _write_json(out / "coefficients_op.json", {"c": cv.c.tolist(), "source": "Operator", "task": task.to_dict()})
    print(json.dumps(cv.c.tolist()))
    return [path]


def cmd_rollout(cfg, args, out: Path) -> list[Path]:
    problem = get_problem(cfg.problem)
    basis = load_checkpoint(_basis_path(cfg, out))
    if not args.coefficients:
        raise ConfigError("coefficients: --coefficients is required for rollout")
    rec = json.loads(Path(args.coefficients).read_text())
    task = TaskSpec.from_dict(rec["task"])
    x0 = sample_initial_states(problem, cfg.eval.n_init, [cfg.seed, 0])
    traj = rk4_rollout(problem, x0, policy_fn(basis, np.asarray(rec["c"])))
    seq = [traj.states[:, k] for k in range(traj.states.shape[1])]
    c, s, g = cost_terms(problem, task, seq, traj.controls)
    J = np.asarray(c) + np.asarray(s) + np.asarray(g)
    path = out / "rollout.npz"
    np.savez(path, states=traj.states, controls=traj.controls, objective=J)
    print(f"{len(J)} rollouts, mean objective {float(np.mean(J)):.6g}")
    return [path]


def _eval_tasks(problem, cfg) -> list[EvalTask]:
    tasks, tid = [], 0
    for group in cfg.eval.groups:
        for spec in build_tasks(problem, group):
            tasks.append(EvalTask(tid, spec, group.tag))
            tid += 1
    return tasks


def cmd_eval(cfg, args, out: Path) -> list[Path]:
    problem = get_problem(cfg.problem)
    basis = load_checkpoint(_basis_path(cfg, out))
    net = None
    if "operator" in cfg.eval.methods:
        net = load_checkpoint(_operator_path(cfg, out))
    plan = EvalPlan(
        problem, basis, _eval_tasks(problem, cfg), tuple(cfg.eval.methods), net,
        cfg.eval.n_init, cfg.seed, cfg.eval.budget, cfg.eval.lambda_tik, solver_options(cfg),
    )
    report = evaluate_plan(plan)
    files = save_report(report, out / "eval")
    table = format_table(report)
    (out / "eval" / "table.txt").write_text(table + "\n")
    files.append(out / "eval" / "table.txt")
    print(table)
    return files


def cmd_plot(cfg, args, out: Path) -> list[Path]:
    src = Path(args.report) if args.report else out / "eval"
    if not (src / "report.json").exists():
        raise ConfigError(f"report: no evaluation report under {src}; run eval first")
    report = load_report(src)
    files = emit_svg_plots(report, None, out / "plots")
    print(f"wrote {len(files)} plots to {out / 'plots'}")
    return files


COMMANDS = {
    "datagen": cmd_datagen,
    "train-fe": cmd_train_fe,
    "train-op": cmd_train_op,
    "infer-ls": cmd_infer_ls,
    "infer-op": cmd_infer_op,
    "rollout": cmd_rollout,
    "eval": cmd_eval,
    "plot": cmd_plot,
}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fepolicy", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="YAML experiment config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--problem")
        sp.add_argument("--p", type=int, help="number of basis functions")
        sp.add_argument("--steps", type=int, help="training steps")
        sp.add_argument("--method", choices=["ls", "operator"], action="append",
                        help="inference method for eval (repeatable)")
        sp.add_argument("--n-traj", type=int, dest="n_traj")
        sp.add_argument("--budget", type=int, help="LS inference trajectories per task")
        sp.add_argument("--basis", help="basis checkpoint")
        sp.add_argument("--operator", help="operator checkpoint")
        sp.add_argument("--dataset", help="dataset file (infer-ls)")
        sp.add_argument("--target", help="comma separated target coordinates (infer-op)")
        sp.add_argument("--coefficients", help="coefficient JSON (rollout)")
        sp.add_argument("--report", help="evaluation directory (plot)")
        sp.add_argument("-v", "--verbose", action="store_true")
    return parser


def _overrides(args) -> dict:
    ov = {}
    for key, dotted in (
        ("seed", "seed"), ("out", "out"), ("problem", "problem"), ("n_traj", "datagen.n_traj"),
        ("budget", "eval.budget"), ("basis", "eval.basis"), ("operator", "eval.operator"),
    ):
        val = getattr(args, key)
        if val is not None:
            ov[dotted] = val
    if args.p is not None:
        ov["fe.p"] = args.p
    if args.steps is not None:
        ov["operator.steps" if args.command == "train-op" else "fe.steps"] = args.steps
    if args.method:
        ov["eval.methods"] = list(dict.fromkeys(args.method))
    return ov


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        outputs = COMMANDS[args.command](cfg, args, out)
        append_manifest(out, args.command, cfg, outputs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FepolicyError, ValueError, OSError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
