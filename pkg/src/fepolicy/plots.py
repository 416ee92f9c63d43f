"""Deterministic, dependency-free SVG plots of rollouts over obstacle fields."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .problems import ControlProblem, TaskSpec, get_problem

RING_LEVELS = (0.75, 0.5, 0.25, 0.1)
PANEL = 360
MARGIN = 36
ORACLE_STYLE = 'fill="none" stroke="#444444" stroke-width="1.2" stroke-opacity="0.7"'
FE_STYLE = 'fill="none" stroke="#1f6fd1" stroke-width="1.2" stroke-opacity="0.8" stroke-dasharray="5,3"'


def obstacle_bumps(problem: ControlProblem, task: TaskSpec | None) -> list[tuple[float, tuple, float]]:
    """(amplitude, center, width) of every Gaussian bump in the state cost."""
    if problem.name == "PointMass2D":
        # 50 exp(-1.25 |x|^2) is a Gaussian with width sqrt(0.4)
        return [(50.0, (0.0, 0.0), float(np.sqrt(0.4)))] if problem.meta.get("obstacle", True) else []
    if task is None:
        return []
    return [(o.amplitude, tuple(o.center), o.width) for o in task.obstacles if o.amplitude > 0]


def _fmt(v: float) -> str:
    return f"{v:.2f}"


class _Frame:
    def __init__(self, lo, hi, x_off):
        span = max(hi[0] - lo[0], hi[1] - lo[1])
        self.lo, self.scale, self.x_off = lo, (PANEL - 2 * MARGIN) / span, x_off

    def __call__(self, x, y):
        px = self.x_off + MARGIN + (x - self.lo[0]) * self.scale
        py = PANEL - MARGIN - (y - self.lo[1]) * self.scale
        return px, py


def _bounds(points: list[np.ndarray], bumps, targets):
    pts = [p.reshape(-1, 2) for p in points if p.size]
    for amp, c, w in bumps:
        r = w * np.sqrt(2 * np.log(1 / RING_LEVELS[-1]))
        pts.append(np.array([[c[0] - r, c[1] - r], [c[0] + r, c[1] + r]]))
    pts.extend(np.asarray(t, dtype=float).reshape(1, 2) for t in targets)
    if not pts:
        return np.array([-1.0, -1.0]), np.array([1.0, 1.0])
    allp = np.concatenate(pts)
    lo, hi = allp.min(axis=0), allp.max(axis=0)
    pad = 0.05 * max(float(np.max(hi - lo)), 1e-6)
    return lo - pad, hi + pad


def _panel(frame: _Frame, title, bumps, targets, paths, style, lo, hi) -> list[str]:
    out = []
    x0, y0 = frame(lo[0], lo[1])
    x1, y1 = frame(hi[0], hi[1])
    out.append(
        f'<rect x="{_fmt(min(x0, x1))}" y="{_fmt(min(y0, y1))}" width="{_fmt(abs(x1 - x0))}" '
        f'height="{_fmt(abs(y1 - y0))}" fill="none" stroke="#000000" stroke-width="0.8"/>'
    )
    out.append(f'<text x="{_fmt(frame.x_off + PANEL / 2)}" y="20" text-anchor="middle" font-size="13">{title}</text>')
    for tick, (a, b) in (("x", (lo[0], hi[0])), ("y", (lo[1], hi[1]))):
        for val in (a, b):
            px, py = frame(val, lo[1]) if tick == "x" else frame(lo[0], val)
            tx, ty = (px, py + 14) if tick == "x" else (px - 4, py + 4)
            anchor = "middle" if tick == "x" else "end"
            out.append(f'<text x="{_fmt(tx)}" y="{_fmt(ty)}" text-anchor="{anchor}" font-size="9">{val:.2f}</text>')
    for amp, c, w in bumps:
        cx, cy = frame(c[0], c[1])
        for level in RING_LEVELS:
            r = w * np.sqrt(2 * np.log(1 / level)) * frame.scale
            out.append(
                f'<circle cx="{_fmt(cx)}" cy="{_fmt(cy)}" r="{_fmt(r)}" fill="#d62728" '
                f'fill-opacity="{0.08:.2f}" stroke="#d62728" stroke-width="0.6"/>'
            )
    for path in paths:
        pts = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in (frame(x, y) for x, y in path))
        out.append(f"<polyline points=\"{pts}\" {style}/>")
    for t in targets:
        tx, ty = frame(t[0], t[1])
        out.append(
            f'<path d="M{_fmt(tx - 5)},{_fmt(ty - 5)}L{_fmt(tx + 5)},{_fmt(ty + 5)}'
            f'M{_fmt(tx - 5)},{_fmt(ty + 5)}L{_fmt(tx + 5)},{_fmt(ty - 5)}" stroke="#2ca02c" stroke-width="2"/>'
        )
    return out


def svg_plot(
    problem: ControlProblem,
    tasks: Sequence[TaskSpec],
    oracle_states: Sequence[np.ndarray] = (),
    fe_states: Sequence[np.ndarray] = (),
    title: str = "",
) -> str:
    """Two panels, oracle left and FE rollouts right, on a shared frame.

    State arrays are (..., N+1, n); the first two position components are drawn.
    """
    dims = list(problem.position_dims[:2])
    oracle = [np.asarray(s)[..., dims].reshape(-1, np.shape(s)[-2], 2) for s in oracle_states]
    fe = [np.asarray(s)[..., dims].reshape(-1, np.shape(s)[-2], 2) for s in fe_states]
    bumps = []
    for task in tasks or [None]:
        for b in obstacle_bumps(problem, task):
            if b not in bumps:
                bumps.append(b)
    targets = sorted({tuple(float(v) for v in np.asarray(t.target)[dims]) for t in tasks})
    lo, hi = _bounds(oracle + fe, bumps, targets)
    left, right = _Frame(lo, hi, 0), _Frame(lo, hi, PANEL)
    o_paths = [p for group in oracle for p in group]
    f_paths = [p for group in fe for p in group]
    body = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{2 * PANEL}" height="{PANEL}" '
        f'viewBox="0 0 {2 * PANEL} {PANEL}" font-family="sans-serif">',
        f"<title>{title}</title>",
        '<rect width="100%" height="100%" fill="#ffffff"/>',
    ]
    body += _panel(left, f"oracle {title}".strip(), bumps, targets, o_paths, ORACLE_STYLE, lo, hi)
    body += _panel(right, f"FE policy {title}".strip(), bumps, targets, f_paths, FE_STYLE, lo, hi)
    body.append("</svg>")
    return "\n".join(body) + "\n"


def emit_svg_plots(report, trajectories: dict | None, out_dir) -> list[Path]:
    """One SVG per (tag, method) group of an :class:`EvalReport`.

    ``trajectories`` maps ``(task_id, method)`` and ``(task_id, "oracle")``
    to state arrays; missing entries are simply not drawn.
    """
    trajectories = report.trajectories if trajectories is None else trajectories
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    problem = get_problem(report.problem)
    files = []
    for tag, method in report.groups():
        rows = sorted(report.select(tag, method), key=lambda r: r.task_id)
        tasks = [report.tasks[r.task_id] for r in rows if r.task_id in report.tasks]
        oracle = [trajectories[(r.task_id, "oracle")] for r in rows if (r.task_id, "oracle") in trajectories]
        fe = [trajectories[(r.task_id, method)] for r in rows if (r.task_id, method) in trajectories]
        path = out_dir / f"{problem.name}_{tag}_{method}.svg"
        path.write_text(svg_plot(problem, tasks, oracle, fe, f"{tag} / {method}"))
        files.append(path)
    return files
