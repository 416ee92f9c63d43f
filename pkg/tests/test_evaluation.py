import numpy as np
import pytest

from fepolicy.encoder import CoefficientVector, FeTrainConfig, fe_train
from fepolicy.evaluation import (
    EvalPlan,
    EvalReport,
    EvalRow,
    EvalTask,
    evaluate_plan,
    format_table,
    load_report,
    read_csv,
    rollout_policy,
    save_report,
    worst_case_select,
    write_csv,
)
from fepolicy.operator import OperatorTrainConfig, operator_train
from fepolicy.plots import emit_svg_plots, svg_plot
from fepolicy.problems import Obstacle, bicycle_4d, point_mass_2d, rk4_rollout
from fepolicy.trajopt import generate_datasets


@pytest.fixture(scope="module")
def pm():
    return point_mass_2d()


@pytest.fixture(scope="module")
def trained(pm):
    tasks = [pm.make_target_task((a, b)) for a in (1.0, 2.0) for b in (1.0, 2.0)]
    ds = generate_datasets(pm, tasks, 6, [[0, i] for i in range(4)])
    basis, _ = fe_train(ds, FeTrainConfig(p=8, hidden=(32, 32), steps=300, alpha=3e-3))
    net = operator_train(basis, [(d.task, d) for d in ds], OperatorTrainConfig(steps=200, hidden=(16,))).net
    return basis, net


@pytest.fixture(scope="module")
def report(pm, trained):
    basis, net = trained
    tasks = [
        EvalTask(0, pm.make_target_task((1.0, 1.0)), "seen"),
        EvalTask(1, pm.make_target_task((1.5, 1.5)), "interpolation"),
        EvalTask(2, pm.make_target_task((2.5, 2.0)), "extrapolation"),
    ]
    plan = EvalPlan(pm, basis, tasks, ("ls", "operator"), net, n_init=3, seed=4, budget=2)
    return plan, evaluate_plan(plan)


def row(tid, gap, tag="seen"):
    return EvalRow(tid, tag, "ls", 1.0, 1.0 + gap, 0, 0, 0, 0, 0, 0, 0, 1)


def test_zero_coefficients_equal_zero_control(pm, trained):
    basis, _ = trained
    x0 = np.array([-1.2, -1.7])
    a = rollout_policy(basis, np.zeros(basis.p), pm, x0, pm.make_target_task((1, 1)))
    b = rk4_rollout(pm, x0, lambda x, t: np.zeros(2))
    np.testing.assert_array_equal(a.states, b.states)
    assert np.isfinite(a.objective)


def test_rollout_deterministic(pm, trained):
    basis, _ = trained
    c = np.random.default_rng(0).standard_normal(basis.p)
    x0 = np.array([[-1.2, -1.7], [-1.0, -2.0]])
    a, b = rollout_policy(basis, c, pm, x0), rollout_policy(basis, c, pm, x0)
    assert a.states.tobytes() == b.states.tobytes()


def test_report_structure(report):
    plan, rep = report
    assert len(rep.rows) == 6
    assert rep.groups() == [
        ("seen", "ls"), ("seen", "operator"), ("interpolation", "ls"),
        ("interpolation", "operator"), ("extrapolation", "ls"), ("extrapolation", "operator"),
    ]
    for r in rep.rows:
        assert r.n_rollouts == 3
        vals = [r.true_objective, r.predicted_objective, r.control_cost, r.obstacle_cost, r.terminal_deviation]
        assert np.all(np.isfinite(vals))
        assert rep.trajectories[(r.task_id, r.method)].shape == (3, 21, 2)
    table = format_table(rep)
    assert "extrapolation" in table and "operator" in table


def test_decomposition_identity(report):
    _, rep = report
    for r in rep.rows:
        assert abs(r.control_cost + r.obstacle_cost + r.terminal_cost - r.predicted_objective) <= 1e-10


def test_metric_definitions(pm, report):
    plan, rep = report
    r = rep.select("seen", "ls")[0]
    states = rep.trajectories[(0, "ls")]
    dev = np.linalg.norm(states[:, -1] - np.array([1.0, 1.0]), axis=1).mean()
    assert r.terminal_deviation == pytest.approx(dev, rel=1e-12)
    q = 50 * np.exp(-1.25 * np.sum(states[:, :-1] ** 2, axis=-1))
    assert r.obstacle_cost == pytest.approx(np.mean(q.sum(axis=1) * pm.dt), rel=1e-12)


def test_true_objective_shared_between_methods(report):
    _, rep = report
    for tid in range(3):
        a, b = [r for r in rep.rows if r.task_id == tid]
        assert a.true_objective == b.true_objective


def test_bit_reproducible(report):
    plan, rep = report
    again = evaluate_plan(plan)
    assert again.rows == rep.rows


def test_task_order_does_not_change_rows(report):
    plan, rep = report
    import dataclasses

    flipped = dataclasses.replace(plan, tasks=list(reversed(plan.tasks)))
    again = evaluate_plan(flipped)
    key = lambda r: (r.task_id, r.method)
    assert sorted(again.rows, key=key) == sorted(rep.rows, key=key)


def test_threaded_matches_serial(report):
    import dataclasses

    plan, rep = report
    assert evaluate_plan(dataclasses.replace(plan, threads=3)).rows == rep.rows


def test_empty_plan(pm, trained):
    rep = evaluate_plan(EvalPlan(pm, trained[0], []))
    assert rep.rows == []


def test_plan_validation(pm, trained):
    with pytest.raises(ValueError):
        EvalPlan(pm, trained[0], [], ("operator",))
    with pytest.raises(ValueError):
        EvalPlan(pm, trained[0], [], ("mystery",))
    dup = [EvalTask(3, pm.make_target_task((1, 1))), EvalTask(3, pm.make_target_task((2, 2)))]
    with pytest.raises(ValueError, match="unique"):
        EvalPlan(pm, trained[0], dup)


def test_diverged_rollouts_imputed(pm, trained, monkeypatch):
    import fepolicy.evaluation as ev

    basis, _ = trained
    plan = EvalPlan(pm, basis, [EvalTask(0, pm.make_target_task((1, 1)))], n_init=2, seed=0)
    monkeypatch.setattr(ev, "infer_coefficients_ls", lambda b, d, lam: CoefficientVector(np.full(b.p, 1e308)))
    rep = evaluate_plan(plan)
    (r,) = rep.rows
    assert r.n_diverged == 2
    x0 = ev.sample_initial_states(pm, 2, [0, 0, 0])
    zero = rollout_policy(basis, np.zeros(basis.p), pm, x0, pm.make_target_task((1, 1)))
    assert r.predicted_objective == pytest.approx(float(np.mean(zero.objective)), rel=1e-12)


def test_worst_case_select():
    rep = EvalReport(rows=[row(0, 0.1), row(1, 0.9), row(2, 0.5)])
    assert worst_case_select(rep, 1) == [1]
    assert worst_case_select(rep, 2) == [1, 2]
    assert worst_case_select(rep, 10) == [1, 2, 0]
    ties = EvalReport(rows=[row(3, 0.2), row(1, 0.2), row(2, 0.2)])
    assert worst_case_select(ties, 2) == [1, 2]
    with pytest.raises(ValueError):
        worst_case_select(EvalReport(), 1)


def test_dominance_violations():
    rep = EvalReport(rows=[row(0, -0.005), row(1, -0.02), row(2, 0.3)])
    assert [r.task_id for r in rep.dominance_violations()] == [1]


def test_csv_and_report_roundtrip(tmp_path, report):
    _, rep = report
    path = write_csv(rep, tmp_path / "r.csv")
    assert read_csv(path) == rep.rows
    save_report(rep, tmp_path / "eval")
    again = load_report(tmp_path / "eval")
    assert again.rows == rep.rows and again.tasks == rep.tasks
    for key, val in rep.trajectories.items():
        assert again.trajectories[key].tobytes() == val.tobytes()


# --- plots ------------------------------------------------------------------


def test_one_svg_per_group_and_deterministic(tmp_path, report):
    _, rep = report
    files = emit_svg_plots(rep, None, tmp_path / "a")
    assert len(files) == 6
    again = emit_svg_plots(rep, None, tmp_path / "b")
    for f, g in zip(files, again):
        assert f.read_bytes() == g.read_bytes()
    text = files[0].read_text()
    assert text.startswith("<svg") and text.count("<polyline") == 6
    assert 'stroke-dasharray' in text and "<circle" in text


def test_empty_trajectory_svg_has_axes_and_obstacle():
    bike = bicycle_4d()
    task = bike.make_obstacle_task([Obstacle(30.0, (2.0, 3.0), 0.5)])
    svg = svg_plot(bike, [task])
    assert "<polyline" not in svg
    assert svg.count("<circle") == 2 * 4  # both panels, four contour rings
    assert svg.count("<rect") == 3


def test_fan_of_256_rollouts(pm, trained):
    basis, _ = trained
    from fepolicy.problems import sample_initial_states

    x0 = sample_initial_states(pm, 256, 0)
    tr = rollout_policy(basis, np.ones(basis.p) * 0.1, pm, x0)
    svg = svg_plot(pm, [pm.make_target_task((1.5, 1.5))], [], [tr.states])
    assert svg.count("<polyline") == 256
