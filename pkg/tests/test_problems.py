import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fepolicy.errors import DimensionMismatch, NonFiniteState
from fepolicy.problems import (
    ControlProblem,
    Obstacle,
    TaskSpec,
    bicycle_4d,
    dynamics_eval,
    get_problem,
    point_mass_2d,
    quadcopter_12d,
    rk4_rollout,
    running_cost,
    sample_initial_state,
    sample_initial_states,
    state_cost,
    terminal_cost,
)


@pytest.fixture(scope="module")
def pm():
    return point_mass_2d()


@pytest.fixture(scope="module")
def quad():
    return quadcopter_12d()


@pytest.fixture(scope="module")
def bike():
    return bicycle_4d()


def test_benchmark_shapes(pm, quad, bike):
    assert (pm.state_dim, pm.control_dim, pm.horizon, pm.n_steps) == (2, 2, 1.0, 20)
    assert (quad.state_dim, quad.control_dim, quad.horizon, quad.n_steps) == (12, 4, 2.0, 50)
    assert (bike.state_dim, bike.control_dim, bike.horizon) == (4, 2, 5.0)
    assert get_problem("bicycle4d").name == "Bicycle4D"
    with pytest.raises(KeyError):
        get_problem("cartpole")


def test_problem_validation():
    with pytest.raises(ValueError):
        ControlProblem("x", 1, 1, 0.0, 1, None, None, np.zeros(1), np.eye(1), 1.0)
    with pytest.raises(ValueError):
        ControlProblem("x", 1, 1, 1.0, 0, None, None, np.zeros(1), np.eye(1), 1.0)


# --- dynamics --------------------------------------------------------------


def test_point_mass_dynamics(pm):
    np.testing.assert_array_equal(dynamics_eval(pm, np.array([3.0, -4.0]), np.array([1.0, 2.0])), [1.0, 2.0])


def test_bicycle_zero_velocity(bike):
    out = dynamics_eval(bike, np.array([1.0, 2.0, 0.3, 0.0]), np.array([0.7, 0.5]))
    np.testing.assert_allclose(out, [0.0, 0.0, 0.0, 0.5], atol=0)


def test_bicycle_kinematics(bike):
    x = np.array([0.0, 0.0, 0.4, 2.0])
    out = dynamics_eval(bike, x, np.array([0.2, -1.0]))
    np.testing.assert_allclose(out, [2 * np.cos(0.4), 2 * np.sin(0.4), 2 / 0.5 * np.tan(0.2), -1.0], rtol=1e-15)


def test_quadcopter_hover(quad):
    out = dynamics_eval(quad, np.zeros(12), np.array([9.8, 0.0, 0.0, 0.0]))
    np.testing.assert_array_equal(out, np.zeros(12))


def test_quadcopter_tilted_thrust(quad):
    x = np.zeros(12)
    x[4] = 0.3  # theta
    x[6:9] = [1.0, 2.0, 3.0]
    out = dynamics_eval(quad, x, np.array([2.0, 0.1, 0.2, 0.3]))
    np.testing.assert_allclose(out[:3], [1.0, 2.0, 3.0])
    np.testing.assert_allclose(out[6:9], [2 * np.sin(0.3), 0.0, 2 * np.cos(0.3) - 9.8], atol=1e-15)
    np.testing.assert_allclose(out[9:], [0.1, 0.2, 0.3])


def test_dimension_mismatch(pm, bike):
    with pytest.raises(DimensionMismatch):
        dynamics_eval(pm, np.zeros(3), np.zeros(2))
    with pytest.raises(DimensionMismatch):
        running_cost(bike, bike.make_obstacle_task([Obstacle(30, (2, 2), 0.5)]), np.zeros(4), np.zeros(3))


# --- costs -----------------------------------------------------------------


def test_running_cost_values(pm, quad, bike):
    y = pm.make_target_task((1.0, 1.0))
    assert running_cost(pm, y, np.zeros(2), np.zeros(2)) == pytest.approx(50.0)
    assert running_cost(quad, quad.make_target_task((1, 1, 1)), np.zeros(12), np.array([2.0, 0, 0, 0])) == 2.0
    task = bike.make_obstacle_task([Obstacle(30.0, (2.0, 2.0), 0.5)])
    assert running_cost(bike, task, np.array([2.0, 2.0, 0.1, 0.3]), np.zeros(2)) == pytest.approx(30.0)


def test_terminal_cost_values(pm, quad):
    y = pm.make_target_task((1.0, 2.0))
    assert terminal_cost(pm, y, np.array([1.0, 2.0])) == 0.0
    assert terminal_cost(pm, y, np.array([2.0, 2.0])) == pytest.approx(50.0)
    yq = quad.make_target_task((1.0, 1.0, 1.0))
    xT = np.array(yq.target)
    xT[0] += 0.1
    assert terminal_cost(quad, yq, xT) == pytest.approx(5.0)


def test_double_obstacle_with_zero_amplitude_matches_single(bike):
    a = Obstacle(40.0, (2.0, 3.0), 0.7)
    single = bike.make_obstacle_task([a])
    double = bike.make_obstacle_task([a, Obstacle(0.0, (1.0, 1.0), 0.3)])
    xs = np.random.default_rng(0).uniform(0, 5, size=(50, 4))
    np.testing.assert_array_equal(state_cost(bike, single, xs), state_cost(bike, double, xs))


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-10, 10), min_size=4, max_size=4),
    st.lists(st.floats(-10, 10), min_size=2, max_size=2),
)
def test_costs_nonnegative(x, u):
    bike = bicycle_4d()
    task = bike.make_obstacle_task([Obstacle(50.0, (1.0, 4.0), 0.3), Obstacle(30.0, (3.0, 2.0), 0.5)])
    assert running_cost(bike, task, np.array(x), np.array(u)) >= 0
    assert terminal_cost(bike, task, np.array(x)) >= 0


def test_task_validation():
    with pytest.raises(ValueError):
        TaskSpec("Target", (0.0, 0.0), (Obstacle(1.0, (0, 0), 1.0),))
    with pytest.raises(ValueError):
        TaskSpec("DoubleObstacle", (0.0,) * 4, (Obstacle(1.0, (0, 0), 1.0),))
    with pytest.raises(ValueError):
        Obstacle(1.0, (0.0, 0.0), 0.0)
    spec = TaskSpec("SingleObstacle", (5, 5, 0.7, 0), (Obstacle(30.0, (2.0, 2.0), 0.5),))
    assert TaskSpec.from_dict(spec.to_dict()) == spec


# --- integrator ------------------------------------------------------------


def test_constant_control_point_mass(pm):
    tr = rk4_rollout(pm, np.zeros(2), lambda x, t: np.array([1.0, 0.0]))
    np.testing.assert_allclose(tr.states[-1], [1.0, 0.0], rtol=0, atol=1e-14)
    assert tr.states.shape == (21, 2) and tr.controls.shape == (20, 2)
    np.testing.assert_allclose(tr.times, np.linspace(0, 1, 21))


def test_bicycle_straight_line(bike):
    tr = rk4_rollout(bike, np.array([0.0, 0.0, np.pi / 4, 1.0]), lambda x, t: np.zeros(2))
    s = 5.0 / np.sqrt(2.0)
    np.testing.assert_allclose(tr.states[-1], [s, s, np.pi / 4, 1.0], atol=1e-10)


def _exp_problem(n_steps):
    return ControlProblem(
        "Exp", 1, 1, 1.0, n_steps, lambda x, u, t: x, lambda x, task: 0.0 * x[..., 0],
        np.zeros(1), np.eye(1), 0.0,
    )


def test_rk4_exponential():
    tr = rk4_rollout(_exp_problem(20), np.array([1.0]), lambda x, t: np.zeros(1))
    h = 1 / 20
    # classical RK4 on x' = x multiplies by the degree-4 Taylor polynomial of e^h per step
    exact_rk4 = (1 + h + h**2 / 2 + h**3 / 6 + h**4 / 24) ** 20
    assert abs(tr.states[-1, 0] - exact_rk4) < 1e-14
    # global truncation error ~ e h^4 / 120 = 1.4e-7 at 20 steps
    assert abs(tr.states[-1, 0] - np.e) < 1.5e-7


def test_rk4_order_four():
    steps = np.array([5, 10, 20, 40])
    errs = [abs(rk4_rollout(_exp_problem(n), np.array([1.0]), lambda x, t: np.zeros(1)).states[-1, 0] - np.e) for n in steps]
    slope = -np.polyfit(np.log(steps), np.log(errs), 1)[0]
    assert slope >= 3.8


def test_quadcopter_hover_fixed_point(quad):
    x0 = np.zeros(12)
    x0[:3] = [1.0, -2.0, 3.0]
    tr = rk4_rollout(quad, x0, lambda x, t: np.array([9.8, 0.0, 0.0, 0.0]))
    np.testing.assert_array_equal(tr.states, np.broadcast_to(x0, tr.states.shape))


def test_rollout_batched_matches_single(bike):
    x0 = sample_initial_states(bike, 3, 0)

    def fn(x, t):
        return np.stack([0.1 * np.sin(x[..., 0] + t), 0.2 - 0.05 * x[..., 3]], axis=-1)

    batch = rk4_rollout(bike, x0, fn)
    for i in range(3):
        np.testing.assert_allclose(batch.states[i], rk4_rollout(bike, x0[i], fn).states, rtol=0, atol=1e-14)


def test_rollout_nonfinite(pm):
    with pytest.raises(NonFiniteState):
        rk4_rollout(pm, np.zeros(2), lambda x, t: np.full(2, np.inf))


# --- sampling --------------------------------------------------------------


def test_point_mass_sampling_mean(pm):
    xs = sample_initial_states(pm, 100_000, 0)
    np.testing.assert_allclose(xs.mean(axis=0), [-1.5, -1.5], atol=0.02)
    np.testing.assert_allclose(xs.var(axis=0), [0.4, 0.4], rtol=0.02)


def test_bicycle_sampling_fixed_components(bike):
    xs = sample_initial_states(bike, 200, 3)
    assert np.all(xs[:, 2] == np.pi / 4) and np.all(xs[:, 3] == 0.0)


def test_quadcopter_sampling(quad):
    xs = sample_initial_states(quad, 50_000, 1)
    np.testing.assert_allclose(xs[:, :3].mean(axis=0), [-2, -2, -2], atol=0.02)
    np.testing.assert_allclose(xs[:, :3].std(axis=0), [0.5] * 3, rtol=0.02)
    assert not xs[:, 3:].any()


def test_sampling_deterministic(pm):
    assert sample_initial_state(pm, 42).tobytes() == sample_initial_state(pm, 42).tobytes()
    assert not np.array_equal(sample_initial_state(pm, 42), sample_initial_state(pm, 43))
