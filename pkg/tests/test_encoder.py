import numpy as np
import pytest

from fepolicy.dataset import TaskDataset
from fepolicy.encoder import (
    BasisSet,
    CoefficientVector,
    FeTrainConfig,
    fe_train,
    gram_and_rhs,
    gram_from_values,
    infer_coefficients_ls,
    ls_objective,
    policy_eval,
    reconstruction_loss,
    solve_tikhonov,
)
from fepolicy.errors import DimensionMismatch, DivergedTraining, NotPositiveDefinite
from fepolicy.numerics.mlp import init_mlp
from fepolicy.problems import TaskSpec

N_STATE, N_CTRL = 2, 2
TASK = TaskSpec("Target", (1.0, 1.0))


def make_basis(p, seed=0, hidden=(16, 16), n=N_STATE, m=N_CTRL):
    params = init_mlp([n + 1, *hidden, p * m], p, m, "tanh", np.random.default_rng(seed))
    return BasisSet(params, n, m, "PointMass2D")


def random_dataset(M, seed=0, n=N_STATE, m=N_CTRL, u=None):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((M, n))
    t = rng.uniform(0, 1, M)
    if u is None:
        u = rng.standard_normal((M, m))
    return TaskDataset(TASK, x, t, u)


def in_span_dataset(basis, c, M, seed=0, noise=0.0):
    ds = random_dataset(M, seed)
    u = policy_eval(basis, np.asarray(c, dtype=float), ds.x, ds.t)
    u = u + noise * np.random.default_rng(seed + 1).standard_normal(u.shape)
    return TaskDataset(TASK, ds.x, ds.t, u)


# --- Gram / LS ---------------------------------------------------------------


def test_gram_orthonormal_point_basis():
    phi = np.array([[[1.0, 0.0], [0.0, 1.0]]])  # one sample, p = 2, m = 2
    G, r = gram_from_values(phi, np.array([[3.0, -1.0]]))
    np.testing.assert_array_equal(G, np.eye(2))
    np.testing.assert_array_equal(r, [3.0, -1.0])


def test_gram_duplicate_samples_invariant():
    basis = make_basis(5)
    ds = random_dataset(30)
    doubled = TaskDataset(TASK, np.tile(ds.x, (2, 1)), np.tile(ds.t, 2), np.tile(ds.u, (2, 1)))
    G1, r1 = gram_and_rhs(basis, ds)
    G2, r2 = gram_and_rhs(basis, doubled)
    np.testing.assert_allclose(G1, G2, rtol=1e-14, atol=1e-15)
    np.testing.assert_allclose(r1, r2, rtol=1e-14, atol=1e-15)


def test_gram_vs_double_loop():
    basis = make_basis(6, seed=3)
    ds = random_dataset(50, seed=4)
    G, r = gram_and_rhs(basis, ds)
    phi = basis.evaluate(ds.x, ds.t)
    p, M = basis.p, ds.M
    G_ref = np.zeros((p, p))
    r_ref = np.zeros(p)
    for j in range(p):
        for i in range(M):
            r_ref[j] += sum(ds.u[i, a] * phi[i, j, a] for a in range(N_CTRL)) / M
            for k in range(p):
                G_ref[j, k] += sum(phi[i, j, a] * phi[i, k, a] for a in range(N_CTRL)) / M
    assert np.max(np.abs(G - G_ref)) < 1e-12
    assert np.max(np.abs(r - r_ref)) < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_gram_symmetric_psd(seed):
    basis = make_basis(12, seed=seed)
    G, _ = gram_and_rhs(basis, random_dataset(7, seed=seed))  # rank-deficient: M * m < p
    assert np.array_equal(G, G.T)
    assert np.linalg.eigvalsh(G).min() >= -1e-10
    np.linalg.cholesky(G + 1e-6 * np.eye(12))


def test_in_span_recovery():
    basis = make_basis(4, seed=1)
    e1 = np.eye(4)[0]
    c = infer_coefficients_ls(basis, in_span_dataset(basis, e1, 400), 1e-10).c
    assert np.abs(c - e1).max() < 1e-4
    target = np.array([2.0, -1.0, 0.0, 0.0])
    c2 = infer_coefficients_ls(basis, in_span_dataset(basis, target, 400, seed=5), 1e-10).c
    assert np.abs(c2 - target).max() < 1e-4


def adjugate_inverse(A):
    a, b, c = A[0]
    d, e, f = A[1]
    g, h, i = A[2]
    adj = np.array([
        [e * i - f * h, -(b * i - c * h), b * f - c * e],
        [-(d * i - f * g), a * i - c * g, -(a * f - c * d)],
        [d * h - e * g, -(a * h - b * g), a * e - b * d],
    ])
    det = a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)
    return adj / det


def test_ls_vs_adjugate_oracle():
    basis = make_basis(3, seed=8)
    ds = in_span_dataset(basis, [0.5, -1.0, 2.0], 20, seed=9, noise=0.1)
    lam = 1e-3
    phi = basis.evaluate(ds.x, ds.t)
    G = sum(phi[i] @ phi[i].T for i in range(20)) / 20
    r = sum(phi[i] @ ds.u[i] for i in range(20)) / 20
    c_ref = adjugate_inverse(G + lam * np.eye(3)) @ r
    c = infer_coefficients_ls(basis, ds, lam).c
    assert np.abs(c - c_ref).max() < 1e-9


def test_ls_optimality_under_perturbation():
    basis = make_basis(8, seed=2)
    ds = random_dataset(60, seed=2)
    lam = 1e-3
    c = infer_coefficients_ls(basis, ds, lam).c
    base = ls_objective(basis, ds, c, lam)
    rng = np.random.default_rng(0)
    for _ in range(100):
        d = rng.standard_normal(8)
        d *= 1e-3 / np.linalg.norm(d)
        assert ls_objective(basis, ds, c + d, lam) >= base - 1e-12


def test_tikhonov_retry():
    G = np.diag([1.0, -0.005])
    c = solve_tikhonov(G, np.array([1.0, 1.0]), 1e-3)  # retried at 1e-2
    np.testing.assert_allclose(c, [1 / 1.01, 1 / 0.005])
    with pytest.raises(NotPositiveDefinite):
        solve_tikhonov(np.diag([1.0, -100.0]), np.ones(2), 1e-3)
    with pytest.raises(ValueError):
        infer_coefficients_ls(make_basis(2), random_dataset(5), 0.0)


# --- policy ------------------------------------------------------------------


def test_policy_zero_and_coordinate():
    basis = make_basis(5, seed=4)
    x, t = np.random.default_rng(0).standard_normal((9, 2)), np.linspace(0, 1, 9)
    np.testing.assert_array_equal(policy_eval(basis, np.zeros(5), x, t), np.zeros((9, 2)))
    phi = basis.evaluate(x, t)
    for j in range(5):
        np.testing.assert_allclose(policy_eval(basis, np.eye(5)[j], x, t), phi[:, j], rtol=0, atol=1e-15)


def test_policy_linear_in_coefficients():
    basis = make_basis(6, seed=5)
    rng = np.random.default_rng(1)
    x, t = rng.standard_normal((20, 2)), rng.uniform(0, 1, 20)
    c1, c2 = rng.standard_normal(6), rng.standard_normal(6)
    both = policy_eval(basis, c1 + c2, x, t)
    np.testing.assert_allclose(both, policy_eval(basis, c1, x, t) + policy_eval(basis, c2, x, t), rtol=0, atol=1e-12)
    np.testing.assert_allclose(policy_eval(basis, 3.5 * c1, x, t), 3.5 * policy_eval(basis, c1, x, t), rtol=1e-13, atol=1e-13)


def test_policy_dimension_checks():
    basis = make_basis(3)
    with pytest.raises(DimensionMismatch):
        policy_eval(basis, np.ones(4), np.zeros(2), 0.0)
    with pytest.raises(DimensionMismatch):
        policy_eval(basis, np.ones(3), np.zeros(3), 0.0)
    with pytest.raises(ValueError):
        CoefficientVector(np.array([np.nan]))


def test_basis_evaluation_deterministic():
    basis = make_basis(4)
    x = np.random.default_rng(0).standard_normal((3, 2))
    assert basis.evaluate(x, 0.3).tobytes() == basis.evaluate(x.copy(), 0.3).tobytes()
    assert basis.checksum() == make_basis(4).checksum()
    assert basis.checksum() != make_basis(4, seed=1).checksum()


# --- training ----------------------------------------------------------------


def teacher_tasks(n_tasks=6, M=200, seed=0):
    teacher = make_basis(4, seed=100, hidden=(8,))
    rng = np.random.default_rng(seed)
    return [in_span_dataset(teacher, rng.standard_normal(4), M, seed=k) for k in range(n_tasks)]


def test_fe_learns_teacher_span():
    datasets = teacher_tasks()
    cfg = FeTrainConfig(p=8, hidden=(32, 32), steps=5000, alpha=3e-3, batch_samples=128, lambda_tik=1e-6)
    basis, losses = fe_train(datasets, cfg)
    initial = reconstruction_loss(make_basis_like(basis, datasets, cfg), datasets, 1e-6)
    final = reconstruction_loss(basis, datasets, 1e-6)
    assert final < 0.01 * initial
    n = len(losses) // 10
    assert losses[-n:].mean() <= losses[:n].mean()


def make_basis_like(basis, datasets, cfg):
    """The untrained basis fe_train starts from (same seed, same normalization)."""
    trained0, _ = fe_train(datasets, FeTrainConfig(**{**cfg.__dict__, "steps": 0}))
    return trained0


def test_fe_single_task_single_basis():
    rng = np.random.default_rng(0)
    x = rng.normal(-1.5, 0.6, (300, 2))
    t = rng.uniform(0, 1, 300)
    u = np.stack([1.5 - x[:, 0] + 0.3 * t, 1.2 - x[:, 1]], axis=1)  # smooth feedback law
    ds = TaskDataset(TASK, x, t, u)
    basis, _ = fe_train([ds], FeTrainConfig(p=1, hidden=(32, 32), steps=2000, alpha=3e-3))
    c = infer_coefficients_ls(basis, ds, 1e-6).c
    pred = policy_eval(basis, c, x, t)
    assert np.linalg.norm(pred - u) / np.linalg.norm(u) < 0.05


def test_fe_training_deterministic_and_detach_option():
    datasets = teacher_tasks(3, 60)
    cfg = FeTrainConfig(p=4, hidden=(8,), steps=20, batch_samples=32, batch=2)
    a, la = fe_train(datasets, cfg)
    b, lb = fe_train(datasets, cfg)
    assert a.checksum() == b.checksum() and la.tobytes() == lb.tobytes()
    c, lc = fe_train(datasets, FeTrainConfig(**{**cfg.__dict__, "detach_coefficients": True}))
    assert lc[0] == la[0] and c.checksum() != a.checksum()
    d, ld = fe_train(datasets, FeTrainConfig(**{**cfg.__dict__, "lambda_basis": 0.1}))
    assert ld[0] > la[0]


@pytest.mark.filterwarnings("ignore:overflow encountered:RuntimeWarning")
def test_fe_diverged():
    ds = random_dataset(20, u=np.full((20, 2), 1e200))
    with pytest.raises(DivergedTraining):
        fe_train([ds], FeTrainConfig(p=2, hidden=(4,), steps=3))


def test_fe_config_validation():
    with pytest.raises(ValueError):
        FeTrainConfig(p=0)
    with pytest.raises(ValueError):
        FeTrainConfig(lambda_tik=0.0)
    with pytest.raises(ValueError):
        fe_train([], FeTrainConfig())
