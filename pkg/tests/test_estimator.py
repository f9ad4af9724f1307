import numpy as np
import pytest
from hypothesis import given, strategies as st

from gradmatch import estimator as est
from gradmatch import models, oracles, regfam, training
from gradmatch.synthdata import Dataset, LinearGenConfig, gen_linear

RIDGE = regfam.RegularizerSpec("scalar-ridge")


def lin(p, loss="squared-error-half"):
    return models.ModelSpec("linear", (p, 1), loss_kind=loss)


def test_endpoint_target_ridge_example():
    data = Dataset(np.eye(2), np.array([1.0, 0.0]))
    theta = np.array([0.5, 0.0])
    assert np.allclose(est.endpoint_target(lin(2), data, theta), [0.5, 0.0])
    res = est.fit_linear(est.endpoint_system(lin(2), data, theta, RIDGE))
    assert res.lam[0] == pytest.approx(1.0, abs=1e-12)
    assert res.residual_mse < 1e-24


def test_euler_target_recovers_explicit_ridge():
    data = Dataset(np.array([[1.0]]), np.array([0.0]))
    traj = training.Trajectory([0, 1], [np.array([1.0]), np.array([0.85])], eta=0.1)
    (theta, b), = est.trajectory_targets(lin(1), data, traj)
    assert b[0] == pytest.approx(0.5)
    assert est.fit_linear(est.trajectory_system([(theta, b)], RIDGE)).lam[0] == pytest.approx(0.5)


def test_euler_targets_vanish_for_plain_gd():
    data, _ = gen_linear(LinearGenConfig(n=100, d=4, seed=2))
    _, traj = training.train(lin(4, "half-mse-normalized"), data,
                             training.TrainConfig(eta=0.05, max_epochs=8, checkpoint_steps="all"))
    targets = est.trajectory_targets(lin(4, "half-mse-normalized"), data, traj)
    assert len(targets) == 8
    assert max(np.abs(b).max() for _, b in targets) < 1e-12


def test_euler_needs_consecutive_steps():
    traj = training.Trajectory([0, 5], [np.zeros(1), np.ones(1)], eta=0.1)
    with pytest.raises(est.EstimationError):
        est.trajectory_targets(lin(1), Dataset(np.ones((1, 1)), np.zeros(1)), traj)
    with pytest.raises(est.EstimationError):
        est.trajectory_targets(lin(1), Dataset(np.ones((1, 1)), np.zeros(1)), traj, reference="midpoint")


def test_flow_targets_lead_term():
    # quadratic with H = diag(1, 2); the discrepancy is (eta/2) H g to first order
    spec = lin(2, "half-mse-normalized")
    data = Dataset(np.diag([np.sqrt(2.0), 2.0]), np.zeros(2))
    theta = np.array([1.0, 1.0])
    traj = training.Trajectory([0], [theta], eta=0.01)
    (_, b), = est.trajectory_targets(spec, data, traj, reference="flow")
    hg = models.loss_hvp(spec, theta, data, models.loss_grad(spec, theta, data))
    assert np.allclose(b, 0.005 * hg, rtol=0.03)


def test_stack_concatenates_and_checks_width():
    a = est.EstimationSystem([1.0, 2.0], [[1.0], [2.0]], ["a"])
    b = est.EstimationSystem([3.0], [[3.0]], ["b"])
    s = est.stack([a, b])
    assert s.rows == 3 and s.blocks == [2, 1] and s.tags == ["a", "b"]
    with pytest.raises(est.EstimationError):
        est.stack([a, est.EstimationSystem([1.0], [[1.0, 2.0]])])
    with pytest.raises(est.EstimationError):
        est.stack([])
    with pytest.raises(est.EstimationError):
        est.EstimationSystem([1.0, 2.0], [[1.0]])


def test_duplicate_columns_split_evenly_and_flag():
    col = np.array([1.0, -2.0, 0.5])
    c = 3.0
    res = est.fit_linear(est.EstimationSystem(c * col, np.column_stack([col, col])))
    assert np.allclose(res.lam, [c / 2, c / 2])
    assert res.diagnostics["rank"] == 1
    assert res.diagnostics["low_identifiability"]


def test_zero_column_is_reported_and_zeroed():
    phi = np.column_stack([np.array([1.0, 2.0]), np.zeros(2)])
    res = est.fit_linear(est.EstimationSystem([2.0, 4.0], phi), normalize=True)
    assert np.allclose(res.lam, [2.0, 0.0])
    assert "zero-norm-column" in res.diagnostics["flags"]


def test_weighted_rows():
    phi = np.array([[1.0], [1.0]])
    sys_ = est.EstimationSystem([0.0, 1.0], phi, weights=np.array([1.0, 3.0]))
    assert est.fit_linear(sys_).lam[0] == pytest.approx(0.75)


@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_exact_systems_are_recovered(seed, r):
    rng = np.random.default_rng(seed)
    phi = rng.standard_normal((r + 5, r))
    lam = rng.standard_normal(r)
    for normalize in (False, True):
        res = est.fit_linear(est.EstimationSystem(phi @ lam, phi), normalize=normalize)
        assert np.allclose(res.lam, lam, atol=1e-9 * (1 + np.abs(lam).max()))
        assert not res.diagnostics["low_identifiability"]


@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
def test_column_scaling_maps_back(seed, s):
    rng = np.random.default_rng(seed)
    phi = rng.standard_normal((8, 3))
    b = rng.standard_normal(8)
    base = est.fit_linear(est.EstimationSystem(b, phi), normalize=True).lam
    scaled = phi.copy()
    scaled[:, 1] *= s
    lam = est.fit_linear(est.EstimationSystem(b, scaled), normalize=True).lam
    assert np.allclose(lam * [1, s, 1], base, rtol=1e-8, atol=1e-10)


def test_fit_iterative_agrees_with_linear():
    rng = np.random.default_rng(4)
    phi = rng.standard_normal((40, 3))
    b = phi @ np.array([0.3, -1.2, 0.7]) + 0.01 * rng.standard_normal(40)
    lin_res = est.fit_linear(est.EstimationSystem(b, phi))
    it = est.fit_iterative(est.EstimationSystem(b, phi), est.AdamConfig(step=1e-2, max_epochs=20000, patience=200))
    assert np.allclose(it.lam, lin_res.lam, atol=1e-4)


def test_fit_iterative_rejects_empty():
    empty = est.EstimationSystem(np.zeros(0), np.zeros((0, 2)))
    with pytest.raises(est.EstimationError):
        est.fit_iterative(empty)
    with pytest.raises(est.EstimationError):
        est.fit_linear(empty)


def test_elastic_net_endpoint_recovery():
    data, _ = gen_linear(LinearGenConfig(n=500, d=10, coef_std=5.0, noise_std=0.5, seed=11))
    spec = lin(10, "mse-normalized")
    reg = regfam.RegularizerSpec("elastic-net-smoothed", 1e-3)
    true = np.array([0.1, 0.1])
    rec, _ = training.train(spec, data, training.TrainConfig(eta=0.05, max_epochs=20000, patience=50),
                            explicit_reg=(reg, true))
    system = est.endpoint_system(spec, data, rec.theta, reg)
    for res in (est.fit_linear(system, normalize=True),
                est.fit_iterative(system, est.AdamConfig(step=1e-3, max_epochs=50000, patience=500))):
        assert np.allclose(res.lam, true, rtol=0.01)


def test_igr_fit_examples():
    assert est.igr_fit([(np.array([1.0, 0.0]), np.array([0.05, 0.0]))], 2) == pytest.approx(0.05)
    assert est.igr_fit([(np.array([1.0, 0.0]), np.array([0.0, 3.0]))], 2) == 0.0
    with pytest.raises(est.DegenerateSystemError):
        est.igr_fit([(np.zeros(3), np.ones(3))], 3)


@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1.0))
def test_igr_fit_recovers_planted_coefficient(seed, lam):
    rng = np.random.default_rng(seed)
    p = 6
    samples = [(hg, 2 * lam / p * hg) for hg in rng.standard_normal((4, p))]
    assert est.igr_fit(samples, p) == pytest.approx(lam, rel=1e-12)


def test_retrain_validate_ridge_and_counter_case():
    data, _ = gen_linear(LinearGenConfig(n=200, d=5, coef_std=3.0, noise_std=1.0, seed=8))
    spec = lin(5)
    theta_star = oracles.ridge_closed_form(data.X, data.y[:, 0], 50.0)
    lmax = np.linalg.eigvalsh(data.X.T @ data.X).max() + 50.0
    cfg = training.TrainConfig(eta=1.0 / lmax, max_epochs=50000, patience=20)
    good = est.retrain_validate(spec, data, RIDGE, [50.0], cfg, theta_star)
    assert good["rel_distance"] < 1e-6
    bad = est.retrain_validate(spec, data, RIDGE, [0.0], cfg, theta_star)
    assert bad["rel_distance"] > 1e-3 and bad["loss_gap"] < 0


def test_summary_keys_and_psd_diagnostic():
    p = 3
    reg = regfam.RegularizerSpec("sym-quadratic")
    theta = np.array([1.0, -0.5, 2.0])
    M = np.diag([1.0, 2.0, 3.0])
    sys_ = est.EstimationSystem(2 * M @ theta, regfam.feature_matrix(reg, theta))
    res = est.fit_linear(sys_, reg_spec=reg, p=p)
    s = res.summary("sym-quadratic")
    assert set(s) == {"family", "lambda", "residual_mse", "cond", "rank", "min_eig", "low_identifiability"}
    # one endpoint cannot pin down six entries
    assert s["rank"] < 6 and s["low_identifiability"]


def test_endpoint_is_a_one_point_trajectory():
    data, _ = gen_linear(LinearGenConfig(n=60, d=3, seed=6))
    spec = lin(3)
    theta = np.array([0.2, -0.1, 0.4])
    a = est.fit_linear(est.endpoint_system(spec, data, theta, RIDGE)).lam
    b = est.fit_linear(est.trajectory_system([(theta, est.endpoint_target(spec, data, theta))], RIDGE)).lam
    assert np.array_equal(a, b)


def test_uncertain_small_coefficient_is_flagged():
    # a large and a small coefficient; noise that barely moves the overall
    # residual still leaves the small one poorly determined
    rng = np.random.default_rng(12)
    phi = np.column_stack([np.sign(rng.standard_normal(10)), 10 * rng.standard_normal(10)])
    b = phi @ np.array([1.0, 0.001]) + 0.01 * rng.standard_normal(10)
    res = est.fit_linear(est.EstimationSystem(b, phi))
    assert res.diagnostics["relative_residual"] < est.RESIDUAL_LIMIT
    assert res.diagnostics["relative_se"][1] > est.COEF_SE_LIMIT
    assert "uncertain-coefficient" in res.diagnostics["flags"] and res.diagnostics["low_identifiability"]
    exact = est.fit_linear(est.EstimationSystem(phi @ np.array([1.0, 0.001]), phi))
    assert "uncertain-coefficient" not in exact.diagnostics["flags"]
