import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import minimize

from cfl import ConfigError, NumericalError
from cfl.panel import DomainPanel, by_role
from cfl.scm import (
    GammaMatrix,
    ScmConfig,
    coefficient_deviation,
    gamma_standardize,
    generalizability_from_truth,
    geometric_median,
    measure_generalizability,
    read_simulation,
    sample_drift_ladder,
    sample_factor_scm,
    sample_toy_scm,
    simulate_market,
    write_simulation,
)


# -- config and gamma ---------------------------------------------------------


@pytest.mark.parametrize("bad", [dict(K_tilde=5, K=4), dict(T=0), dict(noise_scale=-1.0), dict(n_per_domain=0)])
def test_config_rejects_invalid(bad):
    with pytest.raises(ConfigError):
        ScmConfig(**bad)


def test_config_dict_round_trip_and_unknown_keys():
    cfg = ScmConfig(K=3, K_tilde=1, seed=5)
    assert ScmConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        ScmConfig.from_dict({"K": 3, "bogus": 1})


def test_gamma_rejects_overlapping_supports():
    with pytest.raises(ConfigError):
        GammaMatrix([[1.0, 0.0], [np.sqrt(0.5), np.sqrt(0.5)]])


def test_gamma_rejects_non_unit_rows():
    with pytest.raises(ConfigError):
        GammaMatrix([[2.0, 0.0]])


@given(st.integers(1, 6), st.integers(0, 10_000))
def test_accepted_gamma_satisfies_constraints(K, seed):
    rng = np.random.default_rng(seed)
    K_tilde = rng.integers(1, K + 1)
    owner = rng.integers(0, K_tilde, size=K)
    owner[:K_tilde] = np.arange(K_tilde)
    G = np.zeros((K_tilde, K))
    G[owner, np.arange(K)] = rng.standard_normal(K)
    G /= np.linalg.norm(G, axis=1, keepdims=True)
    g = GammaMatrix(G).entries
    assert np.allclose(np.sum(g**2, axis=1), 1.0, atol=1e-12)
    prod = np.abs(g[:, None, :] * g[None, :, :]).sum(axis=2)
    assert np.all(prod[~np.eye(K_tilde, dtype=bool)] == 0)


# -- gamma_standardize --------------------------------------------------------


def test_gamma_standardize_identity():
    rng = np.random.default_rng(0)
    Z = rng.standard_normal((50, 3))
    F = np.array([0.5, -1.0, 2.0])
    R = Z @ F
    Zt, Ft, eps = gamma_standardize(GammaMatrix.leading(2, 3), Z, np.ones(3), F, R)
    assert np.allclose(Zt, Z[:, :2])
    assert np.allclose(Ft, F[:2])
    assert np.allclose(eps, R - Z[:, :2] @ F[:2])


def test_gamma_standardize_hand_case():
    # Gamma = (0.5, 0), F~ = (Gamma Gamma^T)^-1 Gamma F = 0.25^-1 * 2 = 8
    rng = np.random.default_rng(1)
    Z = rng.standard_normal((400, 2)) * np.array([2.0, 1.0])
    F = np.array([4.0, 1.0])
    R = Z @ F
    Zt, Ft, _ = gamma_standardize(GammaMatrix([[1.0, 0.0]]), Z, np.array([2.0, 1.0]), F, R)
    assert Ft == pytest.approx([8.0], abs=1e-12)
    # the coefficient is also what least squares of R on Z~ recovers (Z columns independent by construction)
    assert np.allclose(Zt[:, 0], Z[:, 0] / 2.0)


# -- sampled SCMs ----------------------------------------------------------------


def test_zero_drift_gives_constant_coefficients():
    panels, truth = sample_factor_scm(ScmConfig(K=4, K_tilde=2, T=10, n_per_domain=2000, factor_drift=0.0))
    rep = generalizability_from_truth(truth, [p.domain_id for p in by_role(panels, "source")], 0)
    assert rep.delta_f < 1e-6


def test_zero_noise_gives_zero_residual():
    panels, truth = sample_factor_scm(ScmConfig(K=2, K_tilde=2, T=5, n_per_domain=1000, noise_scale=0.0))
    src = [p.domain_id for p in by_role(panels, "source")]
    rep = generalizability_from_truth(truth, src, 0)
    assert rep.delta_eps < 1e-10


def test_z_tilde_moments():
    panels, truth = sample_factor_scm(ScmConfig(K=4, K_tilde=2, T=20, n_per_domain=5000, seed=7))
    for d in truth.domains:
        Zt = d.Z_tilde
        assert np.max(np.abs(Zt.mean(axis=0))) < 0.05
        assert np.max(np.abs(Zt.T @ Zt / len(Zt) - np.eye(2))) < 0.05


def test_labels_standardized_exactly():
    panels, _ = sample_factor_scm(ScmConfig(K=3, K_tilde=1, T=3, n_per_domain=10_000, seed=2))
    for p in panels:
        p.check_standardized(1e-10)


def test_residual_identity_and_truth_shapes():
    cfg = ScmConfig(K=4, K_tilde=2, T=4, n_per_domain=500, seed=3, n_val=2)
    panels, truth = sample_factor_scm(cfg)
    assert [p.role for p in panels].count("validation") == 2
    for p, d in zip(panels, truth.domains):
        assert np.allclose(p.labels, d.Z_tilde @ d.F_tilde + d.residuals, atol=1e-12)
        assert p.dim == cfg.input_dim


def test_same_seed_same_panels():
    cfg = ScmConfig(T=3, n_per_domain=200, seed=11, mixing_depth=1)
    a, _ = sample_factor_scm(cfg)
    b, _ = sample_factor_scm(cfg)
    assert all(np.array_equal(p.inputs, q.inputs) and np.array_equal(p.labels, q.labels) for p, q in zip(a, b))


def test_drift_zero_noise_zero_holds():
    for seed in range(5):
        panels, truth = sample_factor_scm(ScmConfig(T=5, n_per_domain=300, factor_drift=0.0, noise_scale=0.0, seed=seed))
        src = [p.domain_id for p in by_role(panels, "source")]
        assert generalizability_from_truth(truth, src, 0).holds


def test_drift_ladder_wander_grows_with_age():
    cfg = ScmConfig(K=3, K_tilde=1, n_per_domain=200, factor_drift=0.0, seed=4)
    panels, truth = sample_drift_ladder(cfg, 41, step_scale=0.1)
    # full coefficient vector in standardized factor units
    C = np.array([d.F * d.sigma for d in truth.domains])
    gap = np.linalg.norm(C - C[-1], axis=1)
    assert gap[:10].mean() > gap[-11:-1].mean()
    assert panels[-1].role == "oos"


# -- toy SCM ------------------------------------------------------------------


def test_toy_variance_and_slope():
    (p,) = sample_toy_scm([1.0], 1_000_000, seed=0)
    Y, Xa = p.labels, p.inputs[:, 1]
    assert Y.var() == pytest.approx(2.0, rel=0.01)
    slope = np.cov(Y, Xa, bias=True)[0, 1] / Xa.var()
    assert slope == pytest.approx(2 / 3, rel=0.01)
    assert p.meta["standardized"] is False


def test_toy_structure_and_errors():
    ps = sample_toy_scm([0.5, 2.0], 100)
    assert len(ps) == 2 and ps[0].domain_id != ps[1].domain_id
    with pytest.raises(ConfigError):
        sample_toy_scm([1.0, 0.0], 10)
    with pytest.raises(ConfigError):
        sample_toy_scm([], 10)


# -- geometric median, generalizability, deviation -----------------------------------


def _gm_objective(y, P):
    return np.linalg.norm(P - y, axis=1).sum()


@given(st.integers(0, 10_000), st.integers(2, 12), st.integers(1, 3))
def test_geometric_median_matches_numerical_minimizer(seed, m, k):
    P = np.random.default_rng(seed).standard_normal((m, k))
    y = geometric_median(P)
    ref = minimize(_gm_objective, P.mean(axis=0), args=(P,), method="Nelder-Mead",
                   options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 20000})
    assert _gm_objective(y, P) <= ref.fun + 1e-7


@given(st.integers(0, 10_000))
def test_geometric_median_first_order_condition(seed):
    P = np.random.default_rng(seed).standard_normal((9, 2))
    y = geometric_median(P)
    d = P - y
    nrm = np.linalg.norm(d, axis=1)
    if nrm.min() > 1e-9:
        assert np.linalg.norm((d / nrm[:, None]).sum(axis=0)) <= 1e-6 * len(P)


def test_geometric_median_duplicate_point_and_1d():
    P = np.array([[0.0, 0.0]] * 5 + [[1.0, 0.0], [0.0, 1.0]])
    assert np.array_equal(geometric_median(P), [0.0, 0.0])
    assert geometric_median(np.array([1.0, 2.0, 3.0])) == pytest.approx([2.0])


def test_measure_generalizability_1d_grid_oracle():
    rep = measure_generalizability([1.0, 2.0, 3.0], [np.zeros(3)] * 3, [2.0], np.zeros(3))
    grid = np.linspace(0, 4, 40001)
    obj = np.abs(np.array([1.0, 2.0, 3.0])[:, None] - grid).mean(axis=0)
    assert rep.nu_star == pytest.approx([2.0])
    assert rep.delta_f == pytest.approx(obj.min(), abs=1e-9)
    assert rep.delta_f == pytest.approx(2 / 3)


def test_measure_generalizability_constant_and_far_oos():
    F = np.tile([0.3, -0.2], (4, 1))
    e = [np.full(5, 0.1)] * 4
    rep = measure_generalizability(F, e, [0.3, -0.2], np.full(5, 0.1))
    assert rep.delta_f == 0 and rep.holds
    far = measure_generalizability(F + np.random.default_rng(0).normal(0, 0.01, F.shape), e, [5.0, 5.0],
                                   np.full(5, 0.1))
    assert not far.holds


def test_coefficient_deviation_examples():
    assert coefficient_deviation([[1.0, 2.0]] * 3) == 0
    assert coefficient_deviation([0.0, 2.0]) == pytest.approx(1.0)
    assert coefficient_deviation([[1, 0], [0, 1], [-1, 0], [0, -1]]) == pytest.approx(1.0)


@given(st.integers(0, 10_000), st.integers(1, 2))
def test_coefficient_deviation_grid_oracle(seed, k):
    V = np.random.default_rng(seed).uniform(-1, 1, (5, k))
    axes = [np.linspace(-1, 1, 201)] * k
    best = min(np.mean(np.sum((V - np.array(nu)) ** 2, axis=1)) for nu in itertools.product(*axes))
    val = coefficient_deviation(V)
    assert val <= best + 1e-12
    assert best - val <= 2 * k * (0.01**2) + 1e-12  # grid half-step squared, per coordinate


# -- market and persistence ----------------------------------------------------------


def test_simulate_market_forward_returns_follow_labels():
    cfg = ScmConfig(K=2, K_tilde=1, seed=1)
    df = simulate_market(cfg, n_stocks=10, n_days=12, days_per_regime=3)
    assert len(df) == 120
    opens = df.pivot(index="date", columns="stock_id", values="open").to_numpy()
    assert np.all(opens > 0)
    assert {"date", "stock_id", "open", "market_cap", "f_0"} <= set(df.columns)


def test_write_read_simulation_round_trip(tmp_path):
    cfg = ScmConfig(K=3, K_tilde=1, T=3, n_per_domain=50, seed=9)
    panels, truth = sample_factor_scm(cfg)
    m = write_simulation(tmp_path, cfg, panels, truth)
    back, manifest = read_simulation(tmp_path)
    assert ScmConfig.from_dict(manifest["config"]) == cfg
    assert "delta_f" in m and "nu_star" in m
    for p, q in zip(panels, back):
        assert p.domain_id == q.domain_id and p.role == q.role
        assert np.array_equal(p.inputs, q.inputs) and np.array_equal(p.labels, q.labels)


def test_domain_panel_validation():
    with pytest.raises(ConfigError):
        DomainPanel(0, np.zeros((3, 2)), np.zeros(2))
    with pytest.raises(ConfigError):
        DomainPanel(0, np.array([[np.nan]]), np.zeros(1))
    with pytest.raises(ConfigError):
        DomainPanel(0, np.zeros((1, 1)), np.zeros(1), role="train")


def test_geometric_median_iteration_limit():
    P = np.random.default_rng(0).standard_normal((30, 3))
    with pytest.raises(NumericalError):
        geometric_median(P, tol=0.0, max_iter=3)
