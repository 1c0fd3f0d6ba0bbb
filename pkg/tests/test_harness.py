"""Lyapunov oracle, ensemble engine, rate fits, bias orders, one-step checks."""

import math
import os

import numpy as np
import pytest
from scipy import stats
from scipy.linalg import solve_discrete_lyapunov

import kinecoup as kc
from kinecoup.errors import HypothesisError, StabilityError
from kinecoup.harness import (
    DecayAggregate,
    InitSpec,
    estimate_bias_order,
    estimate_contraction_rate,
    estimate_decay_curve,
    gaussian_lyapunov_oracle,
    run_coupled_ensemble,
    scheme_affine,
    verify_onestep_proposition,
    write_decay_csv,
)
from kinecoup.metric import compute_constants
from kinecoup.rng import stream


# ---------------------------------------------------------------------------
# affine step and oracle


@pytest.mark.parametrize("scheme", ["EM", "BU", "UBU"])
def test_affine_step_matches_integrator(scheme):
    # A columns = integrator applied to basis states with zero noise
    kappa, gamma, h = 1.4, 2.1, 0.07
    pot = kc.make_gaussian(1, kappa)
    cfg = kc.SchemeConfig(scheme, h, gamma)
    from kinecoup.integrators import NoiseDraw

    def advance(x, v):
        p = kc.PhasePoint([x], [v])
        zeros = np.zeros(1)
        if scheme == "EM":
            out = kc.em_step(p, pot, cfg, zeros)
        elif scheme == "BU":
            out = kc.bu_step(p, pot, cfg, NoiseDraw(zeros, zeros))
        else:
            out = kc.ubu_step(p, pot, cfg, NoiseDraw(zeros, zeros, zeros, zeros))
        return np.array([out.x[0], out.v[0]])

    A, _ = scheme_affine(scheme, kappa, gamma, h)
    A_num = np.column_stack([advance(1.0, 0.0), advance(0.0, 1.0)])
    np.testing.assert_allclose(A, A_num, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("scheme", ["EM", "BU", "UBU"])
def test_affine_noise_covariance_monte_carlo(scheme):
    kappa, gamma, h = 1.0, 1.5, 0.2
    pot = kc.make_gaussian(1, kappa)
    cfg = kc.SchemeConfig(scheme, h, gamma)
    from kinecoup.integrators import NoiseDraw

    n = 150_000
    rng = np.random.default_rng(77)
    p = kc.PhasePoint(np.zeros((n, 1)), np.zeros((n, 1)))
    if scheme == "EM":
        out = kc.em_step(p, pot, cfg, rng.standard_normal((n, 1)))
    elif scheme == "BU":
        out = kc.bu_step(p, pot, cfg, NoiseDraw(*(rng.standard_normal((n, 1)) for _ in range(2))))
    else:
        out = kc.ubu_step(p, pot, cfg, NoiseDraw(*(rng.standard_normal((n, 1)) for _ in range(4))))
    _, S = scheme_affine(scheme, kappa, gamma, h)
    emp = np.cov(np.column_stack([out.x[:, 0], out.v[:, 0]]).T)
    se = math.sqrt(2.0 / n)
    for i in range(2):
        for j in range(2):
            ref = S[i, j]
            tol = 5 * se * max(abs(ref), math.sqrt(S[i, i] * S[j, j]))
            assert abs(emp[i, j] - ref) <= tol


@pytest.mark.parametrize("scheme", ["EM", "BU", "UBU"])
def test_oracle_agrees_with_scipy_lyapunov(scheme):
    kappa, gamma, h = 2.0, 2.5, 0.05
    A, S = scheme_affine(scheme, kappa, gamma, h)
    sigma = gaussian_lyapunov_oracle(scheme, kappa, gamma, h)
    ref = solve_discrete_lyapunov(A, S)
    np.testing.assert_allclose(sigma, ref, rtol=1e-10)
    # fixed-point property
    np.testing.assert_allclose(A @ sigma @ A.T + S, sigma, rtol=1e-10)


def test_oracle_small_h_limit_is_exact_invariant_measure():
    # Sigma -> diag(1/kappa, 1), the Gibbs marginal
    for scheme in ("EM", "BU", "UBU"):
        sigma = gaussian_lyapunov_oracle(scheme, 2.0, 2.0, 1e-5)
        np.testing.assert_allclose(np.diag(sigma), [0.5, 1.0], rtol=1e-3)
        assert abs(sigma[0, 1]) < 1e-3


def test_oracle_stability_error_names_bound():
    with pytest.raises(StabilityError, match="spectral radius"):
        gaussian_lyapunov_oracle("EM", 1.0, 1.0, 3.0)


def test_em_oracle_bias_scales_linearly():
    kappa, gamma = 1.0, 2.0
    hs = [0.02, 0.01, 0.005]
    errs = [abs(gaussian_lyapunov_oracle("EM", kappa, gamma, h)[0, 0] - 1.0) for h in hs]
    slope = stats.linregress(np.log(hs), np.log(errs)).slope
    assert 0.8 <= slope <= 1.2


def test_ubu_oracle_bias_scales_quadratically():
    kappa, gamma = 1.0, 2.0
    hs = [0.02, 0.01, 0.005]
    errs = [abs(gaussian_lyapunov_oracle("UBU", kappa, gamma, h)[0, 0] - 1.0) for h in hs]
    slope = stats.linregress(np.log(hs), np.log(errs)).slope
    assert 1.8 <= slope <= 2.2


def test_oracle_cross_check_against_long_run():
    # ensemble of independent UBU chains at time T vs the oracle, 4 SE
    kappa, gamma, h = 1.0, 2.0, 0.05
    pot = kc.make_gaussian(1, kappa)
    cfg = kc.SchemeConfig("UBU", h, gamma)
    sigma = gaussian_lyapunov_oracle("UBU", kappa, gamma, h)
    n, k = 4000, 400
    gen = stream(321, 9)
    x = 2.0 * gen.standard_normal((n, 1))
    v = 2.0 * gen.standard_normal((n, 1))
    from kinecoup.integrators import _b_kernel, _u_kernel

    for _ in range(k):
        x, v = _u_kernel(x, v, h / 2, gamma, gen.standard_normal((n, 1)), gen.standard_normal((n, 1)))
        x, v = _b_kernel(x, v, pot.gradient(x), h)
        x, v = _u_kernel(x, v, h / 2, gamma, gen.standard_normal((n, 1)), gen.standard_normal((n, 1)))
    for arr, ref in ((x[:, 0], sigma[0, 0]), (v[:, 0], sigma[1, 1])):
        emp = arr.var(ddof=1)
        se = emp * math.sqrt(2.0 / (n - 1))
        assert abs(emp - ref) < 4 * se


# ---------------------------------------------------------------------------
# ensemble engine


def gaussian_cfg(**kw):
    gamma = kw.pop("gamma", 2.0)
    pot = kc.make_gaussian(kw.pop("d", 1), kw.pop("kappa", gamma**2 / 2))
    defaults = dict(
        potential=pot,
        scheme="EM",
        gamma_list=[gamma],
        h_list=[0.01],
        coupling_mode="switching",
        init=InitSpec("gaussian"),
        n_replicas=2000,
        n_steps=400,
        stride=10,
        seed=7,
    )
    defaults.update(kw)
    return kc.ExperimentConfig(**defaults)


def test_identical_starts_give_flat_zero_curve():
    cfg = gaussian_cfg(
        init=InitSpec("pair", x_a=[1.0], x_b=[1.0], v_a=[0.0], v_b=[0.0]),
        n_replicas=256,
        n_steps=50,
        stride=5,
    )
    (_, agg), = estimate_decay_curve(cfg)
    assert np.all(agg.mean_dist == 0.0)
    assert np.all(agg.frac_coalesced == 1.0)


def test_gaussian_decay_log_linear():
    cfg = gaussian_cfg(n_replicas=4000, n_steps=600, stride=5)
    (_, agg), = estimate_decay_curve(cfg)
    t, m = agg.t, agg.mean_dist
    mask = t >= 0.3 * t[-1]
    res = stats.linregress(t[mask], np.log(m[mask]))
    assert -res.slope > 0
    assert res.rvalue**2 > 0.95


def test_ensemble_deterministic_and_worker_independent(tmp_path):
    cfg = gaussian_cfg(n_replicas=1500, n_steps=100, stride=10, out=tmp_path / "a")
    os.environ["KC_THREADS"] = "1"
    try:
        (p1, a1), = estimate_decay_curve(cfg)
        os.environ["KC_THREADS"] = "8"
        cfg.out = tmp_path / "b"
        (p2, a2), = estimate_decay_curve(cfg)
    finally:
        os.environ.pop("KC_THREADS", None)
    assert np.array_equal(a1.mean_dist, a2.mean_dist)
    assert np.array_equal(a1.mean_rho, a2.mean_rho)
    assert p1.read_bytes() == p2.read_bytes()


def test_excluded_replica_accounting():
    # a restoring force whose gradient explodes for |x| > 3.2 knocks out the
    # replicas whose excursions cross the threshold, and only those
    base = kc.make_gaussian(1, 1.0)

    def bad_gradient(x):
        return np.where(np.abs(x) > 3.2, np.inf, x)

    from kinecoup.potentials import PotentialModel, QuadraticSplit

    pot = PotentialModel(
        dimension=1,
        energy_fn=base.energy_fn,
        gradient_fn=bad_gradient,
        constants=base.constants,
        split=QuadraticSplit("scalar", 1.0),
        label="exploding",
    )
    mc = compute_constants(pot, 2.0, 0.05)
    with pytest.raises(RuntimeError, match="blew up"):
        run_coupled_ensemble(
            pot, "EM", 2.0, 0.05, mc, "synchronous",
            InitSpec("gaussian"), 512, 400, seed=3,
        )
    agg = run_coupled_ensemble(
        pot, "EM", 2.0, 0.05, mc, "synchronous",
        InitSpec("gaussian"), 512, 400, seed=3,
        max_excluded_fraction=1.0,
    )
    assert 0 < agg.n_excluded < agg.n_configured
    assert agg.n_excluded + agg.n_included == agg.n_configured
    assert np.all(np.isfinite(agg.mean_dist))


def test_decay_csv_schema(tmp_path):
    cfg = gaussian_cfg(n_replicas=128, n_steps=20, stride=5, out=tmp_path)
    (path, _), = estimate_decay_curve(cfg)
    header = path.read_text().splitlines()[0]
    assert header == "t,mean_dist,stderr,frac_coalesced"


# ---------------------------------------------------------------------------
# rate estimation


def test_contraction_rate_gaussian_em_passes():
    gamma = 2.0
    cfg = gaussian_cfg(
        gamma=gamma,
        h_list=[0.002],
        n_replicas=2000,
        n_steps=1500,
        stride=10,
    )
    fit = estimate_contraction_rate(cfg)
    assert fit.theoretical_rate == pytest.approx(gamma / 16.0)
    assert fit.passed
    assert fit.fitted_rate > fit.theoretical_rate


def test_contraction_rate_euclidean_envelope():
    # Euclidean mean distance decays within the M*N envelope of the metric
    gamma = 2.0
    cfg = gaussian_cfg(gamma=gamma, h_list=[0.002], n_replicas=2000, n_steps=1500, stride=10)
    (_, agg), = estimate_decay_curve(cfg)
    mc = compute_constants(cfg.potential, gamma, 0.002)
    envelope = mc.M_equiv * mc.N_equiv
    ratio = agg.mean_dist / agg.mean_dist[0]
    bound = envelope * np.exp(-mc.rate_em * agg.t)
    assert np.all(ratio <= bound * (1 + 1e-9))


def test_contraction_rate_all_coalesced_reports_time():
    cfg = gaussian_cfg(
        init=InitSpec("pair", x_a=[1.0], x_b=[1.0]),
        n_replicas=64,
        n_steps=50,
        stride=5,
    )
    fit = estimate_contraction_rate(cfg)
    assert fit.coalescence_time is not None
    assert math.isnan(fit.fitted_rate)


# ---------------------------------------------------------------------------
# bias orders


def test_bias_order_em():
    pot = kc.make_gaussian(1, 1.0)
    rep = estimate_bias_order("EM", pot, 2.0, [0.02, 0.01, 0.005, 0.0025])
    assert 0.8 <= rep.slope <= 1.2
    assert rep.oracle == "gaussian-lyapunov"


def test_bias_order_ubu():
    pot = kc.make_gaussian(1, 1.0)
    rep = estimate_bias_order("UBU", pot, 2.0, [0.02, 0.01, 0.005, 0.0025])
    assert 1.8 <= rep.slope <= 2.2


def test_bias_order_bu_at_least_one():
    pot = kc.make_gaussian(1, 1.0)
    rep = estimate_bias_order("BU", pot, 2.0, [0.02, 0.01, 0.005, 0.0025])
    assert rep.slope >= 1.0


def test_bias_order_rejects_non_gaussian():
    with pytest.raises(Exception):
        estimate_bias_order("EM", kc.make_banana(), 2.0, [0.02, 0.01, 0.005, 0.0025])


# ---------------------------------------------------------------------------
# one-step propositions


def test_onestep_em_quadratic_zero_violations():
    gamma = 3.0
    pot = kc.make_gaussian(2, gamma**2 / 4)
    rep = verify_onestep_proposition("EM", pot, gamma, 1e-3, 10_000, seed=5)
    assert rep.passed
    assert rep.worst_ratio <= rep.bound


def test_onestep_bu_quadratic_zero_violations():
    gamma = 3.0
    pot = kc.make_gaussian(2, gamma**2 / 4)
    rep = verify_onestep_proposition("BU", pot, gamma, 1e-3, 10_000, seed=6)
    assert rep.passed


def test_onestep_double_well():
    # radial double well with closed-form constants, states with r_l^2 >= threshold
    pot = kc.make_gaussian_bump(d=1, curvature=1.0, amp=2.0, width=1.0, kappa=0.5)
    gamma = 9.0
    rep_em = verify_onestep_proposition("EM", pot, gamma, 1e-3, 10_000, seed=7)
    assert rep_em.passed
    rep_bu = verify_onestep_proposition("BU", pot, gamma, 1e-3, 10_000, seed=8)
    assert rep_bu.passed


def test_onestep_refuses_violated_hypotheses():
    pot = kc.make_gaussian_bump(d=1, curvature=1.0, amp=2.0, width=1.0, kappa=0.5)
    with pytest.raises(HypothesisError, match="violated"):
        verify_onestep_proposition("EM", pot, 1.0, 1e-3, 100)  # gamma too small
    gamma = 9.0
    with pytest.raises(HypothesisError, match="violated: h"):
        verify_onestep_proposition("EM", pot, gamma, 10.0, 100)  # h too large
