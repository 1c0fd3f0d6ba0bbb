"""Acceptance criteria, one test per criterion, one pass/fail line each.

Criteria 1-8 exercise the primary component only.  Statistical criteria use
the stated tolerances (4 standard errors, KS at significance 0.01);
order-fitting criteria use the stated slope windows; the figure-reproduction
criteria assert the qualitative orderings the benchmark experiments show.
"""

import math
import time

import numpy as np
import pytest
from scipy import stats

import kinecoup as kc
from kinecoup.couplings import _coupled_normal
from kinecoup.harness import (
    InitSpec,
    estimate_bias_order,
    estimate_contraction_rate,
    estimate_meanfield_rate,
    run_coupled_ensemble,
    verify_onestep_proposition,
)
from kinecoup.cli import FIGURE_DEFAULTS, GMM_MEANS_PLACEHOLDER
from kinecoup.meanfield import MeanFieldSpec, harmonic_interaction
from kinecoup.metric import compute_constants, rl_squared, rho_from_diff, rs_value
from kinecoup.rng import stream


def report(criterion, description, ok, started):
    state = "PASS" if ok else "FAIL"
    print(f"\n[{state}] criterion {criterion}: {description} ({time.time() - started:.1f}s)")
    assert ok, f"criterion {criterion} failed: {description}"


# ---------------------------------------------------------------------------


def test_criterion_1_noise_law():
    t0 = time.time()
    n = 10**6
    ok = True
    for i, (gamma, h) in enumerate([(1.0, 0.1), (2.0, 0.05), (10.0, 0.01)]):
        gen = stream(1001, i)
        z1, z2 = kc.sample_ou_noise(h, gamma, gen.standard_normal(n), gen.standard_normal(n))
        eta = math.exp(-gamma * h)
        var1_ref, var2_ref = h, (1 - eta**2) / (2 * gamma)
        cov_ref = (1 - eta) / gamma
        for sample, ref in ((z1, var1_ref), (z2, var2_ref)):
            emp = sample.var(ddof=1)
            se = emp * math.sqrt(2.0 / (n - 1))
            ok &= abs(emp - ref) <= 4 * se
        prod = z1 * z2
        se_cov = prod.std(ddof=1) / math.sqrt(n)
        ok &= abs(prod.mean() - cov_ref) <= 4 * se_cov
    report(1, "OU increments match the Ito-isometry law within 4 SE", ok, t0)


def test_criterion_2_coupling_correctness():
    t0 = time.time()
    ok = True
    # standard-normal marginals of the coupled draw (KS at alpha = 0.01)
    n = 10**5
    for i, qhat_norm in enumerate((0.1, 1.0, 10.0)):
        gen = stream(2002, i)
        beta, qn = 1.0, qhat_norm
        q = np.zeros((n, 2))
        q[:, 0] = qn
        xi = gen.standard_normal((n, 2))
        u = gen.random(n)
        xi_prime, _, _ = _coupled_normal(q, np.full(n, qn), beta, xi, u)
        ok &= stats.kstest(xi_prime[:, 0], "norm").pvalue > 0.01
        ok &= stats.kstest(xi_prime[:, 1], "norm").pvalue > 0.01
    # maximality probability and the first-moment identity, 4 SE
    n = 2 * 10**5
    for i, qn in enumerate((0.01, 0.5, 2.0, 8.0)):
        gen = stream(2003, i)
        q = np.zeros((n, 2))
        q[:, 0] = qn
        xi = gen.standard_normal((n, 2))
        u = gen.random(n)
        xi_prime, accept, _ = _coupled_normal(q, np.full(n, qn), 1.0, xi, u)
        p_exact = 2.0 * stats.norm.cdf(-qn / 2.0)
        se_p = math.sqrt(p_exact * (1 - p_exact) / n)
        ok &= abs(accept.mean() - p_exact) <= 4 * se_p
        vals = np.linalg.norm(q + (xi - xi_prime), axis=-1)
        se_m = vals.std(ddof=1) / math.sqrt(n)
        ok &= abs(vals.mean() - qn) <= 4 * se_m
    report(2, "reflection-maximal draw: normal marginals, overlap mass, first moment", ok, t0)


def test_criterion_3_onestep_propositions():
    t0 = time.time()
    ok = True
    gamma = 3.0
    quad = kc.make_gaussian(2, gamma**2 / 4)
    ok &= verify_onestep_proposition("EM", quad, gamma, 1e-3, 10_000, seed=31).passed
    ok &= verify_onestep_proposition("BU", quad, gamma, 1e-3, 10_000, seed=32).passed
    well = kc.make_gaussian_bump(d=1, curvature=1.0, amp=2.0, width=1.0, kappa=0.5)
    ok &= verify_onestep_proposition("EM", well, 9.0, 1e-3, 10_000, seed=33).passed
    ok &= verify_onestep_proposition("BU", well, 9.0, 1e-3, 10_000, seed=34).passed
    report(3, "deterministic one-step distance-squared bounds, zero violations", ok, t0)


def test_criterion_4_metric_construction():
    t0 = time.time()
    pot = kc.make_gaussian_bump(d=2, curvature=1.0, amp=0.01, width=0.5, kappa=0.5)
    mc = compute_constants(pot, 3.0, 0.005, "BU")
    gen = stream(4004, 0)
    n = 10**4
    scale = np.exp(gen.uniform(-3, 3, (n, 1)))
    z = gen.standard_normal((n, 2)) * scale
    w = gen.standard_normal((n, 2)) * scale
    rl = np.sqrt(rl_squared(z, w, mc.gamma, mc.tau, mc.K_mode))
    rs = rs_value(z, w, mc.gamma, mc.alpha)
    ok = bool(np.all(2 * mc.epsilon * rl <= rs * (1 + 1e-12)))
    ok &= bool(np.all(rs <= rl / mc.script_E * (1 + 1e-12)))
    eu = np.sqrt(np.sum(z * z, -1) + np.sum(w * w, -1))
    rho = rho_from_diff(z, w, mc)
    ok &= bool(np.all(eu <= mc.N_equiv * rho * (1 + 1e-9)))
    ok &= bool(np.all(mc.N_equiv * rho <= mc.M_equiv * eu * (1 + 1e-9)))
    # f properties
    r = np.linspace(0.0, 2.0 * mc.R1, 500)[1:]
    f = kc.f_eval(r, mc)
    ok &= kc.f_eval(0.0, mc) == 0.0
    ok &= bool(np.all(f <= r * (1 + 1e-12)))
    ok &= bool(np.all(f >= mc.fprime_R1 * r * (1 - 1e-12)))
    slopes = np.diff(f) / np.diff(r)
    ok &= bool(np.all(np.diff(slopes) <= 1e-9))
    # the second-derivative identity, relative 1e-6 against quadrature values
    a = mc.f_table.a_coef
    rr = np.linspace(0.05 * mc.R1, 0.95 * mc.R1, 57)
    delta = 1e-5 * mc.R1
    fpp = (kc.f_prime(rr + delta, mc) - kc.f_prime(rr - delta, mc)) / (2 * delta)
    Phi = math.sqrt(math.pi / (4 * a)) * np.vectorize(math.erf)(math.sqrt(a) * rr)
    rhs = -2.0 * a * rr * kc.f_prime(rr, mc) - 0.5 * mc.c_hat * mc.gamma * Phi
    ok &= bool(np.all(np.abs(fpp - rhs) <= 1e-6 * np.maximum(np.abs(fpp), np.abs(rhs))))
    report(4, "metric sandwiches and concave-rescaling properties", ok, t0)


def test_criterion_5_global_contraction_gaussian():
    t0 = time.time()
    gamma = 2.0
    kappa = gamma**2 / 2  # theoretical EM rate gamma/16
    pot = kc.make_gaussian(1, kappa)
    L = pot.constants.L
    ok = True
    details = []
    for scheme in ("EM", "BU", "UBU"):
        # largest step size satisfying the scheme's validity condition
        if scheme == "EM":
            bound = min(1 / (256 * 75 * (2 * L / gamma**2 + 1)), L / gamma**2 / 8, L / (32 * L))
        else:
            bound = min(1 / (256 * 75 * (2 * L / gamma**2 + 1)), L / gamma**2 / 15, L / (55 * L))
        h = bound * gamma / L * 0.999
        n_steps = int(round(1.0 / h))
        cfg = kc.ExperimentConfig(
            potential=pot,
            scheme=scheme,
            gamma_list=[gamma],
            h_list=[h],
            coupling_mode="switching",
            init=InitSpec("gaussian"),
            n_replicas=10_000,
            n_steps=n_steps,
            stride=max(1, n_steps // 200),
            seed=55,
        )
        fit = estimate_contraction_rate(cfg)
        mc = compute_constants(pot, gamma, h, scheme)
        assert mc.flags["h_cond_em" if scheme == "EM" else "h_cond_bu"]
        if scheme == "EM":
            assert fit.theoretical_rate == pytest.approx(gamma / 16.0)
        ok &= fit.passed
        details.append(f"{scheme}: fitted {fit.fitted_rate:.3f} >= {fit.theoretical_rate:.4f}"
                       + (f", transient {fit.transient_max_ratio:.4f} <= C {fit.ubu_prefactor_bound:.4f}"
                          if scheme == "UBU" else ""))
    print("\n  " + "; ".join(details))
    report(5, "fitted contraction rates clear the theoretical bounds", ok, t0)


def test_criterion_6_bias_orders():
    t0 = time.time()
    pot = kc.make_gaussian(1, 1.0)
    h_list = [0.02, 0.01, 0.005, 0.0025]
    em = estimate_bias_order("EM", pot, 2.0, h_list)
    ubu = estimate_bias_order("UBU", pot, 2.0, h_list)
    ok = 0.8 <= em.slope <= 1.2 and 1.8 <= ubu.slope <= 2.2
    print(f"\n  EM slope {em.slope:.3f}, UBU slope {ubu.slope:.3f}")
    report(6, "stationary-bias orders: EM ~ h, UBU ~ h^2", ok, t0)


def _figure_curve(which, gamma, mode, n_replicas, seed):
    preset = FIGURE_DEFAULTS[which]
    if which == "banana":
        pot = kc.make_banana(kappa=preset["potential"]["kappa"])
    else:
        pot = kc.make_gaussian_mixture(
            GMM_MEANS_PLACEHOLDER, sigma=preset["potential"]["sigma"],
            kappa=preset["potential"]["kappa"],
        )
    h = preset["scheme"]["h"]
    mc = compute_constants(pot, gamma, h, "BU")
    init = InitSpec("pair", x_a=preset["initial_a"], x_b=preset["initial_b"])
    return run_coupled_ensemble(
        pot, "BU", gamma, h, mc, mode, init, n_replicas, preset["n_steps"],
        seed=seed, stride=preset["stride"],
    )


def test_criterion_7_figure_reproduction():
    t0 = time.time()
    n_rep = 10_000
    ok = True
    lines = []
    # (a) banana, reflection: >= 2 orders of magnitude for every tested gamma
    finals = {}
    for gamma in FIGURE_DEFAULTS["banana"]["gammas"]:
        agg = _figure_curve("banana", gamma, "reflection", n_rep, seed=77)
        finals[gamma] = agg.mean_dist[-1]
        decay = agg.mean_dist[0] / max(agg.mean_dist[-1], 1e-300)
        ok &= decay >= 100.0
        lines.append(f"banana refl g={gamma:g}: {agg.mean_dist[0]:.3g} -> {agg.mean_dist[-1]:.3g}")
    # (b) banana, synchronous at the smallest gamma: >= 10x the reflection curve
    g_min = min(FIGURE_DEFAULTS["banana"]["gammas"])
    sync = _figure_curve("banana", g_min, "synchronous", n_rep, seed=77)
    ok &= sync.mean_dist[-1] >= 10.0 * max(finals[g_min], 1e-300)
    lines.append(f"banana sync g={g_min:g}: final {sync.mean_dist[-1]:.3g} "
                 f"vs refl {finals[g_min]:.3g}")
    # (c) GMM from [1,1] vs [9,9]: same ordering at the smallest gamma
    g_min_gmm = min(FIGURE_DEFAULTS["gmm"]["gammas"])
    refl = _figure_curve("gmm", g_min_gmm, "reflection", n_rep, seed=78)
    sync = _figure_curve("gmm", g_min_gmm, "synchronous", n_rep, seed=78)
    ok &= refl.mean_dist[0] / max(refl.mean_dist[-1], 1e-300) >= 10.0
    ok &= sync.mean_dist[-1] >= 2.0 * max(refl.mean_dist[-1], 1e-300)
    lines.append(f"gmm g={g_min_gmm:g}: refl {refl.mean_dist[-1]:.3g}, sync {sync.mean_dist[-1]:.3g}")
    print("\n  " + "\n  ".join(lines))
    report(7, "benchmark decay curves: reflection contracts, synchronous lags", ok, t0)


def test_criterion_8_meanfield_rate_uniform_in_n():
    t0 = time.time()
    rates = {}
    for N in (4, 16, 64):
        spec = MeanFieldSpec(
            N=N, confining=kc.make_gaussian(1, 1.0), interaction=harmonic_interaction(0.05)
        )
        assert spec.smallness_ok
        fit = estimate_meanfield_rate(spec, gamma=2.0, h=0.01, n_replicas=128,
                                      n_steps=2000, seed=88)
        rates[N] = fit.fitted_rate
    spread = (max(rates.values()) - min(rates.values())) / min(rates.values())
    print(f"\n  rates: {rates}, spread {spread:.2%}")
    report(8, "mean-field contraction rate uniform in N (within 25%)", spread <= 0.25, t0)
