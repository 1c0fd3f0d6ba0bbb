"""Distance functions and derived constants for the coupled-chain analysis.

Two base distances compare chain pairs (x, v), (x', v') via z = x - x',
w = v - v':

    r_l^2 = gamma^-2 z^T K z + (1/2)|(1 - 2 tau) z + gamma^-1 w|^2
            + (1/2) gamma^-2 |w|^2              (used far from the diagonal)
    r_s   = alpha |z| + |z + gamma^-1 w|        (used near the diagonal)

with tau = min(1/8, gamma^-2 kappa / 4) and alpha = 2 L gamma^-2.  They are
equivalent: 2 eps r_l <= r_s <= E^-1 r_l for explicit eps, E.  The glued
metric is

    rho = f(min(Delta, D_K) + eps r_l),     Delta = r_s - eps r_l,

where D_K is the supremum of Delta over the compact set where the
far-distance contraction can fail, R1 is the largest r_s compatible with
Delta <= D_K, and f is an increasing concave rescaling built from

    phi(s) = exp(-64 alpha gamma^2 (s ^ R1)^2),   Phi(s) = int_0^s phi,
    psi(s) = 1 - (c_hat gamma / 2) int_0^{s ^ R1} Phi/phi,
    c_hat  = 1 / (gamma int_0^{R1} Phi/phi),      f(r) = int_0^r phi psi.

psi decreases from 1 to exactly 1/2 at R1, so f has the affine tail slope
phi(R1)/2 beyond R1.  In the globally strongly convex case (R = 0) the whole
construction degenerates and rho reduces to r_l; f is then the identity.

The integrals int Phi/phi grow like exp(64 alpha gamma^2 s^2), so all
cumulative quadrature is carried out in log space; for strongly non-convex
parameter sets phi(R1) (and with it every f'(R1)-proportional rate constant)
underflows to zero, which is reported through the ``fprime_underflow``
validity flag rather than an error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.optimize import minimize
from scipy.special import erf, logsumexp

from kinecoup.errors import ParameterError
from kinecoup.integrators import PhasePoint
from kinecoup.potentials import PotentialModel, QuadraticSplit

F_TABLE_NODES = 2048
_GL_NODES = 16
_GL_SUB_NODES = 8


# ---------------------------------------------------------------------------
# closed-form constants


def tau_constant(kappa: float, gamma: float) -> float:
    return min(0.125, kappa / (4.0 * gamma**2))


def alpha_constant(L: float, gamma: float) -> float:
    return 2.0 * L / gamma**2


def epsilon_constant(alpha: float, L_K: float, gamma: float) -> float:
    return 0.5 * min(1.0, 2.0 * alpha * gamma / (3.0 * math.sqrt(L_K)), alpha)


def script_e_constant(kappa: float, alpha: float, gamma: float) -> float:
    return min(math.sqrt(kappa) / (gamma * math.sqrt(8.0) * alpha), 0.5)


def script_r_constant(tau: float, L_G: float, R: float, gamma: float) -> float:
    return (L_G * R**2 / gamma**2) / tau


# ---------------------------------------------------------------------------
# scheme validity predicates (pure, evaluated verbatim)


def gamma_condition_em(L_G: float, kappa: float, gamma: float) -> bool:
    return gamma >= 4.0 * L_G / math.sqrt(kappa)


def gamma_condition_bu(L_G: float, kappa: float, gamma: float) -> bool:
    return gamma >= math.sqrt(13.0 * L_G**2 / kappa)


def _h_bound_common(L: float, gamma: float, R1: float) -> tuple[float, float]:
    first = math.inf if R1 == 0.0 else 1.0 / (8.0 * L * R1**2)
    second = 1.0 / (256.0 * 75.0 * (2.0 * L / gamma**2 + 1.0))
    return first, second


def step_condition_em(L: float, L_K: float, gamma: float, h: float, R1: float) -> bool:
    first, second = _h_bound_common(L, gamma, R1)
    bound = min(first, second, L / gamma**2 / 8.0, L / (32.0 * L_K))
    return L * h / gamma <= bound


def step_condition_bu(L: float, L_K: float, gamma: float, h: float, R1: float) -> bool:
    first, second = _h_bound_common(L, gamma, R1)
    bound = min(first, second, L / gamma**2 / 15.0, L / (55.0 * L_K))
    return L * h / gamma <= bound


# ---------------------------------------------------------------------------
# distance kernels (broadcast over leading axes)


def rl_squared(z: np.ndarray, w: np.ndarray, gamma: float, tau: float, split: QuadraticSplit):
    """Squared far-field distance of a difference (z, w)."""
    quad = np.sum(z * split.apply(z), axis=-1)
    mix = (1.0 - 2.0 * tau) * z + w / gamma
    return (
        quad / gamma**2
        + 0.5 * np.sum(mix * mix, axis=-1)
        + 0.5 * np.sum(w * w, axis=-1) / gamma**2
    )


def rs_value(z: np.ndarray, w: np.ndarray, gamma: float, alpha: float):
    """Near-field distance alpha |z| + |z + gamma^-1 w|."""
    q = z + w / gamma
    return alpha * np.linalg.norm(z, axis=-1) + np.linalg.norm(q, axis=-1)


def r_l(a: PhasePoint, b: PhasePoint, mc: "MetricConstants", gamma: float) -> float:
    """Far-field distance between two phase points."""
    val = rl_squared(a.x - b.x, a.v - b.v, gamma, mc.tau, mc.K_mode)
    return float(np.sqrt(val)) if np.ndim(val) == 0 else np.sqrt(val)


def r_s(a: PhasePoint, b: PhasePoint, mc: "MetricConstants", gamma: float) -> float:
    """Near-field distance between two phase points."""
    val = rs_value(a.x - b.x, a.v - b.v, gamma, mc.alpha)
    return float(val) if np.ndim(val) == 0 else val


# ---------------------------------------------------------------------------
# reduced-coordinate optimization of D_K and R1

# With K = kappa*I both Delta = r_s - eps*r_l and the compact-set constraint
# depend on (z, w) only through s1 = |z|, s2 = |z + gamma^-1 w|,
# s3 = |gamma^-1 w|, feasible iff |s1 - s3| <= s2 <= s1 + s3.


def _reduced_rl_coeffs(k_quad: float, gamma: float, tau: float) -> tuple[float, float, float]:
    c1 = k_quad / gamma**2 - tau * (1.0 - 2.0 * tau)
    c2 = 0.5 * (1.0 - 2.0 * tau)
    c3 = 0.5 + tau
    return c1, c2, c3


def _reduced_delta(s1, s2, s3, alpha, epsilon, coeffs):
    c1, c2, c3 = coeffs
    rl = np.sqrt(c1 * s1**2 + c2 * s2**2 + c3 * s3**2)
    return alpha * s1 + s2 - epsilon * rl


def _feasible(s1, s2, s3):
    return (s2 <= s1 + s3 + 1e-15) & (s2 >= np.abs(s1 - s3) - 1e-15)


def _directions(p, t):
    """Map the unit square onto feasible directions, normalized to s1+s3 = 1.

    Every feasible direction with s1 + s3 > 0 is covered: s1 = p, s3 = 1 - p,
    and s2 sweeps the triangle range [|s1 - s3|, s1 + s3].
    """
    s1 = p
    s3 = 1.0 - p
    lo = np.abs(s1 - s3)
    s2 = lo + t * (1.0 - lo)
    return s1, s2, s3


def solve_DK_R1(
    kappa: float,
    gamma: float,
    alpha: float,
    epsilon: float,
    tau: float,
    script_R: float,
    k_quad: Optional[float] = None,
    grid: int = 600,
) -> tuple[float, float]:
    """Maximize Delta over the compact set, then r_s over {Delta <= D_K}.

    Delta, r_s and the constraint gauges are all 1-homogeneous in (s1, s2,
    s3), so both problems reduce to maximizing a scale-invariant ratio over
    the compact space of feasible directions:

        D_K = sqrt(script_R) * max  Delta(s) / ball(s),
        R1  = D_K            * max  r_s(s)   / Delta(s),

    where ball(s)^2 is the quadratic gauge of the constraint set and the
    second ratio is finite because Delta >= r_s / 2 > 0 away from the origin.
    Each direction problem is solved on a grid over the unit square
    parameterizing feasible directions, then refined with Nelder-Mead.
    Returns (0, 0) for an empty perturbation region.
    """
    if script_R < 0:
        raise ParameterError("script_R must be nonnegative")
    if script_R == 0.0:
        return 0.0, 0.0
    if k_quad is None:
        k_quad = kappa
    coeffs = _reduced_rl_coeffs(k_quad, gamma, tau)
    kball = kappa / gamma**2

    ps = np.linspace(0.0, 1.0, grid)
    ts = np.linspace(0.0, 1.0, grid)
    P, T = np.meshgrid(ps, ts, indexing="ij")
    s1, s2, s3 = _directions(P, T)
    delta = _reduced_delta(s1, s2, s3, alpha, epsilon, coeffs)
    ball = np.sqrt(kball * s1**2 + 0.5 * s2**2 + 0.5 * s3**2)
    rs = alpha * s1 + s2

    def refine(ratio_grid, ratio_fn):
        i, j = np.unravel_index(int(np.argmax(ratio_grid)), ratio_grid.shape)
        best = float(ratio_grid[i, j])

        def neg(x):
            p = min(max(x[0], 0.0), 1.0)
            t = min(max(x[1], 0.0), 1.0)
            return -ratio_fn(*_directions(p, t))

        res = minimize(
            neg,
            np.array([ps[i], ts[j]]),
            method="Nelder-Mead",
            options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 2000},
        )
        return max(best, float(-res.fun))

    with np.errstate(invalid="ignore", divide="ignore"):
        dk_ratio = refine(
            delta / ball,
            lambda a, b, c: _reduced_delta(a, b, c, alpha, epsilon, coeffs)
            / math.sqrt(kball * a**2 + 0.5 * b**2 + 0.5 * c**2),
        )
        D_K = max(math.sqrt(script_R) * dk_ratio, 0.0)
        if D_K == 0.0:
            return 0.0, 0.0
        r1_ratio = refine(
            rs / delta,
            lambda a, b, c: (alpha * a + b)
            / _reduced_delta(a, b, c, alpha, epsilon, coeffs),
        )
    return D_K, D_K * r1_ratio


# ---------------------------------------------------------------------------
# the concave rescaling f


@dataclass(frozen=True)
class _FTable:
    """Tabulated f on Chebyshev nodes of [0, R1] plus the analytic tail."""

    nodes: np.ndarray = field(repr=False)
    f_values: np.ndarray = field(repr=False)
    psi_values: np.ndarray = field(repr=False)
    a_coef: float
    R1: float
    f_interp: object = field(repr=False)
    psi_interp: object = field(repr=False)
    log_I_R1: float
    identity: bool = False


def _chebyshev_nodes(R1: float, n: int) -> np.ndarray:
    k = np.arange(n)
    return R1 * 0.5 * (1.0 - np.cos(np.pi * k / (n - 1)))


def _log_phi_ratio(x: np.ndarray, a: float) -> np.ndarray:
    """log(Phi(x)/phi(x)) for x in (0, R1]; Phi has the closed erf form."""
    with np.errstate(divide="ignore"):
        log_Phi = 0.5 * math.log(math.pi / (4.0 * a)) + np.log(erf(np.sqrt(a) * x))
    return log_Phi + a * x * x


def _tabulate_f(R1: float, a: float, n_nodes: int = F_TABLE_NODES) -> _FTable:
    nodes = _chebyshev_nodes(R1, n_nodes)
    lo, hi = nodes[:-1], nodes[1:]
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    gl_x, gl_w = np.polynomial.legendre.leggauss(_GL_NODES)
    xs = mid[:, None] + half[:, None] * gl_x[None, :]  # (nseg, GL)
    with np.errstate(divide="ignore"):
        log_w = np.log(half)[:, None] + np.log(gl_w)[None, :]

    # cumulative I(s) = int_0^s Phi/phi in log space
    seg_logI = logsumexp(_log_phi_ratio(xs, a) + log_w, axis=1)
    logI = np.concatenate([[-np.inf], np.logaddexp.accumulate(seg_logI)])
    log_I_R1 = float(logI[-1])
    psi = 1.0 - 0.5 * np.exp(logI - log_I_R1)
    psi = np.clip(psi, 0.5, 1.0)

    # partial I at the Gauss-Legendre nodes of every segment, for psi inside
    sub_x, sub_w = np.polynomial.legendre.leggauss(_GL_SUB_NODES)
    sub_mid = 0.5 * (lo[:, None] + xs)  # midpoints of [lo_j, x_jk]
    sub_half = 0.5 * (xs - lo[:, None])
    sub_pts = sub_mid[:, :, None] + sub_half[:, :, None] * sub_x[None, None, :]
    with np.errstate(divide="ignore"):
        sub_logw = np.log(sub_half)[:, :, None] + np.log(sub_w)[None, None, :]
        partial = logsumexp(_log_phi_ratio(sub_pts, a) + sub_logw, axis=2)
    logI_at_xs = np.logaddexp(logI[:-1, None], partial)
    psi_at_xs = np.clip(1.0 - 0.5 * np.exp(logI_at_xs - log_I_R1), 0.5, 1.0)

    phi_at_xs = np.exp(-a * xs * xs)
    seg_f = np.sum(np.exp(log_w) * phi_at_xs * psi_at_xs, axis=1)
    f_vals = np.concatenate([[0.0], np.cumsum(seg_f)])

    return _FTable(
        nodes=nodes,
        f_values=f_vals,
        psi_values=psi,
        a_coef=a,
        R1=R1,
        f_interp=PchipInterpolator(nodes, f_vals, extrapolate=False),
        psi_interp=PchipInterpolator(nodes, psi, extrapolate=False),
        log_I_R1=log_I_R1,
    )


_IDENTITY_TABLE = _FTable(
    nodes=np.array([0.0, 1.0]),
    f_values=np.array([0.0, 1.0]),
    psi_values=np.array([1.0, 1.0]),
    a_coef=0.0,
    R1=0.0,
    f_interp=None,
    psi_interp=None,
    log_I_R1=-math.inf,
    identity=True,
)


# ---------------------------------------------------------------------------
# the assembled constant record


@dataclass(frozen=True)
class MetricConstants:
    """Every derived constant of the metric and contraction construction."""

    kappa: float
    L: float
    L_G: float
    L_K: float
    R: float
    gamma: float
    h: float
    scheme: str
    tau: float
    alpha: float
    epsilon: float
    script_E: float
    script_R: float
    D_K: float
    R1: float
    c_hat: float
    log_c_hat: float
    f_table: _FTable = field(repr=False)
    fprime_R1: float
    log_fprime_R1: float
    rate_em: float
    rate_bu: float
    C_ubu: float
    M_equiv: float
    N_equiv: float
    K_mode: QuadraticSplit
    flags: dict = field(repr=False)

    @property
    def strongly_convex(self) -> bool:
        return self.script_R == 0.0


def f_eval(r, mc: MetricConstants):
    """Evaluate the concave rescaling f (identity in the R = 0 case)."""
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr < 0):
        raise ParameterError("f is defined for nonnegative arguments")
    t = mc.f_table
    if t.identity:
        out = r_arr
    else:
        inside = np.clip(r_arr, 0.0, t.R1)
        out = t.f_interp(inside)
        tail = r_arr > t.R1
        if np.any(tail):
            out = np.where(tail, t.f_values[-1] + mc.fprime_R1 * (r_arr - t.R1), out)
    return float(out) if np.ndim(r) == 0 else out


def f_prime(r, mc: MetricConstants):
    """Derivative f'(r) = phi(r) psi(r), constant phi(R1)/2 beyond R1."""
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr < 0):
        raise ParameterError("f' is defined for nonnegative arguments")
    t = mc.f_table
    if t.identity:
        out = np.ones_like(r_arr)
    else:
        inside = np.clip(r_arr, 0.0, t.R1)
        out = np.exp(-t.a_coef * inside * inside) * t.psi_interp(inside)
        out = np.where(r_arr > t.R1, mc.fprime_R1, out)
    return float(out) if np.ndim(r) == 0 else out


def delta_value(z: np.ndarray, w: np.ndarray, mc: MetricConstants):
    """Delta = r_s - eps r_l for a difference (z, w)."""
    rl = np.sqrt(rl_squared(z, w, mc.gamma, mc.tau, mc.K_mode))
    return rs_value(z, w, mc.gamma, mc.alpha) - mc.epsilon * rl


def rho_from_diff(z: np.ndarray, w: np.ndarray, mc: MetricConstants):
    """The glued metric rho evaluated on a difference (z, w)."""
    rl = np.sqrt(rl_squared(z, w, mc.gamma, mc.tau, mc.K_mode))
    if mc.strongly_convex:
        return rl
    rs = rs_value(z, w, mc.gamma, mc.alpha)
    delta = rs - mc.epsilon * rl
    return f_eval(np.minimum(delta, mc.D_K) + mc.epsilon * rl, mc)


def rho(a: PhasePoint, b: PhasePoint, mc: MetricConstants, gamma: float) -> float:
    """rho = f(min(Delta, D_K) + eps r_l); reduces to r_l when R = 0."""
    val = rho_from_diff(a.x - b.x, a.v - b.v, mc)
    return float(val) if np.ndim(val) == 0 else val


def _rate_em_formula(fp, eps, kappa, gamma, scriptE, alpha, c_hat):
    return min(
        fp * eps * kappa / gamma / 8.0 * scriptE,
        fp * eps * gamma / 16.0 * scriptE,
        fp * gamma / 8.0,
        fp * gamma * alpha / 2.0,
        9.0 * c_hat / 640.0,
        c_hat / (32.0 * (4.0 * alpha + 1.0)),
    )


def _rate_bu_formula(fp, eps, kappa, gamma, h, scriptE, alpha, c_hat):
    eta = math.exp(-gamma * h)
    return min(
        fp * 7.0 * eps * kappa / gamma / 96.0 * scriptE,
        fp * 7.0 * eps * gamma / 256.0 * scriptE,
        fp * eta * gamma / 16.0,
        fp * eta * gamma * alpha / 4.0,
        9.0 * c_hat / 640.0,
        c_hat / (32.0 * (4.0 * alpha + 1.0)),
    )


def ubu_prefactor(alpha: float, L_K: float, gamma: float, h: float) -> float:
    """Transient inflation factor for UBU relative to the BU contraction."""
    return (1.0 + gamma * h / 16.0) * max(
        (1.0 + alpha * gamma * h / 2.0) ** 2,
        1.0 + gamma * h * max(1.0, L_K / gamma**2),
    )


def compute_constants(
    pot: PotentialModel, gamma: float, h: float, scheme: str = "BU"
) -> MetricConstants:
    """Derive the full constant record for a potential and (gamma, h) pair.

    Validity of the scheme conditions on gamma and h is reported through
    ``flags`` instead of refusing; rates are computed for both EM and BU
    regardless of the ``scheme`` tag.  For a matrix split the reduced
    optimizer brackets z^T K z between its eigenvalue bounds and keeps the
    conservative endpoint, flagged in ``flags['dk_r1_interval']``.
    """
    if gamma <= 0 or h <= 0:
        raise ParameterError("gamma and h must be positive")
    c = pot.constants
    tau = tau_constant(c.kappa, gamma)
    alpha = alpha_constant(c.L, gamma)
    epsilon = epsilon_constant(alpha, c.L_K, gamma)
    scriptE = script_e_constant(c.kappa, alpha, gamma)
    scriptR = script_r_constant(tau, c.L_G, c.R, gamma)

    flags: dict = {}
    if scriptR == 0.0:
        D_K, R1 = 0.0, 0.0
        table = _IDENTITY_TABLE
        fprime_R1, log_fprime_R1 = 1.0, 0.0
        c_hat, log_c_hat = math.inf, math.inf
        # strongly convex case: contraction comes from the r_l step bound alone
        rate_em = gamma * min(c.kappa / gamma**2 / 8.0, 1.0 / 16.0)
        rate_bu = min(c.kappa / gamma / 24.0, gamma / 64.0)
    else:
        if pot.split.mode == "scalar":
            D_K, R1 = solve_DK_R1(c.kappa, gamma, alpha, epsilon, tau, scriptR)
        else:
            hi = solve_DK_R1(c.kappa, gamma, alpha, epsilon, tau, scriptR, k_quad=c.kappa)
            lo = solve_DK_R1(c.kappa, gamma, alpha, epsilon, tau, scriptR, k_quad=c.L_K)
            flags["dk_r1_interval"] = {"low": lo, "high": hi}
            D_K, R1 = hi
        a = 64.0 * alpha * gamma**2
        table = _tabulate_f(R1, a)
        log_fprime_R1 = -a * R1 * R1 + math.log(0.5)
        fprime_R1 = math.exp(log_fprime_R1) if log_fprime_R1 > -745.0 else 0.0
        log_c_hat = -math.log(gamma) - table.log_I_R1
        c_hat = math.exp(log_c_hat) if log_c_hat > -745.0 else 0.0
        rate_em = _rate_em_formula(fprime_R1, epsilon, c.kappa, gamma, scriptE, alpha, c_hat)
        rate_bu = _rate_bu_formula(fprime_R1, epsilon, c.kappa, gamma, h, scriptE, alpha, c_hat)
    flags["fprime_underflow"] = fprime_R1 == 0.0

    C_ubu = ubu_prefactor(alpha, c.L_K, gamma, h)
    denom = epsilon * min(math.sqrt(2.0 * c.kappa), 1.0)
    with np.errstate(divide="ignore"):
        inv_fp = 1.0 / fprime_R1 if fprime_R1 > 0 else math.inf
    M_equiv = inv_fp * 2.0 * max(gamma * (1.0 + alpha), 1.0) / denom
    N_equiv = inv_fp * gamma / (epsilon * min(math.sqrt(c.kappa), math.sqrt(0.5)))

    flags["gamma_cond_em"] = gamma_condition_em(c.L_G, c.kappa, gamma)
    flags["h_cond_em"] = step_condition_em(c.L, c.L_K, gamma, h, R1)
    flags["gamma_cond_bu"] = gamma_condition_bu(c.L_G, c.kappa, gamma)
    flags["h_cond_bu"] = step_condition_bu(c.L, c.L_K, gamma, h, R1)

    return MetricConstants(
        kappa=c.kappa,
        L=c.L,
        L_G=c.L_G,
        L_K=c.L_K,
        R=c.R,
        gamma=float(gamma),
        h=float(h),
        scheme=scheme,
        tau=tau,
        alpha=alpha,
        epsilon=epsilon,
        script_E=scriptE,
        script_R=scriptR,
        D_K=D_K,
        R1=R1,
        c_hat=c_hat,
        log_c_hat=log_c_hat,
        f_table=table,
        fprime_R1=fprime_R1,
        log_fprime_R1=log_fprime_R1,
        rate_em=rate_em,
        rate_bu=rate_bu,
        C_ubu=C_ubu,
        M_equiv=M_equiv,
        N_equiv=N_equiv,
        K_mode=pot.split,
        flags=flags,
    )
