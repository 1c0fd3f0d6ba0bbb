"""One-step maps for the EM, BU and UBU discretizations.

The splitting schemes integrate the gradient kick

    B: (x, v) -> (x, v - h grad U(x))

and the free-flight-plus-Ornstein-Uhlenbeck part

    U: x' = x + (1-eta)/gamma v + sqrt(2/gamma) (Z1 - Z2)
       v' = eta v + sqrt(2 gamma) Z2,        eta = exp(-gamma h),

exactly in law, where (Z1, Z2) are the correlated Gaussian increments
equivalent to int_0^h dB_s and int_0^h e^{-(h-s) gamma} dB_s.  BU composes a
full B step then a full U step; UBU is a half U, full B, half U sandwich
consuming four fresh standard normals per step.  Every scheme evaluates the
gradient exactly once per step.

All maps broadcast over leading axes, so the same code advances a single
chain (shape ``(d,)``) or a replica ensemble (shape ``(n, d)``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from kinecoup.errors import NumericError, ParameterError
from kinecoup.potentials import PotentialModel


@dataclass(frozen=True)
class PhasePoint:
    """Position/velocity pair of one chain."""

    x: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        v = np.asarray(self.v, dtype=float)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "v", v)
        if x.shape != v.shape:
            raise ParameterError("x and v must share their shape")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
            raise ParameterError("phase-point entries must be finite")

    @property
    def d(self) -> int:
        return self.x.shape[-1]


@dataclass(frozen=True)
class SchemeConfig:
    """Scheme tag plus step size and friction.

    ``eta`` is always recomputed from ``h`` and ``gamma``; it is never stored,
    so it cannot go stale.
    """

    scheme: str
    h: float
    gamma: float

    def __post_init__(self):
        if self.scheme not in ("EM", "BU", "UBU"):
            raise ParameterError(f"unknown scheme {self.scheme!r}")
        if self.h <= 0:
            raise ParameterError("step size h must be positive")
        if self.gamma <= 0:
            raise ParameterError("friction gamma must be positive")

    @property
    def eta(self) -> float:
        return math.exp(-self.gamma * self.h)


@dataclass(frozen=True)
class NoiseDraw:
    """Standard-normal draws consumed by one step (xi3/xi4 only for UBU)."""

    xi1: np.ndarray
    xi2: np.ndarray
    xi3: Optional[np.ndarray] = None
    xi4: Optional[np.ndarray] = None


class _ClampDiagnostics:
    """Counts floating-point clamps of the Z2 mixing radicand."""

    def __init__(self):
        self.count = 0

    def record(self, n: int = 1):
        self.count += n

    def reset(self):
        self.count = 0


OU_CLAMP_DIAGNOSTICS = _ClampDiagnostics()


def ou_coefficients(h: float, gamma: float) -> dict:
    """Coefficients of the exact OU update over step ``h``.

    Returns eta, the drift weight (1-eta)/gamma, and the coefficients that
    map (xi1, xi2) to (Z1, Z2).  The xi2 radicand ``1 - 2 tanh(u/2)/u`` with
    ``u = gamma h`` cancels catastrophically for small u, so below u = 1e-2 it
    is evaluated by its series ``u^2/12 - u^4/120 + 17 u^6/20160``; any
    remaining negative excursion is clamped to [0, 1] and counted.
    """
    if h <= 0 or gamma <= 0:
        raise ParameterError("h and gamma must be positive")
    u = gamma * h
    eta = math.exp(-u)
    one_minus_eta = -math.expm1(-u)
    var_z2 = -math.expm1(-2.0 * u) / (2.0 * gamma)
    if u < 1e-2:
        radicand = u * u / 12.0 - u**4 / 120.0 + 17.0 * u**6 / 20160.0
    else:
        radicand = 1.0 - 2.0 * math.tanh(0.5 * u) / u
    if radicand < 0.0 or radicand > 1.0:
        OU_CLAMP_DIAGNOSTICS.record()
        radicand = min(max(radicand, 0.0), 1.0)
    sd_z2 = math.sqrt(var_z2)
    return {
        "eta": eta,
        "drift": one_minus_eta / gamma,
        "z1_xi1": math.sqrt(h),
        "z2_xi1": sd_z2 * math.sqrt(1.0 - radicand),
        "z2_xi2": sd_z2 * math.sqrt(radicand),
    }


def sample_ou_noise(h: float, gamma: float, xi1: np.ndarray, xi2: np.ndarray):
    """Map independent standard normals to the correlated pair (Z1, Z2).

    Per coordinate, Var(Z1) = h, Var(Z2) = (1 - eta^2)/(2 gamma) and
    Cov(Z1, Z2) = (1 - eta)/gamma, matching the Ito isometry of the
    underlying stochastic integrals.
    """
    c = ou_coefficients(h, gamma)
    z1 = c["z1_xi1"] * xi1
    z2 = c["z2_xi1"] * xi1 + c["z2_xi2"] * xi2
    return z1, z2


def _u_kernel(x, v, h, gamma, xi1, xi2):
    c = ou_coefficients(h, gamma)
    z1 = c["z1_xi1"] * xi1
    z2 = c["z2_xi1"] * xi1 + c["z2_xi2"] * xi2
    x_new = x + c["drift"] * v + math.sqrt(2.0 / gamma) * (z1 - z2)
    v_new = c["eta"] * v + math.sqrt(2.0 * gamma) * z2
    return x_new, v_new


def _grad_checked(pot: PotentialModel, x, step: Optional[int] = None):
    g = pot.gradient(x)
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient", state=x, step=step)
    return g


def _finite_point(x, v) -> PhasePoint:
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
        raise NumericError("step produced non-finite coordinates", state=(x, v))
    return PhasePoint(x, v)


def _b_kernel(x, v, grad_value, h):
    return x, v - h * grad_value


def _em_kernel(x, v, grad_value, h, gamma, xi):
    x_new = x + h * v
    v_new = v - h * grad_value - h * gamma * v + math.sqrt(2.0 * gamma * h) * xi
    return x_new, v_new


def b_map(p: PhasePoint, pot: PotentialModel, h: float) -> PhasePoint:
    """Gradient kick (x, v) -> (x, v - h grad U(x))."""
    with np.errstate(over="ignore", invalid="ignore"):
        x, v = _b_kernel(p.x, p.v, _grad_checked(pot, p.x), h)
    return _finite_point(x, v)


def u_map(p: PhasePoint, h: float, gamma: float, xi1: np.ndarray, xi2: np.ndarray) -> PhasePoint:
    """Exact free-flight-plus-OU update over step ``h``."""
    with np.errstate(over="ignore", invalid="ignore"):
        x, v = _u_kernel(p.x, p.v, h, gamma, xi1, xi2)
    return _finite_point(x, v)


def em_step(p: PhasePoint, pot: PotentialModel, cfg: SchemeConfig, xi: np.ndarray) -> PhasePoint:
    """One explicit Euler step; a single gradient evaluation."""
    if cfg.scheme != "EM":
        raise ParameterError("em_step requires cfg.scheme == 'EM'")
    with np.errstate(over="ignore", invalid="ignore"):
        x, v = _em_kernel(p.x, p.v, _grad_checked(pot, p.x), cfg.h, cfg.gamma, xi)
    return _finite_point(x, v)


def bu_step(p: PhasePoint, pot: PotentialModel, cfg: SchemeConfig, noise: NoiseDraw) -> PhasePoint:
    """One BU step: full B kick, then full U step; one gradient evaluation."""
    if cfg.scheme != "BU":
        raise ParameterError("bu_step requires cfg.scheme == 'BU'")
    with np.errstate(over="ignore", invalid="ignore"):
        x, v = _b_kernel(p.x, p.v, _grad_checked(pot, p.x), cfg.h)
        x, v = _u_kernel(x, v, cfg.h, cfg.gamma, noise.xi1, noise.xi2)
    return _finite_point(x, v)


def ubu_step(p: PhasePoint, pot: PotentialModel, cfg: SchemeConfig, noise: NoiseDraw) -> PhasePoint:
    """One UBU step: half U, full B, half U; one gradient evaluation."""
    if cfg.scheme != "UBU":
        raise ParameterError("ubu_step requires cfg.scheme == 'UBU'")
    if noise.xi3 is None or noise.xi4 is None:
        raise ParameterError("UBU consumes four fresh normals per step")
    half = 0.5 * cfg.h
    with np.errstate(over="ignore", invalid="ignore"):
        x, v = _u_kernel(p.x, p.v, half, cfg.gamma, noise.xi1, noise.xi2)
        x, v = _b_kernel(x, v, _grad_checked(pot, x), cfg.h)
        x, v = _u_kernel(x, v, half, cfg.gamma, noise.xi3, noise.xi4)
    return _finite_point(x, v)


def draw_noise(cfg: SchemeConfig, rng: np.random.Generator, shape=()) -> NoiseDraw:
    """Draw the normals one step of the configured scheme consumes.

    EM uses xi1 only; BU uses xi1, xi2; UBU uses all four.  The draw order is
    fixed so traces are reproducible from the seed alone.
    """
    size = tuple(shape)
    if cfg.scheme == "EM":
        return NoiseDraw(xi1=rng.standard_normal(size), xi2=np.zeros(size))
    if cfg.scheme == "BU":
        return NoiseDraw(xi1=rng.standard_normal(size), xi2=rng.standard_normal(size))
    return NoiseDraw(
        xi1=rng.standard_normal(size),
        xi2=rng.standard_normal(size),
        xi3=rng.standard_normal(size),
        xi4=rng.standard_normal(size),
    )


def step(p: PhasePoint, pot: PotentialModel, cfg: SchemeConfig, noise: NoiseDraw) -> PhasePoint:
    """Advance one step of whichever scheme ``cfg`` selects."""
    if cfg.scheme == "EM":
        return em_step(p, pot, cfg, noise.xi1)
    if cfg.scheme == "BU":
        return bu_step(p, pot, cfg, noise)
    return ubu_step(p, pot, cfg, noise)


def run_chain(
    p0: PhasePoint,
    pot: PotentialModel,
    cfg: SchemeConfig,
    n_steps: int,
    rng: np.random.Generator,
    stride: int = 1,
) -> list[PhasePoint]:
    """Iterate the configured scheme, recording every ``stride``-th state.

    The returned list always starts with ``p0`` and ends with the final
    state.  Aborts with the step index if any coordinate goes non-finite.
    """
    if n_steps < 0:
        raise ParameterError("n_steps must be >= 0")
    if stride < 1:
        raise ParameterError("stride must be >= 1")
    shape = np.shape(p0.x)
    out = [p0]
    p = p0
    for k in range(n_steps):
        noise = draw_noise(cfg, rng, shape)
        try:
            p = step(p, pot, cfg, noise)
        except NumericError as err:
            raise NumericError(str(err), state=err.state, step=k) from None
        if (k + 1) % stride == 0 or k == n_steps - 1:
            out.append(p)
    return out
