"""Synchronous and reflection-maximal couplings of two chains.

Two copies of a scheme are coupled through their driving normals.  In the
synchronous branch both chains consume identical draws, so the noise cancels
in the difference process.  In the contractive branch the first chain draws
xi and the second chain's draw is either

    xi' = xi + beta*q          (maximal overlap; accepted with probability
                                min(1, phi(e.xi + beta|q|) / phi(e.xi)))
    xi' = xi - 2 (e.xi) e      (reflection at the hyperplane normal to q)

with q = z + gamma^-1 w, e = q/|q| and beta = 1/sqrt(2 gamma^-1 h).  The
accepted branch cancels q's noise contribution exactly; the marginal law of
xi' stays standard normal.

The switching rule selects synchronous noise when the pair is far apart in
the sense D_K + eps*r_l <= r_s, and the contractive coupling otherwise; a
pure-reflection mode (contractive whenever q != 0) and a pure-synchronous
mode are also provided, matching what decay-curve experiments compare.

For the BU scheme only the first normal is coupled and the second is shared;
for UBU the pair entering the first half U step plays the coupled role (with
beta built from the half step, so the accepted branch still cancels q) and
the remaining normals are shared.

All kernels broadcast over leading axes: a single pair uses shape ``(d,)``
and replica ensembles use ``(n, d)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from kinecoup.errors import NumericError, ParameterError
from kinecoup.integrators import PhasePoint, SchemeConfig, _b_kernel, _em_kernel, _u_kernel
from kinecoup.metric import MetricConstants, rho_from_diff, rl_squared, rs_value
from kinecoup.potentials import PotentialModel

BRANCH_SYNCHRONOUS = 0
BRANCH_MAXIMAL_ACCEPT = 1
BRANCH_REFLECT = 2
BRANCH_NAMES = {0: "synchronous", 1: "maximal-accept", 2: "reflect"}

COALESCENCE_THRESHOLD = 1e-12

_MODES = ("synchronous", "reflection", "switching")


@dataclass(frozen=True)
class CoupledState:
    """A pair of chains; difference quantities are always recomputed."""

    a: PhasePoint
    b: PhasePoint

    def __post_init__(self):
        if self.a.x.shape != self.b.x.shape:
            raise ParameterError("coupled chains must share their dimension")

    @property
    def z(self) -> np.ndarray:
        return self.a.x - self.b.x

    @property
    def w(self) -> np.ndarray:
        return self.a.v - self.b.v

    def q(self, gamma: float) -> np.ndarray:
        return self.z + self.w / gamma


@dataclass(frozen=True)
class CouplingDecision:
    """Which branch one coupled step took."""

    branch: str
    u: Optional[float]
    acceptance_ratio: float


def switching_rule(cs: CoupledState, mc: MetricConstants) -> str:
    """Return "far" (synchronous noise) iff D_K + eps*r_l <= r_s."""
    z, w = cs.z, cs.w
    rl = math.sqrt(float(rl_squared(z, w, mc.gamma, mc.tau, mc.K_mode)))
    rs = float(rs_value(z, w, mc.gamma, mc.alpha))
    return "far" if mc.D_K + mc.epsilon * rl <= rs else "near"


def reflection_maximal_draw(q: np.ndarray, beta: float, rng: np.random.Generator):
    """Draw (xi, xi') from the reflection-maximal coupling for offset q != 0.

    Returns the pair plus the decision record.  The expected norm identity
    E|beta*q + (xi - xi')| = beta*|q| holds, and P(xi - xi' = -beta*q) equals
    the overlap 2*Phi_std(-beta*|q|/2) of the two shifted normal laws.
    """
    q = np.asarray(q, dtype=float)
    qn = float(np.linalg.norm(q))
    if qn == 0.0:
        raise ParameterError("q must be nonzero; q = 0 couples synchronously")
    if beta <= 0:
        raise ParameterError("beta must be positive")
    xi = rng.standard_normal(q.shape)
    u = float(rng.random())
    xi_prime, accept, ratio = _coupled_normal(q, qn, beta, xi, u)
    decision = CouplingDecision(
        branch="maximal-accept" if accept else "reflect",
        u=u,
        acceptance_ratio=float(ratio),
    )
    return xi, xi_prime, decision


def _coupled_normal(q, qn, beta, xi, u):
    """Core accept/reflect transform; broadcasts over leading axes."""
    qn = np.asarray(qn, dtype=float)
    safe = np.where(qn > 0, qn, 1.0)
    e = q / safe[..., None]
    qhat_norm = beta * qn
    dot = np.sum(e * xi, axis=-1)
    log_ratio = -qhat_norm * dot - 0.5 * qhat_norm**2
    with np.errstate(over="ignore"):
        accept = np.log(u) <= log_ratio
    xi_prime = np.where(
        accept[..., None], xi + beta * q, xi - 2.0 * dot[..., None] * e
    )
    ratio = np.exp(np.minimum(log_ratio, 0.0))
    return xi_prime, accept, ratio


def _branch_mask(z, w, mc: MetricConstants, mode: str, q, forced_sync):
    """Per-replica branch selection; True entries couple synchronously."""
    if mode == "synchronous" or (mode == "switching" and mc.strongly_convex):
        # with D_K = 0 the rule eps*r_l <= r_s holds identically (the
        # distances are equivalent with 2*eps*r_l <= r_s), so the switching
        # coupling degenerates to an always-synchronous one
        qn = np.zeros(q.shape[:-1])
        return np.broadcast_to(True, q.shape[:-1]), qn
    qn = np.linalg.norm(q, axis=-1)
    if mode == "reflection":
        sync = qn == 0.0
    else:
        rl = np.sqrt(rl_squared(z, w, mc.gamma, mc.tau, mc.K_mode))
        rs = rs_value(z, w, mc.gamma, mc.alpha)
        sync = (mc.D_K + mc.epsilon * rl <= rs) | (qn == 0.0)
    if forced_sync is not None:
        sync = sync | forced_sync
    return sync, qn


def coupled_step_arrays(
    xa,
    va,
    xb,
    vb,
    pot: PotentialModel,
    cfg: SchemeConfig,
    mc: MetricConstants,
    rng: np.random.Generator,
    mode: str = "switching",
    forced_sync=None,
):
    """Advance a batch of coupled pairs one step of the configured scheme.

    Returns ``(xa, va, xb, vb, branch, u, ratio)`` with per-replica branch
    codes.  A fixed number of draws is consumed per step regardless of the
    branches taken, so streams stay aligned across configurations.
    """
    if mode not in _MODES:
        raise ParameterError(f"unknown coupling mode {mode!r}")
    h, gamma = cfg.h, cfg.gamma
    rep_shape = xa.shape[:-1]
    z, w = xa - xb, va - vb
    q = z + w / gamma
    sync, qn = _branch_mask(z, w, mc, mode, q, forced_sync)

    # coupled normal: full-step beta for EM/BU, half-step beta for UBU since
    # only the first half U step carries the coupled draw into q
    h_eff = 0.5 * h if cfg.scheme == "UBU" else h
    beta = 1.0 / math.sqrt(2.0 * h_eff / gamma)
    xi1 = rng.standard_normal(rep_shape + (pot.dimension,))
    u = rng.random(rep_shape)
    if np.all(sync):
        xi1_prime = xi1
        branch = np.broadcast_to(np.int8(BRANCH_SYNCHRONOUS), rep_shape)
        ratio = np.ones(rep_shape)
    else:
        xi1_prime, accept, ratio = _coupled_normal(q, np.where(sync, 1.0, qn), beta, xi1, u)
        xi1_prime = np.where(sync[..., None], xi1, xi1_prime)
        branch = np.where(
            sync, BRANCH_SYNCHRONOUS, np.where(accept, BRANCH_MAXIMAL_ACCEPT, BRANCH_REFLECT)
        )
        ratio = np.where(sync, 1.0, ratio)

    # overflow of a diverging replica is handled by the caller's post-step
    # finiteness scan, not by raising mid-batch
    with np.errstate(over="ignore", invalid="ignore"):
        if cfg.scheme == "EM":
            ga = pot.gradient(xa)
            gb = pot.gradient(xb)
            xa, va = _em_kernel(xa, va, ga, h, gamma, xi1)
            xb, vb = _em_kernel(xb, vb, gb, h, gamma, xi1_prime)
        elif cfg.scheme == "BU":
            xi2 = rng.standard_normal(rep_shape + (pot.dimension,))
            ga = pot.gradient(xa)
            gb = pot.gradient(xb)
            xa, va = _b_kernel(xa, va, ga, h)
            xb, vb = _b_kernel(xb, vb, gb, h)
            xa, va = _u_kernel(xa, va, h, gamma, xi1, xi2)
            xb, vb = _u_kernel(xb, vb, h, gamma, xi1_prime, xi2)
        else:  # UBU
            xi2 = rng.standard_normal(rep_shape + (pot.dimension,))
            xi3 = rng.standard_normal(rep_shape + (pot.dimension,))
            xi4 = rng.standard_normal(rep_shape + (pot.dimension,))
            half = 0.5 * h
            xa, va = _u_kernel(xa, va, half, gamma, xi1, xi2)
            xb, vb = _u_kernel(xb, vb, half, gamma, xi1_prime, xi2)
            ga = pot.gradient(xa)
            gb = pot.gradient(xb)
            xa, va = _b_kernel(xa, va, ga, h)
            xb, vb = _b_kernel(xb, vb, gb, h)
            xa, va = _u_kernel(xa, va, half, gamma, xi3, xi4)
            xb, vb = _u_kernel(xb, vb, half, gamma, xi3, xi4)
    return xa, va, xb, vb, branch, u, ratio


def _coupled_step_single(cs, pot, cfg, mc, rng, mode, scheme):
    if cfg.scheme != scheme:
        raise ParameterError(f"cfg.scheme must be {scheme!r}")
    xa, va, xb, vb, branch, u, ratio = coupled_step_arrays(
        cs.a.x, cs.a.v, cs.b.x, cs.b.v, pot, cfg, mc, rng, mode=mode
    )
    decision = CouplingDecision(
        branch=BRANCH_NAMES[int(branch)], u=float(u), acceptance_ratio=float(ratio)
    )
    return CoupledState(PhasePoint(xa, va), PhasePoint(xb, vb)), decision


def coupled_em_step(cs, pot, cfg, mc, rng, mode: str = "switching"):
    """One coupled Euler step; both chains advance with their own draw."""
    return _coupled_step_single(cs, pot, cfg, mc, rng, mode, "EM")


def coupled_bu_step(cs, pot, cfg, mc, rng, mode: str = "switching"):
    """One coupled BU step; the second normal is always shared."""
    return _coupled_step_single(cs, pot, cfg, mc, rng, mode, "BU")


def coupled_ubu_step(cs, pot, cfg, mc, rng, mode: str = "switching"):
    """One coupled UBU step; only the first half-step pair is coupled."""
    return _coupled_step_single(cs, pot, cfg, mc, rng, mode, "UBU")


@dataclass
class CoupledTrace:
    """Per-step record of a coupled pair (index 0 is the initial state)."""

    step: np.ndarray
    t: np.ndarray
    dist_euclid: np.ndarray
    r_l: np.ndarray
    r_s: np.ndarray
    rho: np.ndarray
    branch: np.ndarray  # int codes, BRANCH_NAMES maps to labels
    coalesced: np.ndarray

    def branch_names(self) -> list[str]:
        return [BRANCH_NAMES[int(b)] for b in self.branch]


def write_coupled_trace_csv(path, trace: CoupledTrace):
    """Write one pair's trace with the fixed 8-column schema, atomically."""
    import os
    from pathlib import Path

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        fh.write("step,t,dist_euclid,r_l,r_s,rho,branch,coalesced\n")
        names = trace.branch_names()
        for i in range(len(trace.step)):
            fh.write(
                f"{int(trace.step[i])},{trace.t[i]:.12g},{trace.dist_euclid[i]:.12g},"
                f"{trace.r_l[i]:.12g},{trace.r_s[i]:.12g},{trace.rho[i]:.12g},"
                f"{names[i]},{int(trace.coalesced[i])}\n"
            )
    os.replace(tmp, path)
    return path


def _distances(z, w, mc):
    rl = np.sqrt(rl_squared(z, w, mc.gamma, mc.tau, mc.K_mode))
    rs = rs_value(z, w, mc.gamma, mc.alpha)
    rr = rho_from_diff(z, w, mc)
    eu = np.sqrt(np.sum(z * z, axis=-1) + np.sum(w * w, axis=-1))
    return eu, rl, rs, rr


def run_coupled(
    cs0: CoupledState,
    pot: PotentialModel,
    cfg: SchemeConfig,
    mc: MetricConstants,
    n_steps: int,
    rng: np.random.Generator,
    mode: str = "switching",
    coalescence_threshold: float = COALESCENCE_THRESHOLD,
) -> CoupledTrace:
    """Advance one coupled pair, recording distances and branches per step.

    Once the Euclidean distance falls below the coalescence threshold the
    second chain is snapped onto the first and the pair is forced synchronous
    forever after, so coalescence is absorbing.
    """
    if n_steps < 0:
        raise ParameterError("n_steps must be >= 0")
    xa, va = cs0.a.x.astype(float), cs0.a.v.astype(float)
    xb, vb = cs0.b.x.astype(float), cs0.b.v.astype(float)
    n_rec = n_steps + 1
    eu = np.empty(n_rec)
    rl = np.empty(n_rec)
    rs = np.empty(n_rec)
    rr = np.empty(n_rec)
    branch = np.zeros(n_rec, dtype=np.int8)
    coal = np.zeros(n_rec, dtype=bool)
    eu[0], rl[0], rs[0], rr[0] = _distances(xa - xb, va - vb, mc)
    coalesced = eu[0] < coalescence_threshold
    coal[0] = coalesced
    forced = np.asarray(coalesced)
    for k in range(n_steps):
        if coalesced:
            xb, vb = xa, va
        xa, va, xb, vb, br, _, _ = coupled_step_arrays(
            xa, va, xb, vb, pot, cfg, mc, rng, mode=mode, forced_sync=forced
        )
        if not (np.all(np.isfinite(xa)) and np.all(np.isfinite(va))
                and np.all(np.isfinite(xb)) and np.all(np.isfinite(vb))):
            raise NumericError("coupled pair blew up", state=(xa, va, xb, vb), step=k)
        eu[k + 1], rl[k + 1], rs[k + 1], rr[k + 1] = _distances(xa - xb, va - vb, mc)
        branch[k + 1] = int(br)
        if not coalesced and eu[k + 1] < coalescence_threshold:
            coalesced = True
            forced = np.asarray(True)
            xb, vb = xa, va
            eu[k + 1], rl[k + 1], rs[k + 1], rr[k + 1] = 0.0, 0.0, 0.0, 0.0
        coal[k + 1] = coalesced
    steps = np.arange(n_rec)
    return CoupledTrace(
        step=steps,
        t=steps * cfg.h,
        dist_euclid=eu,
        r_l=rl,
        r_s=rs,
        rho=rr,
        branch=branch,
        coalesced=coal,
    )
