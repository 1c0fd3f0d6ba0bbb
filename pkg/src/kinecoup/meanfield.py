"""Interacting N-particle potentials and particlewise distances.

The N-particle potential on R^{dN} combines a confining potential V acting on
each particle with a pairwise interaction W:

    U(x) = sum_i ( V(x^i) + (1/N) sum_{j != i} W(x^i - x^j) ).

Contraction results for such systems are uniform in N provided the Lipschitz
constant of grad W is small next to the strong-convexity constant of V; the
``smallness`` flag records whether the configured threshold holds.  The
particlewise distances rho_N and ell1_N average the single-particle metric
over particle blocks, so they are invariant under relabeling both states by
the same permutation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from kinecoup.errors import ParameterError
from kinecoup.integrators import PhasePoint
from kinecoup.metric import MetricConstants, rho_from_diff
from kinecoup.potentials import PotentialModel, QuadraticSplit, RegularityConstants


@dataclass(frozen=True)
class Interaction:
    """Pairwise interaction W with its gradient and Lipschitz bound."""

    energy: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    L_W: float
    symmetric: bool = True
    label: str = "interaction"


def harmonic_interaction(lam: float) -> Interaction:
    """W(x) = (lam/2)|x|^2, even, with grad W Lipschitz constant lam."""
    if lam < 0:
        raise ParameterError("lam must be nonnegative")

    def energy(x):
        return 0.5 * lam * np.sum(x * x, axis=-1)

    def gradient(x):
        return lam * x

    return Interaction(energy=energy, gradient=gradient, L_W=float(lam), label="harmonic")


def morse_interaction(depth: float, steepness: float, rest: float) -> Interaction:
    """Radial Morse pair potential W(x) = depth*(1 - exp(-steepness*(|x|-rest)))^2.

    Even by construction.  The Lipschitz bound 2*depth*steepness^2 covers the
    radial second derivative; the tangential curvature |W'(s)|/s is included
    through an extra factor estimated at the rest length.
    """
    if depth <= 0 or steepness <= 0 or rest < 0:
        raise ParameterError("depth and steepness must be positive, rest nonnegative")

    def energy(x):
        s = np.linalg.norm(x, axis=-1)
        return depth * (1.0 - np.exp(-steepness * (s - rest))) ** 2

    def gradient(x):
        s = np.linalg.norm(x, axis=-1, keepdims=True)
        safe = np.where(s > 0, s, 1.0)
        g = np.exp(-steepness * (s - rest))
        radial = 2.0 * depth * steepness * (1.0 - g) * g
        return radial * x / safe

    L_W = 2.0 * depth * steepness**2 * max(1.0, 1.0 + steepness * rest)
    return Interaction(energy=energy, gradient=gradient, L_W=L_W, label="morse")


@dataclass(frozen=True)
class MeanFieldSpec:
    """N particles with confining potential V and pairwise interaction W."""

    N: int
    confining: PotentialModel
    interaction: Interaction
    smallness_factor: float = 0.5

    def __post_init__(self):
        if self.N < 1:
            raise ParameterError("N must be >= 1")
        if self.smallness_factor <= 0:
            raise ParameterError("smallness_factor must be positive")

    @property
    def smallness_ok(self) -> bool:
        """Whether L_W is small next to kappa, per the configured factor."""
        return self.interaction.L_W < self.confining.constants.kappa * self.smallness_factor


def make_meanfield(spec: MeanFieldSpec) -> PotentialModel:
    """Build the N-particle potential on R^{dN}.

    Gradient assembly is a direct O(N^2 d) pair sum with a fixed summation
    order, so results do not depend on how particles are scheduled.  The
    per-particle regularity constants follow the perturbation reading:
    kappa_eff = kappa_V - 2 L_W (the interaction can erode at most 2 L_W of
    convexity per particle), L and L_G grow by 2 L_W.  This is a documented
    heuristic; it requires kappa_V > 2 L_W.
    """
    N = spec.N
    V = spec.confining
    W = spec.interaction
    d = V.dimension
    kappa_eff = V.constants.kappa - 2.0 * W.L_W
    if kappa_eff <= 0:
        raise ParameterError("interaction too strong: kappa_V - 2 L_W must stay positive")

    def energy(x):
        blocks = _as_blocks(x, N, d)
        conf = np.sum(V.energy_fn(blocks), axis=-1)
        if N == 1:
            return conf
        diff = blocks[..., :, None, :] - blocks[..., None, :, :]
        pair = W.energy(diff)
        idx = np.arange(N)
        pair[..., idx, idx] = 0.0
        return conf + np.sum(pair, axis=(-2, -1)) / N

    def gradient(x):
        blocks = _as_blocks(x, N, d)
        grad = V.gradient_fn(blocks)
        if N > 1:
            diff = blocks[..., :, None, :] - blocks[..., None, :, :]
            gw = W.gradient(diff)
            idx = np.arange(N)
            gw[..., idx, idx, :] = 0.0
            if W.symmetric:
                # grad W is odd for even W: the two chain-rule terms coincide
                inter = 2.0 * np.sum(gw, axis=-2)
            else:
                inter = np.sum(gw, axis=-2) - np.sum(gw, axis=-3)
            grad = grad + inter / N
        return grad.reshape(x.shape)

    constants = RegularityConstants(
        kappa=kappa_eff,
        L=V.constants.L + 2.0 * W.L_W,
        R=V.constants.R,
        L_G=V.constants.L_G + 2.0 * W.L_W,
        L_K=kappa_eff,
        dimension=N * d,
    )
    return PotentialModel(
        dimension=N * d,
        energy_fn=energy,
        gradient_fn=gradient,
        constants=constants,
        split=QuadraticSplit("scalar", kappa_eff),
        label=f"meanfield[{V.label}+{W.label},N={N}]",
    )


def _as_blocks(x: np.ndarray, N: int, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != N * d:
        raise ParameterError(f"state length {x.shape[-1]} is not N*d = {N * d}")
    return x.reshape(x.shape[:-1] + (N, d))


def effective_particle_constants(spec: MeanFieldSpec) -> PotentialModel:
    """Single-particle surrogate carrying the interaction-eroded constants.

    Used to build the per-particle metric entering rho_N; the surrogate is a
    Gaussian with the effective convexity kappa_V - 2 L_W.
    """
    from kinecoup.potentials import make_gaussian

    kappa_eff = spec.confining.constants.kappa - 2.0 * spec.interaction.L_W
    if kappa_eff <= 0:
        raise ParameterError("interaction too strong: kappa_V - 2 L_W must stay positive")
    return make_gaussian(spec.confining.dimension, kappa_eff)


def rho_N(a: PhasePoint, b: PhasePoint, mc: MetricConstants, gamma: float, n_particles: int):
    """Particle-averaged metric (1/N) sum_i rho((x^i, v^i), (x'^i, v'^i)).

    ``mc`` holds the per-particle constants built from the confining
    potential's effective regularity.
    """
    del gamma  # fixed inside mc; kept for signature symmetry with rho
    N = n_particles
    d = a.x.shape[-1] // N
    z = _as_blocks(a.x - b.x, N, d)
    w = _as_blocks(a.v - b.v, N, d)
    return float(np.mean(rho_from_diff(z, w, mc), axis=-1))


def ell1_N(a: PhasePoint, b: PhasePoint, n_particles: int):
    """Particle-averaged Euclidean distance (1/N) sum_i |(x,v)^i - (x',v')^i|."""
    N = n_particles
    d = a.x.shape[-1] // N
    z = _as_blocks(a.x - b.x, N, d)
    w = _as_blocks(a.v - b.v, N, d)
    per = np.sqrt(np.sum(z * z, axis=-1) + np.sum(w * w, axis=-1))
    return float(np.mean(per, axis=-1))
