"""Target potentials with gradients and declared regularity constants.

Every potential carries the constants used by the metric construction:
``kappa`` (strong convexity outside a ball of radius ``R``), ``L`` (gradient
Lipschitz bound), the quadratic split ``K`` with its Lipschitz bound ``L_K``,
and ``L_G`` for the non-quadratic remainder.  For potentials that are not
globally gradient-Lipschitz (banana, Gaussian mixtures) the constants are
estimated on a configured box by sampling difference quotients of the
gradient; they are experiment metadata, not global guarantees.

Energies and gradients are vectorized over leading axes: inputs of shape
``(..., d)`` give energies of shape ``(...,)`` and gradients of shape
``(..., d)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.special import logsumexp

from kinecoup.errors import DomainWarning, ParameterError

_REL_SLACK = 1e-9  # tolerance for validating declared constant inequalities


@dataclass(frozen=True)
class RegularityConstants:
    """Declared regularity bounds of a potential.

    ``kappa``: strong convexity constant outside the ball of radius ``R``.
    ``L``: Lipschitz constant of the gradient.  ``L_K``/``L_G``: Lipschitz
    constants of ``x -> Kx`` and of the remainder gradient.  ``L1`` bounds the
    Hessian's Lipschitz constant and ``L1_strong`` the stronger tensor-norm
    variant; both are optional metadata.
    """

    kappa: float
    L: float
    R: float
    L_G: float
    L_K: float
    L1: Optional[float] = None
    L1_strong: Optional[float] = None
    dimension: Optional[int] = None

    def __post_init__(self):
        if self.kappa <= 0:
            raise ParameterError("kappa must be positive")
        if self.L <= 0 or self.L_K <= 0:
            raise ParameterError("L and L_K must be positive")
        if self.R < 0 or self.L_G < 0:
            raise ParameterError("R and L_G must be nonnegative")
        slack = 1.0 + _REL_SLACK
        if self.kappa > self.L * slack:
            raise ParameterError("split consistency violated: kappa <= L required")
        if self.kappa > self.L_K * slack or self.L_K > self.L * slack:
            raise ParameterError("split consistency violated: kappa <= L_K <= L required")
        if self.L_G > (self.L + self.L_K) * slack + _REL_SLACK:
            raise ParameterError("split consistency violated: L_G <= L + L_K required")
        if self.L1 is not None and self.L1 < 0:
            raise ParameterError("L1 must be nonnegative")
        if self.L1_strong is not None and self.L1_strong < 0:
            raise ParameterError("L1_strong must be nonnegative")
        if self.L1 is not None and self.L1_strong is not None and self.dimension is not None:
            lo, hi = self.L1, math.sqrt(self.dimension) * self.L1
            if not (lo - _REL_SLACK <= self.L1_strong <= hi * slack + _REL_SLACK):
                raise ParameterError("L1_strong must lie in [L1, sqrt(d)*L1]")


@dataclass(frozen=True)
class QuadraticSplit:
    """Quadratic part K of the split grad U(x) = K x + grad G(x).

    ``mode`` is ``"scalar"`` for K = kappa*I (the default choice) or
    ``"matrix"`` for an explicit symmetric positive-definite matrix.
    """

    mode: str
    value: Union[float, np.ndarray]

    def __post_init__(self):
        if self.mode not in ("scalar", "matrix"):
            raise ParameterError(f"unknown split mode {self.mode!r}")
        if self.mode == "scalar":
            if float(self.value) <= 0:
                raise ParameterError("scalar split requires a positive kappa")
        else:
            K = np.asarray(self.value, dtype=float)
            if K.ndim != 2 or K.shape[0] != K.shape[1]:
                raise ParameterError("matrix split must be square")
            if not np.allclose(K, K.T, rtol=1e-12, atol=1e-12):
                raise ParameterError("matrix split must be symmetric")
            if np.linalg.eigvalsh(K).min() <= 0:
                raise ParameterError("matrix split must be positive definite")

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Evaluate x -> K x, broadcasting over leading axes."""
        if self.mode == "scalar":
            return float(self.value) * np.asarray(x, dtype=float)
        K = np.asarray(self.value, dtype=float)
        return np.asarray(x, dtype=float) @ K.T

    def min_eigenvalue(self) -> float:
        if self.mode == "scalar":
            return float(self.value)
        return float(np.linalg.eigvalsh(np.asarray(self.value, dtype=float)).min())


@dataclass(frozen=True)
class PotentialModel:
    """A target potential: energy, gradient and regularity metadata.

    Immutable after construction; evaluation is pure, so a model can be
    shared across concurrently running replicas.
    """

    dimension: int
    energy_fn: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    gradient_fn: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    constants: RegularityConstants
    split: QuadraticSplit
    label: str
    box: Optional[tuple] = None
    strict: bool = False

    def __post_init__(self):
        if self.dimension < 1:
            raise ParameterError("dimension must be >= 1")
        if self.split.min_eigenvalue() < self.constants.kappa * (1.0 - _REL_SLACK):
            raise ParameterError("split's smallest eigenvalue must be at least kappa")

    def _check_box(self, x: np.ndarray) -> None:
        if self.box is None or not self.strict:
            return
        lo, hi = self.box
        if np.any(x < np.asarray(lo) - 1e-12) or np.any(x > np.asarray(hi) + 1e-12):
            warnings.warn(
                f"potential {self.label!r} evaluated outside its configured box",
                DomainWarning,
                stacklevel=3,
            )

    def energy(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        self._check_box(x)
        return self.energy_fn(x)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        self._check_box(x)
        return self.gradient_fn(x)


def make_gaussian(d: int, kappa: float) -> PotentialModel:
    """Isotropic Gaussian target U(x) = (kappa/2)|x|^2."""
    if d < 1:
        raise ParameterError("d must be >= 1")
    if kappa <= 0:
        raise ParameterError("kappa must be positive")
    kappa = float(kappa)

    def energy(x):
        return 0.5 * kappa * np.sum(x * x, axis=-1)

    def gradient(x):
        return kappa * x

    constants = RegularityConstants(
        kappa=kappa, L=kappa, R=0.0, L_G=0.0, L_K=kappa, L1=0.0, L1_strong=0.0, dimension=d
    )
    return PotentialModel(
        dimension=d,
        energy_fn=energy,
        gradient_fn=gradient,
        constants=constants,
        split=QuadraticSplit("scalar", kappa),
        label="gaussian",
    )


def make_gaussian_bump(
    d: int, curvature: float, amp: float, width: float, kappa: float
) -> PotentialModel:
    """Strongly-convex-outside-a-ball family: quadratic bowl plus a Gaussian bump.

        U(x) = (curvature/2)|x|^2 + amp * exp(-|x|^2 / (2 width^2))

    For ``amp > curvature * width**2`` the origin is a local maximum and the
    potential is a radial double well.  All regularity constants are known in
    closed form:

    - Hessian eigenvalues lie in
      ``[curvature - amp/width^2, curvature + 2 e^{-3/2} amp/width^2]``,
      which gives ``L``.
    - With the split ``K = kappa*I`` (``kappa < curvature``) the remainder is
      convex outside radius
      ``R = 2 sup|grad bump| / (curvature - kappa)`` with
      ``sup|grad bump| = (amp/width) e^{-1/2}``.
    """
    if d < 1:
        raise ParameterError("d must be >= 1")
    if curvature <= 0 or amp < 0 or width <= 0:
        raise ParameterError("curvature and width must be positive, amp nonnegative")
    if not 0 < kappa < curvature:
        raise ParameterError("kappa must lie in (0, curvature)")
    m, A, s = float(curvature), float(amp), float(width)
    kappa = float(kappa)

    def energy(x):
        sq = np.sum(x * x, axis=-1)
        return 0.5 * m * sq + A * np.exp(-sq / (2.0 * s * s))

    def gradient(x):
        sq = np.sum(x * x, axis=-1, keepdims=True)
        return m * x - (A / s**2) * x * np.exp(-sq / (2.0 * s * s))

    bump = A / s**2
    lam_min = m - bump
    lam_max = m + 2.0 * math.exp(-1.5) * bump
    L = max(abs(lam_min), lam_max)
    L_G = max(abs(lam_min - kappa), lam_max - kappa)
    sup_grad_bump = (A / s) * math.exp(-0.5)
    R = 2.0 * sup_grad_bump / (m - kappa)
    constants = RegularityConstants(
        kappa=kappa, L=L, R=R, L_G=L_G, L_K=kappa, dimension=d
    )
    return PotentialModel(
        dimension=d,
        energy_fn=energy,
        gradient_fn=gradient,
        constants=constants,
        split=QuadraticSplit("scalar", kappa),
        label="gaussian_bump",
    )


_BANANA_BOX = (np.array([-6.0, -2.0]), np.array([6.0, 40.0]))


def make_banana(
    box: Optional[tuple] = None,
    kappa: float = 0.1,
    strict: bool = False,
    n_box_samples: int = 4096,
    seed: int = 0,
) -> PotentialModel:
    """Banana-shaped potential U(x, y) = (1 - x)^2 + 10 (y - x^2)^2.

    The potential is not globally gradient-Lipschitz, so ``L`` and ``L_G``
    are sup-norm estimates of gradient difference quotients sampled on the
    configured box, and ``R`` is the box diameter (the strong-convexity
    condition is then vacuous on the box).  ``kappa`` is a declared value.
    """
    if box is None:
        lo, hi = _BANANA_BOX
    else:
        lo = np.asarray(box[0], dtype=float)
        hi = np.asarray(box[1], dtype=float)
    if lo.shape != (2,) or hi.shape != (2,) or np.any(hi <= lo):
        raise ParameterError("banana box must be ((x_lo, y_lo), (x_hi, y_hi)) with hi > lo")

    def energy(x):
        a = x[..., 0]
        b = x[..., 1]
        return (1.0 - a) ** 2 + 10.0 * (b - a**2) ** 2

    def gradient(x):
        a = x[..., 0]
        b = x[..., 1]
        ga = -2.0 * (1.0 - a) - 40.0 * a * (b - a**2)
        gb = 20.0 * (b - a**2)
        return np.stack([ga, gb], axis=-1)

    constants = _estimate_box_constants(
        gradient, d=2, lo=lo, hi=hi, kappa=kappa, n_samples=n_box_samples, seed=seed
    )
    return PotentialModel(
        dimension=2,
        energy_fn=energy,
        gradient_fn=gradient,
        constants=constants,
        split=QuadraticSplit("scalar", float(kappa)),
        label="banana",
        box=(lo, hi),
        strict=strict,
    )


def make_gaussian_mixture(
    means: Sequence[Sequence[float]],
    sigma: float,
    weights: Optional[Sequence[float]] = None,
    box: Optional[tuple] = None,
    kappa: float = 0.05,
    n_box_samples: int = 4096,
    seed: int = 0,
) -> PotentialModel:
    """Gaussian mixture target U(x) = -log sum_i w_i exp(-|x - m_i|^2 / (2 sigma^2)).

    The gradient uses the softmax-responsibility form, which stays finite far
    from every mode.  Constants are box estimates as for the banana.
    """
    try:
        means = np.atleast_2d(np.asarray(means, dtype=float))
    except ValueError:
        raise ParameterError("all mixture means must share one dimension") from None
    if means.size == 0:
        raise ParameterError("means list must be nonempty")
    if means.ndim != 2:
        raise ParameterError("all mixture means must share one dimension")
    n_modes, d = means.shape
    if sigma <= 0:
        raise ParameterError("sigma must be positive")
    sigma = float(sigma)
    if weights is None:
        weights = np.full(n_modes, 1.0 / n_modes)
    else:
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (n_modes,):
            raise ParameterError("weights must match the number of means")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ParameterError("weights must sum to 1")
        if np.any(weights <= 0):
            raise ParameterError("weights must be positive")
    log_w = np.log(weights)
    inv_two_s2 = 1.0 / (2.0 * sigma**2)
    means_sq = np.sum(means * means, axis=-1)

    def _log_terms(x):
        # -|x - m_i|^2/(2 sigma^2) expanded so no (..., n_modes, d) tensor
        # is materialized; the difference of large squares is exact enough
        # for responsibilities and stays stable under the max-shift
        cross = x @ means.T
        sq = np.sum(x * x, axis=-1, keepdims=True)
        return -(sq - 2.0 * cross + means_sq) * inv_two_s2 + log_w

    def energy(x):
        return -logsumexp(_log_terms(x), axis=-1)

    def gradient(x):
        terms = _log_terms(x)
        terms -= terms.max(axis=-1, keepdims=True)
        resp = np.exp(terms)
        resp /= resp.sum(axis=-1, keepdims=True)
        # sum_i r_i (x - m_i) = x - sum_i r_i m_i
        return (x - resp @ means) / sigma**2

    if box is None:
        lo = means.min(axis=0) - 3.0 * sigma
        hi = means.max(axis=0) + 3.0 * sigma
    else:
        lo = np.asarray(box[0], dtype=float)
        hi = np.asarray(box[1], dtype=float)
    constants = _estimate_box_constants(
        gradient, d=d, lo=lo, hi=hi, kappa=kappa, n_samples=n_box_samples, seed=seed
    )
    return PotentialModel(
        dimension=d,
        energy_fn=energy,
        gradient_fn=gradient,
        constants=constants,
        split=QuadraticSplit("scalar", float(kappa)),
        label="gmm",
        box=(lo, hi),
    )


def split_components(p: PotentialModel):
    """Return the pure maps ``x -> K x`` and ``x -> grad G(x) = grad U(x) - K x``.

    The two maps recombine to the full gradient exactly, by construction.
    """
    split = p.split
    gradient = p.gradient_fn

    def kx(x):
        return split.apply(np.asarray(x, dtype=float))

    def grad_g(x):
        x = np.asarray(x, dtype=float)
        return gradient(x) - split.apply(x)

    return kx, grad_g


def _estimate_box_constants(
    gradient, d: int, lo: np.ndarray, hi: np.ndarray, kappa: float, n_samples: int, seed: int
) -> RegularityConstants:
    """Estimate L and L_G on a box from finite-difference Hessians.

    Samples points uniformly in the box, forms the Hessian by central
    differences of the gradient and takes sup spectral norms.  R is set to
    the box diameter so the outside-a-ball condition is vacuous on the box.
    A 5% margin covers the gap between sampled sup and true sup.
    """
    if kappa <= 0:
        raise ParameterError("kappa must be positive")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    pts = lo + (hi - lo) * rng.random((n_samples, d))
    step = 1e-5 * float(np.max(hi - lo))
    hess_norm_max = 0.0
    hess_dev_max = 0.0
    eye = np.eye(d)
    for i in range(d):
        e = step * eye[i]
        col = (gradient(pts + e) - gradient(pts - e)) / (2.0 * step)  # (n, d)
        if i == 0:
            hess = np.empty((n_samples, d, d))
        hess[:, :, i] = col
    hess = 0.5 * (hess + np.swapaxes(hess, 1, 2))
    norms = np.linalg.norm(hess, ord=2, axis=(1, 2))
    hess_norm_max = float(norms.max())
    dev = hess - kappa * eye
    hess_dev_max = float(np.linalg.norm(dev, ord=2, axis=(1, 2)).max())
    margin = 1.05
    L = max(hess_norm_max * margin, kappa)
    L_G = min(hess_dev_max * margin, L + kappa)
    return RegularityConstants(
        kappa=float(kappa),
        L=L,
        R=float(np.linalg.norm(hi - lo)),
        L_G=L_G,
        L_K=float(kappa),
        dimension=d,
    )
