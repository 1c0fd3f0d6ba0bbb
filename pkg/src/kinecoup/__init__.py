"""Kinetic Langevin samplers, couplings and contraction experiments.

The package provides three discretizations of the kinetic (underdamped)
Langevin dynamics (explicit Euler, BU and UBU splitting), synchronous and
reflection-maximal couplings of chain pairs, the twisted distance functions
under which the coupled chains contract, and a desk-scale experiment harness
that estimates decay curves, contraction rates and invariant-measure bias
orders.
"""

from kinecoup.errors import (
    ConfigError,
    DomainWarning,
    HypothesisError,
    NumericError,
    ParameterError,
    StabilityError,
)
from kinecoup.potentials import (
    PotentialModel,
    QuadraticSplit,
    RegularityConstants,
    make_banana,
    make_gaussian,
    make_gaussian_bump,
    make_gaussian_mixture,
    split_components,
)
from kinecoup.integrators import (
    NoiseDraw,
    PhasePoint,
    SchemeConfig,
    b_map,
    bu_step,
    em_step,
    run_chain,
    sample_ou_noise,
    u_map,
    ubu_step,
)
from kinecoup.metric import MetricConstants, compute_constants, f_eval, f_prime, r_l, r_s, rho
from kinecoup.couplings import (
    CoupledState,
    CoupledTrace,
    CouplingDecision,
    coupled_bu_step,
    coupled_em_step,
    coupled_ubu_step,
    reflection_maximal_draw,
    run_coupled,
    switching_rule,
)
from kinecoup.meanfield import MeanFieldSpec, ell1_N, make_meanfield, rho_N
from kinecoup.harness import (
    BiasReport,
    ExperimentConfig,
    estimate_bias_order,
    estimate_contraction_rate,
    estimate_decay_curve,
    gaussian_lyapunov_oracle,
    verify_onestep_proposition,
)

__version__ = "0.1.0"
