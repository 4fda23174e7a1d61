"""Finite-width neural tangent kernels at the edge of chaos, and their limits"""

from ntkeoc.base import (
    MlpConfig,
    Parameter,
    ForwardTrace,
    PairStats,
    phi,
    phi_prime,
    init_parameter,
    forward,
    pair_stats,
    inner_products,
)
from ntkeoc.kernel import (
    BackpropMatrix,
    NtkMatrix,
    backprop_matrix,
    backprop_chain,
    readout_chain,
    bwd_inner,
    ntk_entry,
    ntk_entry_via_jacobian,
    expected_ntk_entry,
    diagnostic_j,
    ntk_matrix,
)
from ntkeoc.limit import (
    DualMaps,
    rho_map,
    rho_prime,
    zeta,
    omega,
    omega_iterate,
    rho_iterates,
    limiting_ntk_entry,
    limiting_ntk_matrix,
)
from ntkeoc.experiments import (
    Dataset,
    ExperimentSpec,
    ExperimentResult,
    synth_pair,
    synth_sphere,
    run_experiment,
    run_icd_experiment,
    run_concentration_experiment,
    run_gia_experiment,
)
from ntkeoc.numerics import Rng, spectral_norm, bivariate_dual_quadrature
from ntkeoc.util import (
    NtkEocError,
    InvalidArgument,
    NumericFailure,
    DegenerateInput,
    DivergentMap,
    DatasetParseError,
)
