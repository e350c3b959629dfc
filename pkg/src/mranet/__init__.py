"""Tensor-network spectral methods for heterogeneous continuous
multi-reference alignment: moment estimation, a correction-normalized
ring contraction whose leading eigenvectors recover signals up to
rotation, classic baselines, and trace-based self-verification."""

from .baselines import (
    PcaInstance,
    frequency_marching,
    pca_homotopy_init,
    pca_partial_trace,
    pca_spectral_sos,
    pca_unfolding,
)
from .core import (
    apply_rotation,
    flatten4,
    fourier_matrix,
    freqs,
    from_fourier,
    leading_eigenvector,
    rotate_signal,
    symmetrize,
    to_fourier,
    unflatten4,
)
from .correction import (
    CorrectionTable,
    concentration_deviations,
    correction_table,
)
from .errors import (
    BudgetError,
    ConfigError,
    ConvergenceError,
    MranetError,
    SymmetryError,
    VerificationError,
)
from .estimators import FrequencyMarchingEstimator, SpectralListRecovery
from .moments import (
    EmpiricalMoment,
    ObservationBatch,
    SignalSet,
    empirical_third_moment,
    exact_moment,
    moment_error,
    sample_observations,
)
from .networks import contract, hsss_matrix, pair_network, triple_network
from .ring import VertexWeightTable, precompute_G, ring_contract, ring_network
from .spectral import (
    ExperimentConfig,
    ExtractionResult,
    ListRecoveryResult,
    TrialDiagnostics,
    build_M,
    extract_candidate,
    het_signal_gap,
    list_recovery,
    orbit_correlation,
)
from .traceverify import trace_crosscheck, verify_region_lemma

__version__ = "0.1.0"

__all__ = [
    "apply_rotation",
    "flatten4",
    "fourier_matrix",
    "freqs",
    "from_fourier",
    "leading_eigenvector",
    "rotate_signal",
    "symmetrize",
    "to_fourier",
    "unflatten4",
    "BudgetError",
    "ConfigError",
    "ConvergenceError",
    "MranetError",
    "SymmetryError",
    "VerificationError",
    "SignalSet",
    "ObservationBatch",
    "EmpiricalMoment",
    "sample_observations",
    "empirical_third_moment",
    "exact_moment",
    "moment_error",
    "CorrectionTable",
    "correction_table",
    "concentration_deviations",
    "ExperimentConfig",
    "ExtractionResult",
    "ListRecoveryResult",
    "TrialDiagnostics",
    "build_M",
    "extract_candidate",
    "list_recovery",
    "orbit_correlation",
    "het_signal_gap",
    "VertexWeightTable",
    "ring_contract",
    "ring_network",
    "precompute_G",
    "contract",
    "pair_network",
    "triple_network",
    "hsss_matrix",
    "PcaInstance",
    "frequency_marching",
    "pca_unfolding",
    "pca_spectral_sos",
    "pca_partial_trace",
    "pca_homotopy_init",
    "verify_region_lemma",
    "trace_crosscheck",
    "SpectralListRecovery",
    "FrequencyMarchingEstimator",
    "__version__",
]
