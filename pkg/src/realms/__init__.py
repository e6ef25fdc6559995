"""Decoherent histories for finite-dimensional closed systems."""
from .errors import *  # noqa: F401,F403
from .linalg import (
    DEFAULT_TOL,
    Diagnostic,
    Hamiltonian,
    Projector,
    ProjectorSet,
    ToleranceConfig,
    commutator_norm,
    evolve,
    gram,
    partial_trace,
    span_projector,
    tensor,
    tensor_state,
    validate_projector_set,
)
from .histories import (
    TRIVIAL,
    BranchNode,
    BranchTree,
    TimeGrid,
    Trivial,
    branch_probability,
    build_uniform_history,
    check_branch_sum,
    class_operator,
    coarse_grain,
    extend_tree,
    start_tree,
)
from .framework import (
    CommonFramework,
    Factorization,
    SystemObservable,
    build_common_framework,
    check_equal_time_commutation,
    check_narrative,
    factor_hilbert,
    factorization_residuals,
    framework_for_tree,
    lift,
)
from .decoherence import (
    DecoherenceReport,
    StrongReport,
    ZFamily,
    extract_z,
    medium_check,
    operator_decoherence_check,
    strong_check,
    too_strong_check,
)
from .records import (
    BranchDensityMatrix,
    RecordSet,
    branch_density_matrix,
    construct_records,
    expectation_identity_check,
    permanence_check,
    verify_records,
)
from .adaptive import (
    BranchRule,
    CompositeRule,
    FixedRule,
    FollowSupportRule,
    PruneRule,
    RefinementCandidate,
    RefinementReport,
    apply_rule,
    is_coarse_graining_of,
    maximal_refine,
)
from .models import (
    LatticeModel,
    RangeSpec,
    Scenario,
    VolumePartition,
    average_density_operator,
    build_chain_scenario,
    build_records_scenario,
    build_spin_measurement_scenario,
    build_twoslit_scenario,
    build_wave_packet_scenario,
    range_projectors,
    xx_chain,
)

__version__ = "0.1.0"
