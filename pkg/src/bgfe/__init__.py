"""Bayesian grouped fixed-effects estimation for panel data, with soft
pairwise constraints on the latent group structure."""

from .constraints import (
    ConstraintSet,
    PairwiseConstraint,
    constraints_from_pregrouping,
    log_constraint_term,
    perturb_constraints,
    weight_from,
)
from .dp_prior import (
    DpHyper,
    GroupPartition,
    StickWeights,
    expected_k,
    log_constrained_prior_unnormalized,
    log_eppf,
    prior_similarity_matrix,
    simulate_prior_partition,
    two_unit_same_group_prob,
)
from .forecast import (
    ForecastResult,
    crps,
    forecast,
    hpdi,
    log_predictive_score,
    point_forecast,
    predictive_draws,
)
from .gibbs import GibbsSampler, PosteriorChain, SamplerState, run_chain
from .mdd import MddResult, log_mdd_harmonic_mean, select_c
from .panel import (
    HoldoutSlice,
    ModelConfig,
    PanelDataset,
    add_lag_column,
    append_holdout,
    load_panel,
    split_holdout,
    write_panel,
)
from .partition import (
    PartitionEstimate,
    compute_psm,
    point_estimate_partition,
    variation_of_information,
    vi_objective,
)
from .spc_kmeans import (
    KmeansConfig,
    KmeansState,
    pc_kmeans,
    small_variance_equivalence_test,
    spc_gfe,
)
from .dgp import (
    DgpConfig,
    McReport,
    generate_constraints,
    generate_general_dgp,
    generate_simple_dgp,
    run_monte_carlo,
)

__version__ = "0.1.0"
