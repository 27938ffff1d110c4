"""Distributed and mini-batch Krasulina/Oja methods for streaming top-eigenvector estimation."""

__version__ = "0.1.0"

from .analysis import (
    BoundParams,
    EpochSchedule,
    StepSchedule,
    bound_constants,
    epoch_schedule,
    finite_sample_bound,
    finite_sample_terms,
    l_lower_bound_initial,
    l_lower_bound_main,
    max_minibatch,
    minibatch_bound,
    step_size,
    t_final_closed_form,
    theoretical_bound,
)
from .data import (
    CovarianceSpec,
    GroundTruth,
    batch_top_eigenvector,
    center_dataset,
    estimate_sigma2,
    load_csv,
    load_dataset,
    load_idx,
    make_covariance,
    sample_stream,
)
from .estimator import (
    EigenEstimate,
    gradient_f,
    krasulina_direction,
    krasulina_step,
    oja_direction,
    oja_step,
    potential,
    random_unit_init,
    rayleigh_quotient,
    z_statistic,
)
from .harness import (
    AggregateTrace,
    ExperimentConfig,
    TraceRecord,
    compare_bound,
    fit_loglog_slope,
    pick_step_constant,
    run_monte_carlo,
    run_trial,
)
from .network import (
    Splitter,
    SystemModel,
    classify_and_mu,
    distributed_vector_sum,
    reindex_dk,
    reindex_dmk,
    run_dk_iteration,
    run_dmk_iteration,
)
