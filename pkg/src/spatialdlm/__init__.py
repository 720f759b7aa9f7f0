"""Coupled spatial dynamic linear models with sequential Monte Carlo
inference for the static parameters.

The model layer (`model`) defines the observation/evolution structure and
spatially correlated system noise; `filter` gives exact Gaussian filtering,
smoothing, prediction and forecasting for a single parameter draw; `ibis`
runs the iterated batch importance sampler over parameter particles (full
or windowed moves); `parallel` runs disjoint particle batches with local
resampling; `data` handles records, synthetic series and CSV formats;
`cli` is the command-line front end.
"""
from .data import (
    DataError,
    IngestReport,
    ObservationRecord,
    SyntheticConfig,
    default_sites,
    emit_series,
    ingest_csv,
    simulate,
    validate_series,
)
from .filter import (
    FilterBank,
    FilterRun,
    FilterState,
    OrderingError,
    SmoothingDraw,
    StatePrior,
    backward_sample,
    filter_init,
    filter_step,
    forecast,
    forecast_moments,
    predict_within_sample,
    run_filter,
)
from .ibis import (
    EvidenceTrace,
    IbisConfig,
    KdeProposal,
    Particle,
    ParticleSet,
    PriorSpec,
    TriggerEvent,
    ess,
    full_move_log_ratio,
    log_bayes_factor,
    mh_move_full,
    mh_move_windowed,
    multinomial_resample,
    proposal_gamma,
    reweight,
    run_ibis,
    run_online_ibis,
    silverman_bandwidth,
    window_partition,
)
from .model import (
    DlmSpec,
    GpCovariance,
    IncidenceMatrix,
    Location,
    ModelError,
    StaticParams,
    amplitude_phase,
    assemble_mats,
    build_incidence,
    build_spatial_K,
    distance_matrix,
    gp_cov,
    obs_matrix,
    obs_row,
    system_matrix,
    transition_matrix,
)
from .numerics import (
    DegenerateWeightsError,
    NumericalError,
    ess_log_weights,
    ks_distance,
    normalized_log_weights,
    weighted_mean_cov,
    weighted_quantile,
)
from .parallel import BatchDiagnostics, BatchPlan, final_merge, run_batched

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
