"""Deterministic simulator for poisoning attacks on federated unlearning."""

from .aggregation import (
    AggregatorKind,
    aggregate,
    bulyan,
    coordinate_median,
    fedavg,
    krum,
    trimmed_mean,
)
from .attacks import (
    AttackContext,
    AttackSpec,
    adaptive_attack,
    backdoor_update,
    bad_unlearn,
    lie_attack,
    trim_attack,
)
from .config import ConfigError, ExperimentConfig, load_config
from .datasets import (
    ClientShards,
    LabeledDataset,
    TriggerSpec,
    generate_synthetic,
    inject_trigger,
    load_idx,
    partition_noniid,
    trigger_eval_set,
)
from .fl import (
    Client,
    FederationRun,
    HistoryStore,
    RoundRecord,
    build_roster,
    detection_oracle,
    run_fl,
)
from .harness import ResultRow, ablation_sweep, emit_table, run_cell, run_experiment
from .models import (
    ConvexityProfile,
    ModelSpec,
    convexity_profile,
    gradient,
    init_params,
    loss,
    predict,
    test_error_rate,
)
from .numerics import (
    EstimationUnavailable,
    LbfgsBuffers,
    ParamVector,
    coordinate_sign,
    cosine_similarity,
    l2_norm,
    lbfgs_hvp,
    sigma_coefficient,
)
from .unlearn import (
    FilterWindow,
    UnlearnReport,
    UnlearnSetting,
    dir_filter_and_rescale,
    dist_filter,
    fedrecover_baseline,
    historical_only,
    theorem_bound,
    train_from_scratch,
    unlearnguard,
)

__version__ = "0.1.0"
