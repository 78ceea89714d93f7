"""Replayable adversarial SGD training with per-instance influence estimation."""

from .autodiff import (
    NonFiniteError,
    Tensor,
    backward,
    vjp_of_gradient,
)
from .config import DatasetSpec, ExperimentConfig, load_config, trace_fingerprint
from .influence import (
    InfluenceTable,
    QueryVector,
    cross_block_transfer_check,
    estimate_influence_vector,
    infer_linear_influence,
    propagate_query,
)
from .metrics import (
    Classifier,
    ClassifierSettings,
    MetricContext,
    MetricSpec,
    average_log_likelihood,
    build_query_vector,
    fid,
    inception_score,
    metric_value,
    train_classifier,
)
from .models import FcGan, GanArchitecture, MlpLayout, joint_gradient
from .oracle import CounterfactualResult, batch_oracle, counterfactual_retrain, true_influence_on_metric
from .training import (
    DivergenceError,
    StepRecord,
    TrainingSettings,
    TrainingTrace,
    load_trace,
    minibatch_schedule,
    replay_trace,
    run_training,
    save_trace,
    trace_checksum,
)

__version__ = "0.1.0"
