"""Gradient-norm weighted averaging for simulated distributed training."""
from .config import RunConfig
from .errors import ConfigError, DomainError, GrawaError, NumericError, SignatureError
from .harness import RunRecord, Schedule, jittered_schedule, run, should_communicate
from .local_opt import LocalOptConfig, proximity_step, sam_step, sgd_step
from .objectives import Batch, MLPClassifier, ObjectiveSpec, Quadratic, Vincent2D, make_objective, make_shards
from .params import LayeredGradient, LayeredParams
from .policies import (
    GradNormProfile,
    PolicyConfig,
    center_easgd,
    center_lgrawa,
    center_lsgd,
    center_mgrawa,
    grawa_theta,
    grawa_weights,
    pull_update,
)

__version__ = "0.1.0"

__all__ = [
    "Batch", "ConfigError", "DomainError", "GradNormProfile", "GrawaError", "LayeredGradient",
    "LayeredParams", "LocalOptConfig", "MLPClassifier", "NumericError", "ObjectiveSpec",
    "PolicyConfig", "Quadratic", "RunConfig", "RunRecord", "Schedule", "SignatureError",
    "Vincent2D", "center_easgd", "center_lgrawa", "center_lsgd", "center_mgrawa",
    "grawa_theta", "grawa_weights", "jittered_schedule", "make_objective", "make_shards",
    "proximity_step", "pull_update", "run", "sam_step", "sgd_step", "should_communicate",
]
