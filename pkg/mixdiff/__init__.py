"""
Guided diffusion on Gaussian-mixture data
"""

__version__ = "1.0.0"

from .schedules import NoiseSchedule, SegmentSchedule, make_cosine_schedule, make_linear_schedule, respace
from .mixture import GaussianMixture, benchmark_mixture
from .models import AnalyticDenoiser, CountingDenoiser, DenoiserOutput, MlpDenoiser, MlpSpec
from .classifiers import AnalyticClassifier, MlpClassifier, NoisyClassifierOutput
from .samplers import SamplerConfig, Trajectory, sample
from .training import TrainConfig, TrainingDivergedError
from .metrics import MetricsReport
from .config import ConfigError, ExperimentConfig, load_experiment_config
from .experiment import ExperimentRunner

__all__ = [
    "NoiseSchedule",
    "SegmentSchedule",
    "make_linear_schedule",
    "make_cosine_schedule",
    "respace",
    "GaussianMixture",
    "benchmark_mixture",
    "AnalyticDenoiser",
    "CountingDenoiser",
    "DenoiserOutput",
    "MlpDenoiser",
    "MlpSpec",
    "AnalyticClassifier",
    "MlpClassifier",
    "NoisyClassifierOutput",
    "SamplerConfig",
    "Trajectory",
    "sample",
    "TrainConfig",
    "TrainingDivergedError",
    "MetricsReport",
    "ConfigError",
    "ExperimentConfig",
    "load_experiment_config",
    "ExperimentRunner",
]
