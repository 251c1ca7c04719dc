"""Multi-objective Bayesian optimization with a sequence-model Q-function."""

from .bench import ConfigError, EpisodeTask, TaskConfig, make_task
from .model import ModelConfig, QParams, init_params, load_checkpoint, save_checkpoint
from .pareto import ParetoArchive, hypervolume, hypervolume_exact, pareto_front
from .runner import BOFormerPolicy, EHVIPolicy, RandomPolicy, SUCBPolicy, evaluate_suite, run_episode
from .trainer import TrainerConfig, train

__all__ = [
    "BOFormerPolicy", "ConfigError", "EHVIPolicy", "EpisodeTask", "ModelConfig", "ParetoArchive", "QParams",
    "RandomPolicy", "SUCBPolicy", "TaskConfig", "TrainerConfig", "evaluate_suite", "hypervolume",
    "hypervolume_exact", "init_params", "load_checkpoint", "make_task", "pareto_front", "run_episode",
    "save_checkpoint", "train",
]
