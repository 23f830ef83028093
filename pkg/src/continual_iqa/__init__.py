"""Continual regression for lifelong blind image quality assessment."""

from .baselines import METHODS, make_learner
from .config import ExperimentConfig, load_config, parse_config
from .metrics import EvalLedger, averaged_indices, correlation_index, forgetting_index, srcc
from .runner import ResultBundle, permutation_suite, run_experiment
from .trainer import MethodConfig, TrainSchedule, plan_replay

__all__ = [
    "METHODS",
    "make_learner",
    "ExperimentConfig",
    "load_config",
    "parse_config",
    "EvalLedger",
    "averaged_indices",
    "correlation_index",
    "forgetting_index",
    "srcc",
    "ResultBundle",
    "permutation_suite",
    "run_experiment",
    "MethodConfig",
    "TrainSchedule",
    "plan_replay",
]
