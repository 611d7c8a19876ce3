"""Datasets, split protocols, metrics and the training loop."""

from .data import EEGDataset, EEGSample, Normalizer, load_features, synth_generate, write_features
from .metrics import MetricsReport, aggregate, format_mean_std
from .splits import SplitPlan, audit_plan, make_plans, split_loso, split_subject_dependent
from .training import TrainResult, evaluate, run_training

__all__ = [
    "EEGDataset", "EEGSample", "Normalizer", "load_features", "synth_generate", "write_features",
    "MetricsReport", "aggregate", "format_mean_std",
    "SplitPlan", "audit_plan", "make_plans", "split_loso", "split_subject_dependent",
    "TrainResult", "evaluate", "run_training",
]
