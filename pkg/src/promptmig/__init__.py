"""Per-user soft prompts on frozen scorers, and cheap migration between scorers.

A user is represented by a small trainable prompt prepended to the input of a
frozen scoring network.  When the scorer is swapped for a new one, a residual
adapter trained on a selected subset of users maps every user's old prompt
into the new scorer's input space, avoiding a full retrain.
"""
from .adapter import (
    AdapterHyper,
    FrozenContractError,
    MigrationAdapter,
    MigrationJob,
    build_adapter,
    migrate_corpus,
    train_adapter,
)
from .data import DataConfig, InteractionDataset, generate_dataset, split
from .foundation import FAMILIES, FrozenScorer, ScorerFamily, build_scorer, get_family
from .harness import ConfigError, ExperimentConfig, StageError, emit_reports, run_experiment
from .metrics import MetricsReport, auc, gain_ratio, mae, rmse, uauc
from .prompts import PromptCorpus, TrainHyper, evaluate, train_prompts
from .selection import STRATEGIES, SelectionConfig, SelectionResult, select_users
from .topology import aggregate_migrate, chain_migrate, direct_migrate

__version__ = "0.1.0"

__all__ = [
    "AdapterHyper", "ConfigError", "DataConfig", "ExperimentConfig", "FAMILIES", "FrozenContractError",
    "FrozenScorer", "InteractionDataset", "MetricsReport", "MigrationAdapter", "MigrationJob", "PromptCorpus",
    "STRATEGIES", "ScorerFamily", "SelectionConfig", "SelectionResult", "StageError", "TrainHyper",
    "aggregate_migrate", "auc", "build_adapter", "build_scorer", "chain_migrate", "direct_migrate",
    "emit_reports", "evaluate", "gain_ratio", "generate_dataset", "get_family", "mae", "migrate_corpus",
    "rmse", "run_experiment", "select_users", "split", "train_adapter", "train_prompts", "uauc",
]
