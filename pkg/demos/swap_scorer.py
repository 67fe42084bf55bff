"""Swap the scorer under a trained prompt corpus without retraining the prompts.

Trains per-user prompts on ``alpha``, then moves them to ``bravo`` two ways:
a full retrain from scratch, and a residual adapter fitted on a fifth of the
users.  Prints both RMSEs and how many training records each one touched.

    python demos/swap_scorer.py
"""
import numpy as np

from promptmig import DataConfig
from promptmig.adapter import MigrationJob, migrate_corpus, train_adapter
from promptmig.harness import ExperimentConfig, _adapter_hyper, _selection, build_world, train_corpus
from promptmig.prompts import RecordCounter, evaluate
from promptmig.selection import select_users

cfg = ExperimentConfig(seed=3, data=DataConfig(n_users=200, n_items=400), budget_frac=0.2)
world = build_world(cfg)
alpha, bravo = world.scorer("alpha"), world.scorer("bravo")
test = world.sp.test

source = train_corpus(world, "alpha")
print(f"alpha prompts on alpha:   rmse {evaluate(alpha, source, world.ds, test).rmse:.4f}")

retrain_cost = RecordCounter()
retrained = train_corpus(world, "bravo", retrain_cost)
print(f"bravo prompts from scratch: rmse {evaluate(bravo, retrained, world.ds, test).rmse:.4f}"
      f"  ({retrain_cost.records} records)")

sel = select_users(_selection(cfg), source, world.ds, world.sp.train, alpha)
print(f"adapter trains on {len(sel.users)} users from {len(np.unique(sel.cluster_of))} clusters")

adapter_cost = RecordCounter()
fit = train_adapter(MigrationJob([source], bravo, sel.users, world.ds, world.sp.train, _adapter_hyper(cfg)), adapter_cost)
migrated = migrate_corpus(fit.adapter, [source], bravo, fit.head)
print(f"alpha prompts migrated:    rmse {evaluate(bravo, migrated, world.ds, test).rmse:.4f}"
      f"  ({adapter_cost.records} records, {adapter_cost.records / retrain_cost.records:.2f} of a retrain)")
