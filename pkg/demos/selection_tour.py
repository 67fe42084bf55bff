"""How each selection strategy spends the same budget.

Trains one prompt corpus, then asks every strategy for 40 of 200 users and
prints how the picks spread over prompt-space clusters and label-variance
bins.  Nothing here trains an adapter.

    python demos/selection_tour.py
"""
import numpy as np

from promptmig import STRATEGIES, DataConfig
from promptmig.data import all_user_variances
from promptmig.harness import ExperimentConfig, _selection, build_world, train_corpus
from promptmig.selection import normal_bin_weights, select_users, stratify

cfg = ExperimentConfig(seed=1, data=DataConfig(n_users=200, n_items=400), prompt=ExperimentConfig().prompt)
world = build_world(cfg)
source = train_corpus(world, "alpha")
scorer = world.scorer("alpha")

var = all_user_variances(world.ds, world.sp.train)
bins = stratify(var, 5)
print("normal bin weights, B=5:", np.round(normal_bin_weights(5), 3))
print(f"{'strategy':20s} picks per variance bin (low -> high)")
for name in STRATEGIES:
    sel = select_users(_selection(cfg, strategy=name, budget=40), source, world.ds, world.sp.train, scorer)
    print(f"{name:20s} {np.bincount(bins[sel.users], minlength=5)}")
