"""Chained and aggregated migrations built from single adapter fits."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import foundation as fd
from .adapter import AdapterHyper, MigrationJob, MigrationResult, migrate_corpus, train_adapter
from .data import InteractionDataset, Split
from .metrics import MetricsReport
from .numeric import derive_seed
from .prompts import PromptCorpus, RecordCounter, evaluate
from .selection import SelectionConfig, SelectionResult, select_users


@dataclass
class HopResult:
    source: str
    target: str
    corpus: PromptCorpus
    metrics: MetricsReport
    selection: SelectionResult
    fit: MigrationResult


def direct_migrate(
    sources: list,
    source_scorers: list,
    target: fd.FrozenScorer,
    ds: InteractionDataset,
    sp: Split,
    selection: SelectionConfig,
    hyper: AdapterHyper,
    counter: RecordCounter | None = None,
    eval_split: str = "test",
) -> HopResult:
    """Select users, fit one adapter from ``sources`` into ``target``, migrate everyone, evaluate."""
    if len({c.n_users for c in sources}) != 1:
        raise ValueError("source corpora must share the user set")
    # selection sees the concatenated source prompts; loss/FFN features come from the first source
    view = sources[0] if len(sources) == 1 else PromptCorpus(
        np.concatenate([c.flat() for c in sources], axis=1)[:, None, :], sources[0].head, sources[0].scorer_id
    )
    if selection.strategy.startswith("ffn_") or "loss" in selection.strategy:
        view = sources[0]
    sel = select_users(selection, view, ds, sp.train, source_scorers[0])
    fit = train_adapter(MigrationJob(list(sources), target, sel.users, ds, sp.train, hyper), counter)
    migrated = migrate_corpus(fit.adapter, list(sources), target, fit.head)
    return HopResult(
        "+".join(s.family.name for s in source_scorers),
        target.family.name,
        migrated,
        evaluate(target, migrated, ds, sp.get(eval_split)),
        sel,
        fit,
    )


def hop_seeds(selection: SelectionConfig, hyper: AdapterHyper, hop: int):
    """Hop 0 keeps the caller's seeds so it matches a standalone direct migration."""
    if hop == 0:
        return selection, hyper
    return (
        replace(selection, seed=derive_seed(selection.seed, "hop", hop) % 2**63),
        replace(hyper, seed=derive_seed(hyper.seed, "hop", hop) % 2**63),
    )


def chain_migrate(
    scorers: list,
    initial: PromptCorpus,
    ds: InteractionDataset,
    sp: Split,
    selection: SelectionConfig,
    hyper: AdapterHyper,
    counter: RecordCounter | None = None,
) -> list[HopResult]:
    """Migrate ``initial`` (trained on ``scorers[0]``) through every later scorer in turn.

    Prompts are never refit; each hop trains only a new adapter whose input
    is the previous hop's migrated corpus.
    """
    if len(scorers) < 2:
        raise ValueError("a chain needs at least two scorers")
    hops = []
    current = initial
    for i in range(len(scorers) - 1):
        sel_i, hyp_i = hop_seeds(selection, hyper, i)
        hop = direct_migrate([current], [scorers[i]], scorers[i + 1], ds, sp, sel_i, hyp_i, counter)
        hops.append(hop)
        current = hop.corpus
    return hops


def aggregate_migrate(
    corpora: list,
    source_scorers: list,
    target: fd.FrozenScorer,
    ds: InteractionDataset,
    sp: Split,
    selection: SelectionConfig,
    hyper: AdapterHyper,
    counter: RecordCounter | None = None,
    eval_split: str = "test",
) -> HopResult:
    """One adapter over the concatenation of each user's prompts from several sources."""
    if len(corpora) != len(source_scorers) or not corpora:
        raise ValueError("need one scorer per source corpus")
    if len({c.n_users for c in corpora}) != 1:
        raise ValueError("source corpora must share the user set")
    return direct_migrate(corpora, source_scorers, target, ds, sp, selection, hyper, counter, eval_split)
