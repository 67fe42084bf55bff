"""Experiment orchestration, cost accounting and report emission.

Every stage seeds itself from ``(global seed, stage name)`` so a stage can be
rerun alone and reproduce its part of a full run.  All arms of a comparison
share the dataset, the split and the evaluation records.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import foundation as fd
from .adapter import AdapterHyper
from .data import DataConfig, InteractionDataset, Split, generate_dataset, split, stats
from .metrics import CSV_COLUMNS, MetricsReport, gain_ratio
from .numeric import derive_seed
from .prompts import PromptCorpus, RecordCounter, TrainHyper, evaluate, init_prompts, train_prompts
from .selection import STRATEGIES, SelectionConfig
from .topology import aggregate_migrate, chain_migrate, direct_migrate

SCHEMA_VERSION = 1
ARM_ROWS = ("full_retrain", "source_perf", "random_init", "puma")


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


class StageError(RuntimeError):
    """A pipeline stage failed (CLI exit code 3)."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    split: tuple = (0.8, 0.1, 0.1)
    source: str = "alpha"
    target: str = "bravo"
    prompt_len: int = 1
    prompt: TrainHyper = field(default_factory=lambda: TrainHyper(epochs=15, lr=5e-3, batch=32))
    adapter: AdapterHyper = field(default_factory=lambda: AdapterHyper(epochs=8, lr=3e-3, batch=32))
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    # fraction of users used as the selection budget; overrides selection.budget when set
    budget_frac: float | None = 0.2
    topology: str = "direct"
    families: list = field(default_factory=list)  # chain order, or aggregate sources
    eval_split: str = "test"
    run_full_retrain: bool = True
    out: str = "out"

    @property
    def head(self) -> str:
        return {"rating": "rating5", "click": "click1"}[self.data.task]

    def budget(self) -> int:
        if self.budget_frac is None:
            return self.selection.budget
        return max(1, int(round(self.budget_frac * self.data.n_users)))

    def validate(self) -> None:
        try:
            self.data.validate()
            self.prompt.validate()
            self.adapter.validate()
            self.selection.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        for name in [self.source, self.target, *self.families]:
            if name not in fd.FAMILIES:
                raise ConfigError(f"unknown scorer family {name!r}; known: {sorted(fd.FAMILIES)}")
        if self.topology not in ("direct", "chain", "aggregate"):
            raise ConfigError(f"unknown topology {self.topology!r}")
        if self.topology == "chain" and len(self.families) < 2:
            raise ConfigError("chain topology needs at least two families")
        if self.topology == "aggregate" and not self.families:
            raise ConfigError("aggregate topology needs source families")
        if self.budget_frac is not None and not 0 < self.budget_frac <= 1:
            raise ConfigError("budget_frac must lie in (0, 1]")
        if self.eval_split not in ("val", "test"):
            raise ConfigError("eval_split must be 'val' or 'test'")
        if self.prompt_len < 1:
            raise ConfigError("prompt_len must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        d["schema_version"] = SCHEMA_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema_version {version}")
        nested = {"data": DataConfig, "prompt": TrainHyper, "adapter": AdapterHyper, "selection": SelectionConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        base = cls()
        kwargs = {}
        for key, val in d.items():
            if key in nested:
                if not isinstance(val, dict):
                    raise ConfigError(f"{key} must be an object")
                sub_known = {f.name for f in fields(nested[key])}
                bad = set(val) - sub_known
                if bad:
                    raise ConfigError(f"unknown {key} keys {sorted(bad)}")
                kwargs[key] = replace(getattr(base, key), **val)
            elif key == "split":
                kwargs[key] = tuple(float(v) for v in val)
            else:
                kwargs[key] = val
        try:
            cfg = cls(**kwargs)
        except TypeError as e:
            raise ConfigError(str(e)) from None
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(raw)

    def stage_seed(self, *names) -> int:
        return derive_seed(self.seed, *names) % 2**63


@dataclass
class CostLedger:
    adapter_records: int = 0
    full_retrain_records: int = 0
    seconds: dict = field(default_factory=dict)

    @property
    def cost_ratio(self) -> float | None:
        if not self.full_retrain_records:
            return None
        return self.adapter_records / self.full_retrain_records

    def to_dict(self) -> dict:
        return {
            "adapter_records": self.adapter_records,
            "full_retrain_records": self.full_retrain_records,
            "cost_ratio": self.cost_ratio,
        }


class _Timer:
    def __init__(self, ledger: CostLedger, phase: str):
        self.ledger, self.phase = ledger, phase

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        self.ledger.seconds[self.phase] = self.ledger.seconds.get(self.phase, 0.0) + time.perf_counter() - self.t0


class _Stage:
    """Tags any exception raised inside with the stage name."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, typ, exc, tb):
        if exc is not None and not isinstance(exc, (StageError, ConfigError)):
            raise StageError(self.name, exc) from exc
        return False


# -- building blocks ------------------------------------------------------------


@dataclass
class World:
    cfg: ExperimentConfig
    ds: InteractionDataset
    sp: Split
    scorers: dict = field(default_factory=dict)

    def scorer(self, family: str) -> fd.FrozenScorer:
        if family not in self.scorers:
            self.scorers[family] = fd.build_scorer(
                fd.get_family(family, self.cfg.head),
                self.cfg.stage_seed("scorer", family),
                d_item=self.ds.d_item,
                prompt_len=self.cfg.prompt_len,
            )
        return self.scorers[family]


def build_world(cfg: ExperimentConfig) -> World:
    with _Stage("gen-data"):
        ds = generate_dataset(cfg.data, cfg.stage_seed("data"))
        sp = split(ds, cfg.split, cfg.stage_seed("split"))
    return World(cfg, ds, sp)


def train_corpus(world: World, family: str, counter: RecordCounter | None = None, prompts_trainable: bool = True) -> PromptCorpus:
    """Prompts trained from scratch on ``family`` (or the head-only random baseline)."""
    cfg = world.cfg
    scorer = world.scorer(family)
    tag = "prompts" if prompts_trainable else "random_init"
    hyper = replace(cfg.prompt, seed=cfg.stage_seed(tag, family))
    init = init_prompts(world.ds.n_users, scorer.prompt_len, scorer.d_model, hyper.seed, world.ds.task)
    corpus, _ = train_prompts(scorer, world.ds, world.sp.train, hyper, init=init, update_prompts=prompts_trainable, counter=counter)
    return corpus


def _selection(cfg: ExperimentConfig, strategy: str | None = None, budget: int | None = None, seed_tag: str = "select") -> SelectionConfig:
    return replace(
        cfg.selection,
        strategy=strategy or cfg.selection.strategy,
        budget=budget if budget is not None else cfg.budget(),
        seed=cfg.stage_seed(seed_tag),
    )


def _adapter_hyper(cfg: ExperimentConfig, tag: str = "adapter") -> AdapterHyper:
    return replace(cfg.adapter, seed=cfg.stage_seed(tag))


def _config_record(cfg: ExperimentConfig) -> dict:
    """Config as stored in results; the output location is not part of the experiment."""
    d = cfg.to_dict()
    d.pop("out")
    return d


def _arm(name: str, model: str, report: MetricsReport) -> dict:
    return {"arm": name, "model": model, **report.to_dict()}


def _frozen_params(world: World, names) -> int:
    return sum(world.scorer(n).n_params() for n in names)


# -- experiments ----------------------------------------------------------------


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Full comparison for the configured topology; returns the report bundle."""
    cfg.validate()
    if cfg.topology == "chain":
        return run_chain(cfg)
    if cfg.topology == "aggregate":
        return run_aggregate(cfg)
    ledger = CostLedger()
    world = build_world(cfg)
    ds, sp = world.ds, world.sp
    split_idx = sp.get(cfg.eval_split)
    arms = []
    with _Stage("train-prompts"), _Timer(ledger, "source_prompts"):
        src_scorer = world.scorer(cfg.source)
        source = train_corpus(world, cfg.source)
    tgt = world.scorer(cfg.target)
    if cfg.run_full_retrain:
        with _Stage("full-retrain"), _Timer(ledger, "full_retrain"):
            counter = RecordCounter()
            full = train_corpus(world, cfg.target, counter)
            ledger.full_retrain_records = counter.records
            arms.append(_arm("full_retrain", cfg.target, evaluate(tgt, full, ds, split_idx)))
    else:
        # hypothetical full retraining: every training record once per epoch
        ledger.full_retrain_records = cfg.prompt.epochs * len(sp.train)
    with _Stage("evaluate"):
        arms.append(_arm("source_perf", cfg.source, evaluate(src_scorer, source, ds, split_idx)))
    with _Stage("random-init"), _Timer(ledger, "random_init"):
        rand = train_corpus(world, cfg.target, prompts_trainable=False)
        arms.append(_arm("random_init", cfg.target, evaluate(tgt, rand, ds, split_idx)))
    with _Stage("train-adapter"), _Timer(ledger, "adapter"):
        counter = RecordCounter()
        hop = direct_migrate([source], [src_scorer], tgt, ds, sp, _selection(cfg), _adapter_hyper(cfg), counter, cfg.eval_split)
        ledger.adapter_records = counter.records
        arms.append(_arm("puma", cfg.target, hop.metrics))
    params = {
        "adapter": hop.fit.adapter.n_params(),
        "frozen_scorers": _frozen_params(world, {cfg.source, cfg.target}),
    }
    params["adapter_fraction"] = params["adapter"] / params["frozen_scorers"]
    return {
        "kind": "direct",
        "config": _config_record(cfg),
        "dataset": stats(ds).to_dict(),
        "split_sizes": {k: int(len(getattr(sp, k))) for k in ("train", "val", "test")},
        "eval_split": cfg.eval_split,
        "arms": arms,
        "selection": _selection_summary(hop.selection),
        "ledger": ledger.to_dict(),
        "params": params,
        "provenance": hop.fit.provenance,
        "_timings": dict(ledger.seconds),
    }


def _selection_summary(sel) -> dict:
    return {
        "n_selected": int(len(sel.users)),
        "users_sha256": hashlib.sha256(np.asarray(sel.users, dtype="<i8").tobytes()).hexdigest(),
        "cluster_quotas": sel.audit.get("cluster_quotas"),
        "bin_weights": sel.audit.get("bin_weights"),
    }


def run_chain(cfg: ExperimentConfig) -> dict:
    """Chain over ``cfg.families``; each hop is compared with full retraining on its target."""
    families = cfg.families
    ledger = CostLedger()
    world = build_world(cfg)
    split_idx = world.sp.get(cfg.eval_split)
    with _Stage("train-prompts"), _Timer(ledger, "source_prompts"):
        start = train_corpus(world, families[0])
    scorers = [world.scorer(f) for f in families]
    with _Stage("chain"), _Timer(ledger, "adapter"):
        counter = RecordCounter()
        hops = chain_migrate(scorers, start, world.ds, world.sp, _selection(cfg), _adapter_hyper(cfg), counter)
        ledger.adapter_records = counter.records
    rows = []
    for i, hop in enumerate(hops):
        row = {"hop": i + 1, "source": hop.source, "target": hop.target, **hop.metrics.to_dict()}
        if cfg.run_full_retrain:
            with _Stage("full-retrain"), _Timer(ledger, "full_retrain"):
                counter = RecordCounter()
                full = train_corpus(world, hop.target, counter)
                ledger.full_retrain_records += counter.records
                row["full_retrain"] = evaluate(world.scorer(hop.target), full, world.ds, split_idx).to_dict()
        rows.append(row)
    return {
        "kind": "chain",
        "config": _config_record(cfg),
        "dataset": stats(world.ds).to_dict(),
        "chain": rows,
        "ledger": ledger.to_dict(),
        "_timings": dict(ledger.seconds),
    }


def run_aggregate(cfg: ExperimentConfig) -> dict:
    """Every single source and the concatenation of all sources, migrated into ``cfg.target``."""
    ledger = CostLedger()
    world = build_world(cfg)
    tgt = world.scorer(cfg.target)
    corpora = {}
    with _Stage("train-prompts"), _Timer(ledger, "source_prompts"):
        for f in cfg.families:
            corpora[f] = train_corpus(world, f)
    rows = []
    with _Stage("aggregate"), _Timer(ledger, "adapter"):
        counter = RecordCounter()
        sel, hyp = _selection(cfg), _adapter_hyper(cfg)
        for f in cfg.families:
            hop = direct_migrate([corpora[f]], [world.scorer(f)], tgt, world.ds, world.sp, sel, hyp, counter, cfg.eval_split)
            rows.append({"sources": f, **hop.metrics.to_dict()})
        if len(cfg.families) > 1:
            hop = aggregate_migrate(
                [corpora[f] for f in cfg.families], [world.scorer(f) for f in cfg.families], tgt, world.ds, world.sp, sel, hyp, counter, cfg.eval_split
            )
            rows.append({"sources": "+".join(cfg.families), **hop.metrics.to_dict()})
        ledger.adapter_records = counter.records
    return {
        "kind": "aggregate",
        "config": _config_record(cfg),
        "dataset": stats(world.ds).to_dict(),
        "target": cfg.target,
        "aggregate": rows,
        "ledger": ledger.to_dict(),
        "_timings": dict(ledger.seconds),
    }


def _metric_cols(task: str) -> tuple:
    return ("rmse", "mae") if task == "rating" else ("auc", "uauc")


def run_selection_sweep(cfg: ExperimentConfig, strategies=None, seeds=(0,), include_random_3x: bool = True) -> dict:
    """Post-migration metrics per selection strategy, paired over seeds.

    Within a seed every strategy shares data, split, source prompts and the
    evaluation records; only the selected users differ.
    """
    strategies = list(strategies or STRATEGIES)
    if not strategies or not seeds:
        raise ConfigError("sweep needs at least one strategy and one seed")
    for s in strategies:
        if s not in STRATEGIES:
            raise ConfigError(f"unknown strategy {s!r}")
    budget = cfg.budget()
    arms = [(s, s, budget) for s in strategies]
    if include_random_3x:
        arms.append(("random_3x", "random", min(3 * budget, cfg.data.n_users)))
    per_seed = {name: [] for name, _, _ in arms}
    eval_hashes = []
    for seed in seeds:
        scfg = replace(cfg, seed=int(seed))
        world = build_world(scfg)
        src_scorer = world.scorer(scfg.source)
        tgt = world.scorer(scfg.target)
        with _Stage("train-prompts"):
            source = train_corpus(world, scfg.source)
        eval_idx = world.sp.get(scfg.eval_split)
        eval_hashes.append(hashlib.sha256(np.asarray(eval_idx, dtype="<i8").tobytes()).hexdigest())
        for name, strategy, b in arms:
            with _Stage(f"sweep:{name}"):
                hop = direct_migrate(
                    [source], [src_scorer], tgt, world.ds, world.sp,
                    _selection(scfg, strategy, b), _adapter_hyper(scfg), eval_split=scfg.eval_split,
                )
            per_seed[name].append(hop.metrics.to_dict())
    cols = _metric_cols(cfg.data.task)
    rows = []
    for name, strategy, b in arms:
        row = {"strategy": name, "budget": b, "n_seeds": len(seeds)}
        for c in cols:
            vals = np.array([m[c] for m in per_seed[name]], dtype=np.float64)
            row[c] = float(vals.mean())
            row[f"{c}_sd"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        rows.append(row)
    return {
        "kind": "sweep",
        "config": _config_record(cfg),
        "seeds": [int(s) for s in seeds],
        "table": rows,
        "per_seed": per_seed,
        "eval_split_sha256": eval_hashes,
    }


def run_heatmap(families, cfg: ExperimentConfig, seeds=(0,)) -> dict:
    """Gain ratio (full-retrained RMSE / migrated RMSE) for every ordered family pair."""
    families = list(families)
    if len(families) < 2:
        raise ConfigError("heatmap needs at least two families")
    if cfg.data.task != "rating":
        raise ConfigError("heatmap gains are defined on RMSE; use a rating task")
    n = len(families)
    gains = np.zeros((len(seeds), n, n))
    for s_i, seed in enumerate(seeds):
        scfg = replace(cfg, seed=int(seed))
        world = build_world(scfg)
        corpora, full_rmse = {}, {}
        split_idx = world.sp.get(scfg.eval_split)
        for f in families:
            with _Stage(f"train-prompts:{f}"):
                corpora[f] = train_corpus(world, f)
                # prompts trained from scratch on f double as f's full-retraining baseline
                full_rmse[f] = evaluate(world.scorer(f), corpora[f], world.ds, split_idx).rmse
        for i, src in enumerate(families):
            for j, tgt in enumerate(families):
                if i == j:
                    gains[s_i, i, j] = 1.0
                    continue
                with _Stage(f"heatmap:{src}->{tgt}"):
                    hop = direct_migrate(
                        [corpora[src]], [world.scorer(src)], world.scorer(tgt), world.ds, world.sp,
                        _selection(scfg), _adapter_hyper(scfg), eval_split=scfg.eval_split,
                    )
                gains[s_i, i, j] = gain_ratio(full_rmse[tgt], hop.metrics.rmse)
    mean = gains.mean(axis=0)
    off = mean[~np.eye(n, dtype=bool)]
    return {
        "kind": "heatmap",
        "config": _config_record(cfg),
        "families": families,
        "seeds": [int(s) for s in seeds],
        "gain": mean.tolist(),
        "gain_per_seed": gains.tolist(),
        "mean_off_diagonal": float(off.mean()),
    }


# -- reports ----------------------------------------------------------------------


def _csv(rows: list, columns: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow(["" if r.get(c) is None else r.get(c) for c in columns])
    return buf.getvalue()


def _summary(bundle: dict) -> str:
    kind = bundle.get("kind")
    lines = [f"experiment: {kind}"]
    if kind in ("direct", "stages"):
        for a in bundle["arms"]:
            lines.append(f"  {a['arm']:<13} {a['model']:<8} " + "  ".join(
                f"{c}={a[c]:.4f}" for c in ("rmse", "mae", "auc", "uauc") if a.get(c) is not None))
        led = bundle["ledger"]
        if led["cost_ratio"] is not None:
            lines.append(f"  cost ratio (adapter / full retrain record passes): {led['cost_ratio']:.4f}")
        if "params" in bundle:
            lines.append(f"  adapter params: {bundle['params']['adapter']} ({100 * bundle['params']['adapter_fraction']:.2f}% of frozen)")
    elif kind == "chain":
        for r in bundle["chain"]:
            lines.append(f"  hop {r['hop']}: {r['source']} -> {r['target']}  " + _headline(r))
    elif kind == "aggregate":
        for r in bundle["aggregate"]:
            lines.append(f"  {r['sources']:<20} -> {bundle['target']}  " + _headline(r))
    elif kind == "sweep":
        for r in bundle["table"]:
            lines.append(f"  {r['strategy']:<18} budget={r['budget']:<5} " + "  ".join(
                f"{c}={r[c]:.4f}±{r[c + '_sd']:.4f}" for c in ("rmse", "mae", "auc", "uauc") if c in r))
    elif kind == "heatmap":
        fams = bundle["families"]
        lines.append("  gain (rows: source, cols: target)")
        lines.append("  " + " ".join(f"{f:>8}" for f in [""] + fams))
        for f, row in zip(fams, bundle["gain"]):
            lines.append("  " + f"{f:>8} " + " ".join(f"{g:8.4f}" for g in row))
    return "\n".join(lines) + "\n"


def _headline(r: dict) -> str:
    if r.get("rmse") is not None:
        return f"rmse={r['rmse']:.4f} mae={r['mae']:.4f}"
    return f"auc={r['auc']:.4f} uauc={r['uauc']:.4f}"


def emit_reports(bundle: dict, out_dir) -> dict:
    """Write results, tables, a summary and a hashed manifest; returns the manifest."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise StageError("report", OSError(f"cannot create {out}: {e}")) from e
    files = {}
    timings = bundle.get("_timings")
    results = {k: v for k, v in bundle.items() if not k.startswith("_")}
    files["results.json"] = (json.dumps(results, indent=2, sort_keys=True) + "\n", True)
    kind = bundle.get("kind")
    if kind == "direct":
        files["arms.csv"] = (_csv(bundle["arms"], ["arm", "model", *CSV_COLUMNS]), True)
        files["ledger.csv"] = (_csv([bundle["ledger"]], ["adapter_records", "full_retrain_records", "cost_ratio"]), True)
    elif kind == "chain":
        rows = []
        for r in bundle["chain"]:
            full = r.get("full_retrain") or {}
            rows.append({**r, "full_retrain_rmse": full.get("rmse"), "full_retrain_auc": full.get("auc")})
        files["chain.csv"] = (
            _csv(rows, ["hop", "source", "target", "rmse", "mae", "auc", "uauc", "full_retrain_rmse", "full_retrain_auc"]), True
        )
    elif kind == "aggregate":
        files["aggregate.csv"] = (_csv(bundle["aggregate"], ["sources", *CSV_COLUMNS]), True)
    elif kind == "sweep":
        cols = ["strategy", "budget", "n_seeds"]
        for c in ("rmse", "mae", "auc", "uauc"):
            if c in bundle["table"][0]:
                cols += [c, f"{c}_sd"]
        files["sweep.csv"] = (_csv(bundle["table"], cols), True)
    elif kind == "heatmap":
        fams = bundle["families"]
        rows = [{"source": f, **dict(zip(fams, row))} for f, row in zip(fams, bundle["gain"])]
        files["heatmap.csv"] = (_csv(rows, ["source", *fams]), True)
    elif kind == "stages":
        files["arms.csv"] = (_csv(bundle["arms"], ["arm", "model", *CSV_COLUMNS]), True)
    files["summary.txt"] = (_summary(bundle), True)
    if timings is not None:
        files["timings.json"] = (json.dumps(timings, indent=2, sort_keys=True) + "\n", False)

    manifest = {"files": []}
    for name, (text, deterministic) in files.items():
        data = text.encode()
        path = out / name
        try:
            if not path.exists() or path.read_bytes() != data:
                path.write_bytes(data)
        except OSError as e:
            raise StageError("report", OSError(f"cannot write {path}: {e}")) from e
        manifest["files"].append(
            {"path": name, "sha256": hashlib.sha256(data).hexdigest(), "bytes": len(data), "deterministic": deterministic}
        )
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
