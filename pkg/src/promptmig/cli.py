"""Command-line entry point.

Stage subcommands (``gen-data`` ... ``evaluate``, ``report``) read and write
artifacts in ``--out`` so a pipeline can be run one step at a time::

    promptmig gen-data      --config cfg.json --out run/
    promptmig train-prompts --config cfg.json --out run/ --arm source
    promptmig select-users  --config cfg.json --out run/
    promptmig train-adapter --config cfg.json --out run/
    promptmig migrate       --config cfg.json --out run/
    promptmig evaluate      --config cfg.json --out run/ --arm puma
    promptmig report        --config cfg.json --out run/

``run``, ``chain``, ``aggregate``, ``sweep`` and ``heatmap`` execute a whole
experiment in memory and emit reports.  Exit codes: 0 success, 2 config
error, 3 stage failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import adapter as ad
from . import foundation as fd
from . import harness as hs
from .data import Split, load_dataset, save_dataset, stats
from .prompts import RecordCounter, evaluate, load_corpus, save_corpus
from .selection import SelectionResult, select_users
from .topology import direct_migrate  # noqa: F401  (re-exported for scripting)

ARMS = ("source", "full_retrain", "random_init", "puma")


def _load_cfg(args) -> hs.ExperimentConfig:
    cfg = hs.ExperimentConfig.load(args.config) if args.config else hs.ExperimentConfig()
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise hs.ConfigError("--seed must be an unsigned 64-bit integer")
        cfg = replace(cfg, seed=args.seed)
    if args.out:
        cfg = replace(cfg, out=args.out)
    cfg.validate()
    return cfg


def _need(path: Path, hint: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run `{hint}` first")
    return path


def _load_world(cfg: hs.ExperimentConfig) -> hs.World:
    out = Path(cfg.out)
    ds = load_dataset(_need(out / "data.pumd", "gen-data"))
    sp_raw = json.loads(_need(out / "split.json", "gen-data").read_text())
    sp = Split(*(np.asarray(sp_raw[k], dtype=np.int64) for k in ("train", "val", "test")))
    return hs.World(cfg, ds, sp)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _arm_family(cfg, arm: str) -> str:
    return cfg.source if arm == "source" else cfg.target


# -- stage commands ------------------------------------------------------------------


def cmd_gen_data(cfg, args):
    world = hs.build_world(cfg)
    out = Path(cfg.out)
    save_dataset(world.ds, out / "data.pumd")
    _write_json(out / "split.json", {k: getattr(world.sp, k).tolist() for k in ("train", "val", "test")})
    _write_json(out / "stats.json", stats(world.ds).to_dict())
    print(json.dumps(stats(world.ds).to_dict(), sort_keys=True))


def cmd_train_prompts(cfg, args):
    arm = args.arm or "source"
    if arm not in ("source", "full_retrain", "random_init"):
        raise hs.ConfigError(f"train-prompts --arm must be source, full_retrain or random_init, not {arm!r}")
    world = _load_world(cfg)
    out = Path(cfg.out)
    family = _arm_family(cfg, arm)
    with hs._Stage("train-prompts"):
        scorer = world.scorer(family)
        fd.save_scorer(scorer, out / f"scorer_{family}.pums")
        counter = RecordCounter()
        corpus = hs.train_corpus(world, family, counter, prompts_trainable=arm != "random_init")
        save_corpus(corpus, out / f"corpus_{arm}.pump")
        _write_json(out / f"ledger_{arm}.json", {"records": counter.records, "steps": counter.steps})


def cmd_select_users(cfg, args):
    world = _load_world(cfg)
    out = Path(cfg.out)
    with hs._Stage("select-users"):
        corpus = load_corpus(_need(out / "corpus_source.pump", "train-prompts --arm source"))
        sel = select_users(hs._selection(cfg), corpus, world.ds, world.sp.train, world.scorer(cfg.source))
        (out / "selection.json").write_text(sel.to_json() + "\n")
    print(f"selected {len(sel.users)} users with {cfg.selection.strategy}")


def cmd_train_adapter(cfg, args):
    world = _load_world(cfg)
    out = Path(cfg.out)
    with hs._Stage("train-adapter"):
        source = load_corpus(_need(out / "corpus_source.pump", "train-prompts --arm source"))
        sel = SelectionResult.from_dict(json.loads(_need(out / "selection.json", "select-users").read_text()))
        counter = RecordCounter()
        job = ad.MigrationJob([source], world.scorer(cfg.target), sel.users, world.ds, world.sp.train, hs._adapter_hyper(cfg))
        fit = ad.train_adapter(job, counter)
        ad.save_adapter(fit.adapter, out / "adapter.puma", fit.head, {**fit.provenance, "selection_size": int(len(sel.users))})
        _write_json(out / "ledger_adapter.json", {"records": counter.records, "steps": counter.steps})


def cmd_migrate(cfg, args):
    world = _load_world(cfg)
    out = Path(cfg.out)
    with hs._Stage("migrate"):
        adapter, head = ad.load_adapter(_need(out / "adapter.puma", "train-adapter"))
        source = load_corpus(_need(out / "corpus_source.pump", "train-prompts --arm source"))
        migrated = ad.migrate_corpus(adapter, [source], world.scorer(cfg.target), head)
        save_corpus(migrated, out / "corpus_puma.pump")


def cmd_evaluate(cfg, args):
    arm = args.arm or "puma"
    if arm not in ARMS:
        raise hs.ConfigError(f"--arm must be one of {ARMS}")
    world = _load_world(cfg)
    out = Path(cfg.out)
    with hs._Stage("evaluate"):
        corpus = load_corpus(_need(out / f"corpus_{arm}.pump", "train-prompts/migrate"))
        family = _arm_family(cfg, arm)
        report = evaluate(world.scorer(family), corpus, world.ds, world.sp.get(cfg.eval_split))
        _write_json(out / f"metrics_{arm}.json", {"arm": arm, "model": family, **report.to_dict()})
        (out / f"metrics_{arm}.csv").write_text(report.to_csv())
    print(report.to_csv(), end="")


def cmd_report(cfg, args):
    out = Path(cfg.out)
    arms = []
    for arm in ("full_retrain", "source", "random_init", "puma"):
        p = out / f"metrics_{arm}.json"
        if p.exists():
            arms.append(json.loads(p.read_text()))
    if not arms:
        raise FileNotFoundError(f"no metrics_*.json in {out}; run `evaluate` first")
    ledger = {}
    for arm in ("full_retrain", "adapter"):
        p = out / f"ledger_{arm}.json"
        if p.exists():
            ledger[arm] = json.loads(p.read_text())["records"]
    full = ledger.get("full_retrain") or cfg.prompt.epochs * len(json.loads((out / "split.json").read_text())["train"])
    bundle = {
        "kind": "stages",
        "config": hs._config_record(cfg),
        "arms": arms,
        "ledger": {
            "adapter_records": ledger.get("adapter"),
            "full_retrain_records": full,
            "cost_ratio": None if ledger.get("adapter") is None else ledger["adapter"] / full,
        },
    }
    manifest = hs.emit_reports(bundle, out)
    print(f"wrote {len(manifest['files'])} files to {out}")


# -- whole-experiment commands ---------------------------------------------------------


def _emit(bundle, cfg):
    manifest = hs.emit_reports(bundle, cfg.out)
    print((Path(cfg.out) / "summary.txt").read_text(), end="")
    return manifest


def cmd_run(cfg, args):
    _emit(hs.run_experiment(cfg), cfg)


def _families(args, cfg, default):
    if args.families:
        fams = [f.strip() for f in args.families.split(",") if f.strip()]
    else:
        fams = cfg.families or default
    for f in fams:
        if f not in fd.FAMILIES:
            raise hs.ConfigError(f"unknown family {f!r}")
    return fams


def _seeds(args, cfg):
    if args.seeds:
        return [int(s) for s in args.seeds.split(",")]
    return [cfg.seed]


def cmd_chain(cfg, args):
    fams = _families(args, cfg, ["alpha", "bravo", "charlie", "delta"])
    _emit(hs.run_experiment(replace(cfg, topology="chain", families=fams)), cfg)


def cmd_aggregate(cfg, args):
    fams = _families(args, cfg, ["alpha", "charlie"])
    _emit(hs.run_experiment(replace(cfg, topology="aggregate", families=fams)), cfg)


def cmd_sweep(cfg, args):
    strategies = args.strategies.split(",") if args.strategies else None
    _emit(hs.run_selection_sweep(cfg, strategies, _seeds(args, cfg)), cfg)


def cmd_heatmap(cfg, args):
    fams = _families(args, cfg, list(fd.FAMILIES))
    _emit(hs.run_heatmap(fams, cfg, _seeds(args, cfg)), cfg)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-prompts": cmd_train_prompts,
    "select-users": cmd_select_users,
    "train-adapter": cmd_train_adapter,
    "migrate": cmd_migrate,
    "evaluate": cmd_evaluate,
    "chain": cmd_chain,
    "aggregate": cmd_aggregate,
    "sweep": cmd_sweep,
    "heatmap": cmd_heatmap,
    "report": cmd_report,
    "run": cmd_run,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promptmig", description="Soft-prompt migration lab")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--seed", type=int, help="global seed (unsigned 64-bit)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--arm", help="arm name for train-prompts / evaluate")
        if name in ("chain", "aggregate", "heatmap"):
            p.add_argument("--families", help="comma-separated scorer families")
        if name in ("sweep", "heatmap"):
            p.add_argument("--seeds", help="comma-separated seeds")
        if name == "sweep":
            p.add_argument("--strategies", help="comma-separated selection strategies")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code else 0
    try:
        cfg = _load_cfg(args)
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, args)
    except hs.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except hs.StageError as e:
        print(f"stage failure: {e}", file=sys.stderr)
        return 3
    except (OSError, ValueError, KeyError) as e:
        print(f"stage failure: [{args.command}] {type(e).__name__}: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
