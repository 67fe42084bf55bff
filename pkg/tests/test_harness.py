import json
from dataclasses import replace

import numpy as np
import pytest

from promptmig import cli
from promptmig.data import DataConfig
from promptmig.harness import (
    ConfigError,
    ExperimentConfig,
    StageError,
    emit_reports,
    run_experiment,
    run_heatmap,
    run_selection_sweep,
)

TINY = {
    "data": {"n_users": 40, "n_items": 80, "mean_records_per_user": 15},
    "prompt": {"epochs": 2},
    "adapter": {"epochs": 2},
    "budget_frac": 0.5,
}


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY))
    return path


def tiny(**kw):
    return replace(ExperimentConfig.from_dict(TINY), **kw)


def test_config_strict():
    with pytest.raises(ConfigError, match="unknown config keys"):
        ExperimentConfig.from_dict({"sed": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"data": {"n_user": 3}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"schema_version": 2})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"target": "zulu"})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"topology": "chain", "families": ["alpha"]})
    cfg = ExperimentConfig.from_dict(TINY)
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.stage_seed("data") != cfg.stage_seed("split")


def test_direct_rows_and_ledger():
    b = run_experiment(tiny())
    assert [a["arm"] for a in b["arms"]] == ["full_retrain", "source_perf", "random_init", "puma"]
    led = b["ledger"]
    assert led["cost_ratio"] == led["adapter_records"] / led["full_retrain_records"]
    assert led["full_retrain_records"] == 2 * b["split_sizes"]["train"]
    assert b["params"]["adapter_fraction"] < 0.05


def test_cost_ratio_tracks_budget_and_epochs():
    cfg = replace(ExperimentConfig(), data=DataConfig(n_users=100, n_items=200, mean_records_per_user=20),
                  prompt=replace(ExperimentConfig().prompt, epochs=5), adapter=replace(ExperimentConfig().adapter, epochs=2),
                  budget_frac=0.2, run_full_retrain=False)
    b = run_experiment(cfg)
    # selected users hold about 20% of the records; 2 adapter epochs vs 5 retraining epochs
    assert b["ledger"]["cost_ratio"] == pytest.approx(0.2 * 2 / 5, rel=0.3)


def test_emit_reports_idempotent_and_hashed(tmp_path):
    b = run_experiment(tiny())
    m1 = emit_reports(b, tmp_path)
    stamp = (tmp_path / "results.json").stat().st_mtime_ns
    m2 = emit_reports(b, tmp_path)
    assert m1 == m2
    assert (tmp_path / "results.json").stat().st_mtime_ns == stamp
    names = {f["path"] for f in m1["files"]}
    assert {"results.json", "arms.csv", "ledger.csv", "summary.txt", "timings.json"} <= names
    import hashlib

    for f in m1["files"]:
        assert hashlib.sha256((tmp_path / f["path"]).read_bytes()).hexdigest() == f["sha256"]
    assert "_timings" not in json.loads((tmp_path / "results.json").read_text())


def test_emit_reports_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(StageError):
        emit_reports({"kind": "direct"}, blocker / "sub")


def test_chain_csv_has_one_row_per_hop(tmp_path):
    b = run_experiment(tiny(topology="chain", families=["echo", "alpha", "charlie"]))
    emit_reports(b, tmp_path)
    rows = (tmp_path / "chain.csv").read_text().strip().split("\n")
    assert len(rows) == 1 + 2
    assert [r["hop"] for r in b["chain"]] == [1, 2]


def test_aggregate_rows():
    b = run_experiment(tiny(topology="aggregate", families=["echo", "charlie"]))
    assert [r["sources"] for r in b["aggregate"]] == ["echo", "charlie", "echo+charlie"]


def test_sweep_pairing_and_random_3x():
    b = run_selection_sweep(tiny(budget_frac=0.2), ["random", "kmeans_var_strat"], seeds=[0, 1])
    assert [r["strategy"] for r in b["table"]] == ["random", "kmeans_var_strat", "random_3x"]
    assert b["table"][2]["budget"] == 3 * b["table"][0]["budget"]
    assert all("rmse_sd" in r for r in b["table"])
    with pytest.raises(ConfigError):
        run_selection_sweep(tiny(), ["nope"])


def test_heatmap_shape_and_diagonal():
    b = run_heatmap(["echo", "charlie"], tiny())
    g = np.array(b["gain"])
    assert g.shape == (2, 2)
    np.testing.assert_array_equal(np.diag(g), 1.0)


# -- CLI -------------------------------------------------------------------------


def test_cli_exit_codes(tmp_path, tiny_cfg, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"bogus": 1}))
    assert cli.main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["run", "--config", str(tmp_path / "missing.json")]) == 2
    assert cli.main(["frobnicate"]) == 2
    assert cli.main(["select-users", "--config", str(tiny_cfg), "--out", str(tmp_path / "empty")]) == 3
    assert cli.main(["evaluate", "--config", str(tiny_cfg), "--out", str(tmp_path / "o"), "--arm", "nope"]) == 2


def test_cli_stage_pipeline(tmp_path, tiny_cfg):
    out = str(tmp_path / "run")
    common = ["--config", str(tiny_cfg), "--out", out]
    assert cli.main(["gen-data", *common]) == 0
    for arm in ("source", "full_retrain", "random_init"):
        assert cli.main(["train-prompts", *common, "--arm", arm]) == 0
    for step in ("select-users", "train-adapter", "migrate"):
        assert cli.main([step, *common]) == 0
    for arm in ("source", "full_retrain", "random_init", "puma"):
        assert cli.main(["evaluate", *common, "--arm", arm]) == 0
    assert cli.main(["report", *common]) == 0
    run = tmp_path / "run"
    for name in ("data.pumd", "split.json", "scorer_alpha.pums", "scorer_bravo.pums", "corpus_puma.pump",
                 "selection.json", "adapter.puma", "metrics_puma.json", "results.json", "manifest.json"):
        assert (run / name).exists(), name
    res = json.loads((run / "results.json").read_text())
    assert [a["arm"] for a in res["arms"]] == ["full_retrain", "source", "random_init", "puma"]
    assert 0 < res["ledger"]["cost_ratio"] < 1


def test_cli_run_is_byte_deterministic(tmp_path, tiny_cfg):
    for d in ("a", "b"):
        assert cli.main(["run", "--config", str(tiny_cfg), "--seed", "7", "--out", str(tmp_path / d)]) == 0
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    det = lambda m: {f["path"]: f["sha256"] for f in m["files"] if f["deterministic"]}
    assert det(ma) == det(mb)
    assert (tmp_path / "a" / "results.json").read_bytes() == (tmp_path / "b" / "results.json").read_bytes()
