
import numpy as np
import pytest

from gradcheck import adapter_path_error
from promptmig import foundation as fd
from promptmig.adapter import (
    AdapterHyper,
    FrozenContractError,
    MigrationJob,
    adapter_forward,
    adapter_forward_flat,
    adapter_from_bytes,
    adapter_to_bytes,
    build_adapter,
    load_adapter,
    migrate_corpus,
    save_adapter,
    train_adapter,
)
from promptmig.data import DataConfig, generate_dataset, split
from promptmig.numeric import ShapeError, make_rng
from promptmig.prompts import PromptCorpus, RecordCounter, TrainHyper, evaluate, init_prompts, train_prompts
from promptmig.selection import SelectionConfig
from promptmig.topology import aggregate_migrate, chain_migrate, direct_migrate


@pytest.fixture(scope="module")
def world():
    ds = generate_dataset(DataConfig(n_users=80, n_items=300, mean_records_per_user=40), seed=1)
    sp = split(ds, seed=1)
    scorers = {f: fd.build_scorer(fd.get_family(f), 10 + i, d_item=ds.d_item) for i, f in enumerate(("alpha", "bravo", "charlie", "echo"))}
    corpora = {}
    for f in ("alpha", "charlie"):
        corpora[f], _ = train_prompts(scorers[f], ds, sp.train, TrainHyper(epochs=6, lr=5e-3, seed=4))
    return ds, sp, scorers, corpora


def test_fresh_blocks_are_identity():
    a = build_adapter([(1, 32)], (1, 48), R=2, seed=0)
    x = make_rng(0).standard_normal((5, 32))
    z, _ = adapter_forward_flat(a, x)
    np.testing.assert_array_equal(z, x @ a.params["W_in"])
    assert adapter_forward(a, [x.reshape(5, 1, 32)]).shape == (5, 1, 48)


def test_build_deterministic_and_widths():
    a, b = build_adapter([(1, 32)], (1, 48), seed=3), build_adapter([(1, 32)], (1, 48), seed=3)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    two = build_adapter([(2, 32), (2, 24)], (2, 16))
    assert two.params["W_in"].shape == (56 * 2, 32)
    with pytest.raises(ValueError):
        build_adapter([(1, 4)], (2, 4))
    with pytest.raises(ValueError):
        build_adapter([(1, 4)], (1, 4), R=0)


def test_forward_rejects_bad_shapes():
    a = build_adapter([(1, 4), (1, 3)], (1, 5))
    with pytest.raises(ShapeError):
        adapter_forward(a, [np.zeros((2, 1, 3)), np.zeros((2, 1, 4))])
    with pytest.raises(ShapeError):
        adapter_forward(a, [np.zeros((2, 1, 4))])


@pytest.mark.parametrize("task", ["rating", "click"])
def test_adapter_path_gradients(task):
    assert max(adapter_path_error(s, task) for s in range(10)) < 1e-4


def test_train_adapter_contracts(world):
    ds, sp, scorers, corpora = world
    src = corpora["alpha"]
    before_p, before_w = src.prompts_hash(), fd.scorer_to_bytes(scorers["bravo"])
    counter = RecordCounter()
    users = np.arange(0, 80, 2)
    fit = train_adapter(MigrationJob([src], scorers["bravo"], users, ds, sp.train, AdapterHyper(epochs=4, lr=3e-3)), counter)
    assert src.prompts_hash() == before_p
    assert fd.scorer_to_bytes(scorers["bravo"]) == before_w
    assert fit.history[-1] < fit.history[0]
    n_rec = int(np.isin(ds.users[sp.train], users).sum())
    assert fit.records_processed == counter.records == 4 * n_rec
    assert fit.provenance["target_weights_sha256"] == scorers["bravo"].weights_hash()


def test_train_adapter_detects_mutation(world, monkeypatch):
    ds, sp, scorers, corpora = world
    src = corpora["alpha"].copy()
    import promptmig.adapter as ad

    real = ad.adam_step

    def sneaky(params, grads, state):
        src.prompts[0, 0, 0] += 1.0  # a bug that writes through to a frozen input
        return real(params, grads, state)

    monkeypatch.setattr(ad, "adam_step", sneaky)
    with pytest.raises(FrozenContractError):
        train_adapter(MigrationJob([src], scorers["bravo"], np.arange(4), ds, sp.train, AdapterHyper(epochs=1)))


def test_train_adapter_missing_user(world):
    ds, sp, scorers, corpora = world
    short = PromptCorpus(corpora["alpha"].prompts[:10], corpora["alpha"].head)
    with pytest.raises(KeyError):
        train_adapter(MigrationJob([short], scorers["bravo"], np.arange(20), ds, sp.train))


def test_migrated_beats_random_init(world):
    ds, sp, scorers, corpora = world
    tgt = scorers["bravo"]
    fit = train_adapter(MigrationJob([corpora["alpha"]], tgt, np.arange(80), ds, sp.train, AdapterHyper(epochs=8, lr=3e-3)))
    migrated = migrate_corpus(fit.adapter, [corpora["alpha"]], tgt, fit.head)
    init = init_prompts(ds.n_users, 1, tgt.d_model, seed=9)
    rand, _ = train_prompts(tgt, ds, sp.train, TrainHyper(epochs=6, lr=5e-3), init=init, update_prompts=False)
    assert evaluate(tgt, migrated, ds, sp.val).rmse < evaluate(tgt, rand, ds, sp.val).rmse


def test_migrate_corpus_properties(world):
    ds, sp, scorers, corpora = world
    a = build_adapter([(1, 32)], (1, 48), seed=1)
    a.params["block0.W2"] = make_rng(1).standard_normal(a.params["block0.W2"].shape)
    out = migrate_corpus(a, [corpora["alpha"]], scorers["bravo"])
    assert out.prompts.shape == (80, 1, 48)
    assert out.scorer_id == scorers["bravo"].scorer_id
    np.testing.assert_array_equal(out.prompts, migrate_corpus(a, [corpora["alpha"]], scorers["bravo"]).prompts)
    for u in (0, 17, 79):
        single = adapter_forward(a, [corpora["alpha"].prompts[u]])[0]
        np.testing.assert_allclose(out.prompts[u], single, rtol=1e-12, atol=1e-14)
    with pytest.raises(KeyError):
        migrate_corpus(build_adapter([(1, 32), (1, 24)], (1, 48)), [corpora["alpha"], PromptCorpus(np.zeros((5, 1, 24)))])


def test_adapter_roundtrip(tmp_path):
    a = build_adapter([(1, 8), (1, 4)], (1, 6), R=3, seed=2, hidden=5, act="tanh")
    head = {"W1": np.ones((5, 16)), "b1": np.zeros(16), "W2": np.ones((16, 1)), "b2": np.array([3.0])}
    save_adapter(a, tmp_path / "a.puma", head, {"note": "t"})
    b, h = load_adapter(tmp_path / "a.puma")
    assert b.source_dims == [(1, 8), (1, 4)] and b.target_dim == (1, 6) and b.n_blocks == 3 and b.act == "tanh"
    for k in a.params:
        np.testing.assert_allclose(b.params[k], a.params[k].astype(np.float32))
    np.testing.assert_array_equal(h["b2"], [3.0])
    assert adapter_from_bytes(adapter_to_bytes(a))[1] is None
    with pytest.raises(ValueError):
        adapter_from_bytes(b"PUMP" + adapter_to_bytes(a)[4:])


# -- topologies -------------------------------------------------------------------

SEL = SelectionConfig("random", budget=40, seed=5)
HYP = AdapterHyper(epochs=3, lr=3e-3, seed=6)


def test_chain_first_hop_equals_direct(world):
    ds, sp, scorers, corpora = world
    chain = [scorers["alpha"], scorers["bravo"], scorers["echo"]]
    hops = chain_migrate(chain, corpora["alpha"], ds, sp, SEL, HYP)
    assert len(hops) == 2
    direct = direct_migrate([corpora["alpha"]], [scorers["alpha"]], scorers["bravo"], ds, sp, SEL, HYP)
    np.testing.assert_array_equal(hops[0].corpus.prompts, direct.corpus.prompts)
    assert hops[1].corpus.prompts.shape == (80, 1, 16)
    assert hops[1].source == "bravo" and hops[1].target == "echo"
    with pytest.raises(ValueError):
        chain_migrate([scorers["alpha"]], corpora["alpha"], ds, sp, SEL, HYP)


def test_aggregate_shapes_and_degenerate_case(world):
    ds, sp, scorers, corpora = world
    srcs = [corpora["alpha"], corpora["charlie"]]
    agg = aggregate_migrate(srcs, [scorers["alpha"], scorers["charlie"]], scorers["bravo"], ds, sp, SEL, HYP)
    assert agg.fit.adapter.in_width == 32 + 24
    assert agg.source == "alpha+charlie"
    single = aggregate_migrate(srcs[:1], [scorers["alpha"]], scorers["bravo"], ds, sp, SEL, HYP)
    direct = direct_migrate(srcs[:1], [scorers["alpha"]], scorers["bravo"], ds, sp, SEL, HYP)
    np.testing.assert_array_equal(single.corpus.prompts, direct.corpus.prompts)
    with pytest.raises(ValueError):
        aggregate_migrate([corpora["alpha"], PromptCorpus(np.zeros((3, 1, 24)))], [scorers["alpha"], scorers["charlie"]],
                          scorers["bravo"], ds, sp, SEL, HYP)


def test_adapter_is_lightweight():
    ds_d_item = 16
    a, b = (fd.build_scorer(fd.get_family(f), 0, d_item=ds_d_item) for f in ("alpha", "bravo"))
    adapter = build_adapter([(1, 32)], (1, 48), R=2, hidden=32)
    assert adapter.n_params() < 0.05 * (a.n_params() + b.n_params())
