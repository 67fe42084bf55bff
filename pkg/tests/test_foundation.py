import math

import numpy as np
import pytest

from promptmig import foundation as fd
from promptmig.numeric import ShapeError, finite_difference_gradient, make_rng, rel_error


def tiny(nonlin="tanh", head="rating5", l=1, d=2, depth=3, hidden=3, seed=11):
    return fd.build_scorer(fd.ScorerFamily("tiny", d, depth, hidden, nonlin, head), seed, d_item=2, prompt_len=l)


def test_build_is_deterministic_and_seed_sensitive():
    fam = fd.get_family("alpha")
    a, b = fd.build_scorer(fam, 5), fd.build_scorer(fam, 5)
    assert all(np.array_equal(x, y) for x, y in zip(a.tensors(), b.tensors()))
    assert a.weights_hash() == b.weights_hash()
    c = fd.build_scorer(fam, 6)
    assert any(not np.array_equal(x, y) for x, y in zip(a.tensors(), c.tensors()))
    assert a.item_proj.shape[1] == 32


def test_weights_are_read_only():
    s = tiny()
    with pytest.raises(ValueError):
        s.blocks[0].W1[0, 0] = 1.0
    with pytest.raises(ValueError):
        s.head_W[...] = 0.0


def test_family_validation():
    with pytest.raises(ValueError, match="depth"):
        fd.build_scorer(fd.ScorerFamily("x", 4, 2, 4, "tanh"), 0)
    with pytest.raises(ValueError):
        fd.build_scorer(fd.ScorerFamily("x", 0, 3, 4, "tanh"), 0)
    with pytest.raises(ValueError):
        fd.get_family("zulu")


def test_assemble_input_concatenates():
    s = fd.build_scorer(fd.ScorerFamily("t", 4, 3, 4, "tanh"), 0, d_item=4)
    # swap in an identity projection so the projected item is the raw item
    s = fd.FrozenScorer(s.family, s.seed, 4, 1, np.eye(4), s.blocks, s.head_W, s.head_b)
    row = fd.assemble_input(s, np.array([[1.0, 2, 3, 4]]), np.array([5.0, 6, 7, 8]))
    np.testing.assert_array_equal(row, [[1, 2, 3, 4, 5, 6, 7, 8]])
    np.testing.assert_array_equal(fd.assemble_input(s, np.zeros((1, 4)), np.zeros(4)), np.zeros((1, 8)))
    s2 = fd.build_scorer(fd.ScorerFamily("t", 4, 3, 4, "tanh"), 0, d_item=4, prompt_len=2)
    assert fd.assemble_input(s2, np.zeros((2, 4)), np.zeros(4)).shape == (1, 12)
    with pytest.raises(ShapeError):
        fd.assemble_input(s, np.zeros((1, 5)), np.zeros(4))


def test_forward_head_widths_and_determinism():
    rng = make_rng(0)
    for head, width in (("rating5", 5), ("click1", 1)):
        s = fd.build_scorer(fd.get_family("charlie", head), 1)
        P, X = rng.standard_normal((3, 1, 24)), rng.standard_normal((3, 16))
        z1, _ = fd.forward(s, P, X)
        z2, _ = fd.forward(s, P, X)
        assert z1.shape == (3, width)
        assert np.array_equal(z1, z2)


def _hand_forward(s, prompt, item):
    """Straight-line scalar recomputation with plain Python floats."""
    d, l = s.d_model, s.prompt_len
    proj = [sum(item[i] * s.item_proj[i, j] for i in range(s.d_item)) for j in range(d)]
    x = list(np.ravel(prompt)) + proj
    act = {"tanh": math.tanh, "relu": lambda v: max(v, 0.0)}[s.family.nonlinearity]
    for blk in s.blocks:
        D, H = blk.W1.shape
        h = [act(sum(x[i] * blk.W1[i, k] for i in range(D)) + blk.b1[k]) for k in range(H)]
        r = [x[j] + sum(h[k] * blk.W2[k, j] for k in range(H)) + blk.b2[j] for j in range(D)]
        mu = sum(r) / D
        var = sum((v - mu) ** 2 for v in r) / D
        x = [(v - mu) / math.sqrt(var + fd.LN_EPS) * blk.ln_gamma[j] + blk.ln_beta[j] for j, v in enumerate(r)]
    return [sum(x[i] * s.head_W[i, o] for i in range(len(x))) + s.head_b[o] for o in range(s.n_out)]


@pytest.mark.parametrize("nonlin", ["tanh", "relu"])
def test_forward_matches_hand_stepped(nonlin):
    s = tiny(nonlin)
    prompt, item = np.array([[0.3, -1.2]]), np.array([0.7, 0.1])
    z, _ = fd.forward(s, prompt, item)
    np.testing.assert_allclose(z[0], _hand_forward(s, prompt, item), rtol=1e-12, atol=1e-12)


def test_backward_zero_grad():
    s = tiny()
    _, cache = fd.forward(s, np.ones((2, 1, 2)), np.ones((2, 2)))
    np.testing.assert_array_equal(fd.backward_inputs(s, cache, np.zeros((2, 5))), 0.0)


@pytest.mark.parametrize("nonlin,head", [("tanh", "rating5"), ("gelu", "click1"), ("relu", "rating5")])
def test_backward_matches_fd(nonlin, head):
    rng = make_rng(3)
    s = tiny(nonlin, head, l=2, d=3, hidden=5)
    P, X = rng.standard_normal((1, 2, 3)), rng.standard_normal((1, 2))
    w = rng.standard_normal((1, s.n_out))
    _, cache = fd.forward(s, P, X)
    g = fd.backward_inputs(s, cache, w)
    num = finite_difference_gradient(lambda p: float(np.sum(fd.forward(s, p, X)[0] * w)), P)
    assert rel_error(g, num) < 1e-4


def test_backward_linear_depth3_is_chained_product():
    s = tiny("linear", d=2, hidden=3)
    P, X = np.array([[0.5, -0.4]]), np.array([[0.2, 0.9]])
    w = make_rng(8).standard_normal((1, 5))
    _, cache = fd.forward(s, P, X)
    # explicit Jacobians: residual FFN (I + W1 W2), then LayerNorm diag(gamma) (I - 11/n - xhat xhat/n) rstd
    J = np.eye(s.width)
    for blk, (xhat, rstd, gamma) in zip(s.blocks, cache.ln):
        n = s.width
        xh = xhat[0]
        J_ln = (np.eye(n) - np.ones((n, n)) / n - np.outer(xh, xh) / n) * rstd[0, 0]
        J_ln = np.diag(gamma) @ J_ln
        J = J_ln @ (np.eye(n) + (blk.W1 @ blk.W2).T) @ J
    J = s.head_W.T @ J
    expected = (w @ J)[0, :2]
    np.testing.assert_allclose(fd.backward_inputs(s, cache, w)[0, 0], expected, rtol=1e-10, atol=1e-12)


def test_backward_rejects_foreign_cache():
    a, b = tiny(seed=1), tiny(seed=2)
    _, cache = fd.forward(a, np.ones((1, 2)), np.ones(2))
    with pytest.raises(ValueError):
        fd.backward_inputs(b, cache, np.ones((1, 5)))


def test_ffn_activations():
    s = tiny(hidden=16)
    rng = make_rng(0)
    p1, p2 = rng.standard_normal((1, 2)), rng.standard_normal((1, 2))
    f1 = fd.ffn_activations(s, p1)
    assert f1.shape == (1, 48)
    np.testing.assert_array_equal(f1, fd.ffn_activations(s, p1))
    assert not np.array_equal(f1, fd.ffn_activations(s, p2))


def test_ffn_activations_requires_depth3():
    s = tiny()
    shallow = fd.FrozenScorer(s.family, s.seed, s.d_item, 1, s.item_proj, s.blocks[:2], s.head_W, s.head_b)
    with pytest.raises(ValueError):
        fd.ffn_activations(shallow, np.ones((1, 2)))


def test_scorer_roundtrip(tmp_path):
    s = fd.build_scorer(fd.get_family("bravo", "click1"), 99, prompt_len=2)
    path = tmp_path / "m.pums"
    fd.save_scorer(s, path)
    t = fd.load_scorer(path)
    assert t.weights_hash() == s.weights_hash()
    assert t.family == s.family and t.prompt_len == 2 and t.seed == 99
    assert (tmp_path / "m.pums.json").exists()
    with pytest.raises(ValueError):
        fd.scorer_from_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(ValueError):
        fd.scorer_from_bytes(path.read_bytes()[:-8])
