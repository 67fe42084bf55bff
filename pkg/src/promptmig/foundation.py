"""Frozen foundation scorers.

A scorer consumes one soft prompt (``l x d_model``) and one item embedding,
concatenates them into a single input row, runs ``depth`` residual FFN
blocks, and emits task logits.  Weights are drawn once from a seeded
Gaussian and marked read-only; nothing in the package writes to them.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .numeric import (
    ShapeError,
    activation,
    activation_grad,
    layer_norm_backward,
    layer_norm_forward,
    make_rng,
)

HEAD_WIDTH = {"rating5": 5, "click1": 1}
LN_EPS = 1e-5
PUMS_MAGIC = b"PUMS"
PUMS_VERSION = 1


@dataclass(frozen=True)
class ScorerFamily:
    name: str
    d_model: int
    depth: int
    d_hidden: int
    nonlinearity: str
    head: str = "rating5"

    def validate(self) -> None:
        if self.depth < 3:
            raise ValueError(f"family {self.name}: depth must be >= 3, got {self.depth}")
        if self.d_model <= 0 or self.d_hidden <= 0:
            raise ValueError(f"family {self.name}: widths must be positive")
        if self.nonlinearity not in ("tanh", "gelu", "relu", "linear"):
            raise ValueError(f"family {self.name}: unknown nonlinearity {self.nonlinearity!r}")
        if self.head not in HEAD_WIDTH:
            raise ValueError(f"family {self.name}: unknown head {self.head!r}")

    def with_head(self, head: str) -> "ScorerFamily":
        return ScorerFamily(self.name, self.d_model, self.depth, self.d_hidden, self.nonlinearity, head)


FAMILIES = {
    "alpha": ScorerFamily("alpha", 32, 3, 128, "tanh"),
    "bravo": ScorerFamily("bravo", 48, 4, 192, "gelu"),
    "charlie": ScorerFamily("charlie", 24, 3, 96, "relu"),
    "delta": ScorerFamily("delta", 64, 5, 256, "gelu"),
    "echo": ScorerFamily("echo", 16, 3, 64, "tanh"),
}


def get_family(name: str, head: str = "rating5") -> ScorerFamily:
    try:
        fam = FAMILIES[name]
    except KeyError:
        raise ValueError(f"unknown scorer family {name!r}; known: {sorted(FAMILIES)}") from None
    return fam.with_head(head)


@dataclass(frozen=True)
class Block:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    ln_gamma: np.ndarray
    ln_beta: np.ndarray


@dataclass(frozen=True)
class FrozenScorer:
    family: ScorerFamily
    seed: int
    d_item: int
    prompt_len: int
    item_proj: np.ndarray
    blocks: tuple
    head_W: np.ndarray
    head_b: np.ndarray

    @property
    def d_model(self) -> int:
        return self.family.d_model

    @property
    def width(self) -> int:
        return (self.prompt_len + 1) * self.family.d_model

    @property
    def n_out(self) -> int:
        return HEAD_WIDTH[self.family.head]

    def tensors(self) -> list[np.ndarray]:
        out = [self.item_proj]
        for blk in self.blocks:
            out += [blk.W1, blk.b1, blk.W2, blk.b2, blk.ln_gamma, blk.ln_beta]
        out += [self.head_W, self.head_b]
        return out

    def n_params(self) -> int:
        return sum(t.size for t in self.tensors())

    def weights_hash(self) -> str:
        h = hashlib.sha256()
        for t in self.tensors():
            h.update(np.ascontiguousarray(t, dtype="<f8").tobytes())
        return h.hexdigest()

    @property
    def scorer_id(self) -> str:
        return f"{self.family.name}:{self.family.head}:{self.seed}:{self.weights_hash()[:16]}"


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def build_scorer(family: ScorerFamily, seed: int, d_item: int = 16, prompt_len: int = 1) -> FrozenScorer:
    """Draw a scorer's weights from ``N(0, 1/fan_in)``; LayerNorm starts at (1, 0)."""
    family.validate()
    if d_item <= 0 or prompt_len <= 0:
        raise ValueError("d_item and prompt_len must be positive")
    rng = make_rng(seed)
    D, H = (prompt_len + 1) * family.d_model, family.d_hidden

    def gauss(fan_in, shape):
        return _frozen(rng.standard_normal(shape) / np.sqrt(fan_in))

    item_proj = gauss(d_item, (d_item, family.d_model))
    blocks = []
    for _ in range(family.depth):
        blocks.append(
            Block(
                W1=gauss(D, (D, H)),
                b1=gauss(D, (H,)),
                W2=gauss(H, (H, D)),
                b2=gauss(H, (D,)),
                ln_gamma=_frozen(np.ones(D)),
                ln_beta=_frozen(np.zeros(D)),
            )
        )
    n_out = HEAD_WIDTH[family.head]
    return FrozenScorer(
        family=family,
        seed=int(seed),
        d_item=d_item,
        prompt_len=prompt_len,
        item_proj=item_proj,
        blocks=tuple(blocks),
        head_W=gauss(D, (D, n_out)),
        head_b=_frozen(np.zeros(n_out)),
    )


def _prompt_rows(scorer: FrozenScorer, prompts) -> np.ndarray:
    p = np.asarray(prompts, dtype=np.float64)
    l, d = scorer.prompt_len, scorer.d_model
    if p.ndim == 2 and p.shape == (l, d):
        p = p[None]
    if p.ndim == 3 and p.shape[1:] == (l, d):
        return p.reshape(len(p), l * d)
    if p.ndim == 2 and p.shape[1] == l * d:
        return p
    raise ShapeError(f"prompt shape {p.shape} does not match scorer ({l}, {d})")


def assemble_input(scorer: FrozenScorer, prompts, item_embeds) -> np.ndarray:
    """Concatenate flattened prompts with projected items, one row per pair."""
    P = _prompt_rows(scorer, prompts)
    X = np.asarray(item_embeds, dtype=np.float64)
    if X.ndim == 1:
        X = X[None]
    if X.shape[1] != scorer.d_item:
        raise ShapeError(f"item embed width {X.shape[1]} != scorer d_item {scorer.d_item}")
    if len(P) != len(X):
        raise ShapeError(f"{len(P)} prompts vs {len(X)} items")
    return np.concatenate([P, X @ scorer.item_proj], axis=1)


@dataclass
class ForwardCache:
    scorer_id: int
    x0: np.ndarray
    pre: list
    post: list
    ln: list


def forward(scorer: FrozenScorer, prompts, item_embeds):
    """Logits of shape ``(batch, n_out)`` and the cache for :func:`backward_inputs`."""
    x = assemble_input(scorer, prompts, item_embeds)
    kind = scorer.family.nonlinearity
    cache = ForwardCache(id(scorer), x, [], [], [])
    for blk in scorer.blocks:
        a = x @ blk.W1 + blk.b1
        h = activation(a, kind)
        s = x + h @ blk.W2 + blk.b2
        x, ln_cache = layer_norm_forward(s, blk.ln_gamma, blk.ln_beta, LN_EPS)
        cache.pre.append(a)
        cache.post.append(h)
        cache.ln.append(ln_cache)
    return x @ scorer.head_W + scorer.head_b, cache


def backward_full_input(scorer: FrozenScorer, cache: ForwardCache, grad_logits) -> np.ndarray:
    if cache.scorer_id != id(scorer):
        raise ValueError("forward cache was produced by a different scorer")
    g = np.asarray(grad_logits, dtype=np.float64)
    if g.ndim == 1:
        g = g[None]
    if g.shape != (len(cache.x0), scorer.n_out):
        raise ShapeError(f"grad_logits{g.shape} vs logits({len(cache.x0)}, {scorer.n_out})")
    kind = scorer.family.nonlinearity
    gx = g @ scorer.head_W.T
    for k in range(len(scorer.blocks) - 1, -1, -1):
        blk = scorer.blocks[k]
        gs = layer_norm_backward(gx, cache.ln[k])[0]
        ga = (gs @ blk.W2.T) * activation_grad(cache.pre[k], kind)
        gx = gs + ga @ blk.W1.T
    return gx


def backward_inputs(scorer: FrozenScorer, cache: ForwardCache, grad_logits) -> np.ndarray:
    """Gradient of ``sum(logits * grad_logits)`` w.r.t. the prompts, shape ``(batch, l, d)``."""
    gx = backward_full_input(scorer, cache, grad_logits)
    l, d = scorer.prompt_len, scorer.d_model
    return gx[:, : l * d].reshape(-1, l, d)


def ffn_activations(scorer: FrozenScorer, prompts) -> np.ndarray:
    """Post-activation hidden vectors of the last three blocks, zero probe item."""
    if len(scorer.blocks) < 3:
        raise ValueError("ffn_activations needs a scorer with depth >= 3")
    P = _prompt_rows(scorer, prompts)
    _, cache = forward(scorer, P, np.zeros((len(P), scorer.d_item)))
    return np.concatenate(cache.post[-3:], axis=1)


# -- persistence ---------------------------------------------------------------


def _pack_str(s: str) -> bytes:
    b = s.encode()
    return struct.pack("<H", len(b)) + b


def _unpack_str(buf: io.BytesIO) -> str:
    (n,) = struct.unpack("<H", buf.read(2))
    return buf.read(n).decode()


def scorer_to_bytes(scorer: FrozenScorer) -> bytes:
    f = scorer.family
    out = [PUMS_MAGIC, struct.pack("<H", PUMS_VERSION)]
    out += [_pack_str(f.name), _pack_str(f.nonlinearity), _pack_str(f.head)]
    out.append(struct.pack("<IIIIIQ", f.d_model, f.depth, f.d_hidden, scorer.d_item, scorer.prompt_len, scorer.seed))
    for t in scorer.tensors():
        out.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
    return b"".join(out)


def scorer_from_bytes(data: bytes) -> FrozenScorer:
    buf = io.BytesIO(data)
    if buf.read(4) != PUMS_MAGIC:
        raise ValueError("not a scorer file (bad magic)")
    (version,) = struct.unpack("<H", buf.read(2))
    if version != PUMS_VERSION:
        raise ValueError(f"unsupported scorer format version {version}")
    name, nonlin, head = _unpack_str(buf), _unpack_str(buf), _unpack_str(buf)
    d_model, depth, d_hidden, d_item, l, seed = struct.unpack("<IIIIIQ", buf.read(28))
    fam = ScorerFamily(name, d_model, depth, d_hidden, nonlin, head)
    fam.validate()
    D, H = (l + 1) * d_model, d_hidden

    def read(shape):
        n = int(np.prod(shape))
        raw = buf.read(8 * n)
        if len(raw) != 8 * n:
            raise ValueError("truncated scorer file")
        return _frozen(np.frombuffer(raw, dtype="<f8").reshape(shape))

    item_proj = read((d_item, d_model))
    blocks = tuple(
        Block(read((D, H)), read((H,)), read((H, D)), read((D,)), read((D,)), read((D,)))
        for _ in range(depth)
    )
    n_out = HEAD_WIDTH[head]
    return FrozenScorer(fam, seed, d_item, l, item_proj, blocks, read((D, n_out)), read((n_out,)))


def save_scorer(scorer: FrozenScorer, path) -> None:
    path = Path(path)
    path.write_bytes(scorer_to_bytes(scorer))
    side = {
        "family": asdict(scorer.family),
        "seed": scorer.seed,
        "d_item": scorer.d_item,
        "prompt_len": scorer.prompt_len,
        "n_params": scorer.n_params(),
        "weights_sha256": scorer.weights_hash(),
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(side, indent=2, sort_keys=True))


def load_scorer(path) -> FrozenScorer:
    return scorer_from_bytes(Path(path).read_bytes())
