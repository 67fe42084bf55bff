"""Residual migration adapter between prompt spaces.

The adapter concatenates a user's flattened source prompts, projects them
into the target width with ``W_in`` and refines the result with ``R``
pre-norm residual blocks::

    z = [p_1; ...; p_k] @ W_in
    z = z + act(LN(z) @ W1 + b1) @ W2 + b2      (R times)

``W2`` and ``b2`` start at zero so every block is the identity before
training.  Only adapter weights (and, for rating tasks, a fresh target
rating head) are optimized; source prompts and the target scorer are
hashed before and after training and any change raises.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import foundation as fd
from .data import InteractionDataset
from .numeric import (
    AdamState,
    ShapeError,
    activation,
    activation_grad,
    adam_step,
    derive_seed,
    layer_norm_backward,
    layer_norm_forward,
    make_rng,
)
from .prompts import PromptCorpus, RecordCounter, check_task, init_head, task_loss_batch

LN_EPS = 1e-5
PUMA_MAGIC = b"PUMA"
PUMA_VERSION = 1
BLOCK_KEYS = ("ln_gamma", "ln_beta", "W1", "b1", "W2", "b2")


class FrozenContractError(RuntimeError):
    """A frozen input (source prompt or target scorer) changed during training."""


@dataclass
class MigrationAdapter:
    source_dims: list  # [(l, d_src), ...] in input order
    target_dim: tuple  # (l, d_t)
    params: dict  # "W_in" and "block{r}.{key}"
    n_blocks: int
    act: str = "gelu"

    @property
    def in_width(self) -> int:
        return sum(l * d for l, d in self.source_dims)

    @property
    def out_width(self) -> int:
        return self.target_dim[0] * self.target_dim[1]

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def param_names(self) -> list[str]:
        names = ["W_in"]
        for r in range(self.n_blocks):
            names += [f"block{r}.{k}" for k in BLOCK_KEYS]
        return names

    def copy(self) -> "MigrationAdapter":
        return MigrationAdapter(
            list(self.source_dims), tuple(self.target_dim), {k: v.copy() for k, v in self.params.items()}, self.n_blocks, self.act
        )


def build_adapter(source_dims, target_dim, R: int = 2, seed: int = 0, hidden: int = 32, act: str = "gelu") -> MigrationAdapter:
    source_dims = [tuple(int(v) for v in s) for s in source_dims]
    target_dim = tuple(int(v) for v in target_dim)
    if R < 1 or hidden < 1:
        raise ValueError("adapter needs R >= 1 and hidden >= 1")
    if not source_dims or any(l <= 0 or d <= 0 for l, d in source_dims + [target_dim]):
        raise ValueError(f"invalid adapter dims {source_dims} -> {target_dim}")
    if any(l != target_dim[0] for l, _ in source_dims):
        raise ValueError("source and target prompt lengths must match")
    activation(np.zeros(1), act)
    rng = make_rng(derive_seed(seed, "adapter"))
    n_in = sum(l * d for l, d in source_dims)
    w = target_dim[0] * target_dim[1]
    params = {"W_in": rng.standard_normal((n_in, w)) / np.sqrt(n_in)}
    for r in range(R):
        params[f"block{r}.ln_gamma"] = np.ones(w)
        params[f"block{r}.ln_beta"] = np.zeros(w)
        params[f"block{r}.W1"] = rng.standard_normal((w, hidden)) / np.sqrt(w)
        params[f"block{r}.b1"] = np.zeros(hidden)
        params[f"block{r}.W2"] = np.zeros((hidden, w))
        params[f"block{r}.b2"] = np.zeros(w)
    return MigrationAdapter(source_dims, target_dim, params, R, act)


def _source_rows(adapter: MigrationAdapter, sources) -> np.ndarray:
    if len(sources) != len(adapter.source_dims):
        raise ShapeError(f"adapter expects {len(adapter.source_dims)} sources, got {len(sources)}")
    rows = []
    n = None
    for p, (l, d) in zip(sources, adapter.source_dims):
        p = np.asarray(p, dtype=np.float64)
        if p.ndim == 2:
            p = p[None]
        if p.shape[1:] != (l, d):
            raise ShapeError(f"source prompt shape {p.shape[1:]} != declared {(l, d)}")
        if n is not None and len(p) != n:
            raise ShapeError("sources hold different numbers of users")
        n = len(p)
        rows.append(p.reshape(n, l * d))
    return np.concatenate(rows, axis=1)


def adapter_forward_flat(adapter: MigrationAdapter, x: np.ndarray):
    """Forward on flattened, concatenated source rows; returns ``(z, cache)``."""
    P = adapter.params
    z = x @ P["W_in"]
    cache = [x]
    for r in range(adapter.n_blocks):
        pre = f"block{r}."
        zn, ln_cache = layer_norm_forward(z, P[pre + "ln_gamma"], P[pre + "ln_beta"], LN_EPS)
        a = zn @ P[pre + "W1"] + P[pre + "b1"]
        h = activation(a, adapter.act)
        cache.append((zn, ln_cache, a, h))
        z = z + h @ P[pre + "W2"] + P[pre + "b2"]
    return z, cache


def adapter_backward_flat(adapter: MigrationAdapter, cache, g_z: np.ndarray):
    """Parameter gradients (summed over rows) and the gradient w.r.t. the input rows."""
    P = adapter.params
    grads = {}
    for r in range(adapter.n_blocks - 1, -1, -1):
        pre = f"block{r}."
        zn, ln_cache, a, h = cache[r + 1]
        grads[pre + "W2"] = h.T @ g_z
        grads[pre + "b2"] = g_z.sum(axis=0)
        g_a = (g_z @ P[pre + "W2"].T) * activation_grad(a, adapter.act)
        grads[pre + "W1"] = zn.T @ g_a
        grads[pre + "b1"] = g_a.sum(axis=0)
        g_zn = g_a @ P[pre + "W1"].T
        g_in, grads[pre + "ln_gamma"], grads[pre + "ln_beta"] = layer_norm_backward(g_zn, ln_cache)
        g_z = g_z + g_in
    grads["W_in"] = cache[0].T @ g_z
    return grads, g_z @ P["W_in"].T


def adapter_forward(adapter: MigrationAdapter, sources) -> np.ndarray:
    """Target prompts, shape ``(n, l, d_t)``, from one prompt array per source."""
    z, _ = adapter_forward_flat(adapter, _source_rows(adapter, sources))
    return z.reshape(-1, *adapter.target_dim)


# -- training -----------------------------------------------------------------


@dataclass
class AdapterHyper:
    epochs: int = 4
    lr: float = 1e-4
    batch: int = 32
    seed: int = 0
    R: int = 2
    hidden: int = 32
    act: str = "gelu"

    def validate(self) -> None:
        if self.epochs <= 0 or self.lr <= 0 or self.batch <= 0:
            raise ValueError(f"hyperparameters must be positive: {self}")


@dataclass
class MigrationJob:
    sources: list  # PromptCorpus per source model, all frozen
    target: fd.FrozenScorer
    users: np.ndarray  # training user subset
    ds: InteractionDataset
    train_idx: np.ndarray  # training-split record indices
    hyper: AdapterHyper = field(default_factory=AdapterHyper)


@dataclass
class MigrationResult:
    adapter: MigrationAdapter
    head: dict | None
    history: list
    records_processed: int
    provenance: dict


def _frozen_fingerprint(job: MigrationJob) -> list[str]:
    return [c.prompts_hash() for c in job.sources] + [job.target.weights_hash()]


def train_adapter(job: MigrationJob, counter: RecordCounter | None = None) -> MigrationResult:
    """Fit the adapter on the training records of ``job.users``."""
    hyper = job.hyper
    hyper.validate()
    ds, target = job.ds, job.target
    check_task(target, ds.task)
    users = np.unique(np.asarray(job.users, dtype=np.int64))
    for k, c in enumerate(job.sources):
        if c.n_users < ds.n_users or (len(users) and users.max() >= c.n_users):
            raise KeyError(f"source corpus {k} is missing prompts for selected users")
    train_idx = np.asarray(job.train_idx)
    records = train_idx[np.isin(ds.users[train_idx], users)]
    if len(records) == 0:
        raise ValueError("selected users have no training records")

    before = _frozen_fingerprint(job)
    adapter = build_adapter(
        [c.shape for c in job.sources], (target.prompt_len, target.d_model), hyper.R, hyper.seed, hyper.hidden, hyper.act
    )
    rng = make_rng(derive_seed(hyper.seed, "train_adapter"))
    head = init_head(rng) if ds.task == "rating" else None
    params = dict(adapter.params)
    if head is not None:
        params.update({f"head.{k}": v for k, v in head.items()})
    state = AdamState(lr=hyper.lr)
    src_flat = np.concatenate([c.flat() for c in job.sources], axis=1)
    local = counter or RecordCounter()
    start_records = local.records
    history = []
    for _ in range(hyper.epochs):
        order = rng.permutation(records)
        total = 0.0
        for s in range(0, len(order), hyper.batch):
            b = order[s : s + hyper.batch]
            z, a_cache = adapter_forward_flat(adapter, src_flat[ds.users[b]])
            logits, s_cache = fd.forward(target, z, ds.item_embeds[ds.items[b]])
            losses, g_logits, g_head = task_loss_batch(ds.task, logits, ds.y[b], head, 1.0 / len(b))
            total += losses.sum()
            g_prompt = fd.backward_inputs(target, s_cache, g_logits).reshape(len(b), -1)
            grads, _ = adapter_backward_flat(adapter, a_cache, g_prompt)
            grads.update({f"head.{k}": v for k, v in g_head.items()})
            adam_step(params, grads, state)
            local.add(len(b))
        history.append(total / len(order))

    after = _frozen_fingerprint(job)
    if before != after:
        raise FrozenContractError("source prompts or target scorer changed during adapter training")
    provenance = {
        "source_scorers": [c.scorer_id for c in job.sources],
        "source_prompt_sha256": before[:-1],
        "target_scorer": target.scorer_id,
        "target_weights_sha256": before[-1],
        "n_users": int(len(users)),
        "n_records": int(len(records)),
        "hyper": asdict(hyper),
    }
    return MigrationResult(adapter, head, history, local.records - start_records, provenance)


def migrate_corpus(adapter: MigrationAdapter, sources: list, target: fd.FrozenScorer | None = None, head: dict | None = None) -> PromptCorpus:
    """Apply the adapter to every user of the source corpora."""
    n = {c.n_users for c in sources}
    if len(n) != 1:
        raise KeyError(f"source corpora cover different user sets: sizes {sorted(n)}")
    prompts = adapter_forward(adapter, [c.prompts for c in sources])
    head = None if head is None else {k: v.copy() for k, v in head.items()}
    sid = target.scorer_id if target is not None else ""
    return PromptCorpus(prompts, head, sid, {"migrated_from": [c.scorer_id for c in sources]})


# -- persistence ---------------------------------------------------------------


def adapter_to_bytes(adapter: MigrationAdapter, head: dict | None = None) -> bytes:
    """Serialize the adapter; an optional target rating head is appended after the blocks."""
    act = adapter.act.encode()
    hidden = adapter.params["block0.W1"].shape[1]
    out = [PUMA_MAGIC, struct.pack("<HH", PUMA_VERSION, len(adapter.source_dims))]
    out += [struct.pack("<II", l, d) for l, d in adapter.source_dims]
    out.append(struct.pack("<IIIIH", *adapter.target_dim, adapter.n_blocks, hidden, len(act)))
    out.append(act)
    out += [np.ascontiguousarray(adapter.params[k], dtype="<f4").tobytes() for k in adapter.param_names()]
    out.append(struct.pack("<I", 0 if head is None else head["W1"].shape[1]))
    if head is not None:
        out += [np.ascontiguousarray(head[k], dtype="<f4").tobytes() for k in ("W1", "b1", "W2", "b2")]
    return b"".join(out)


def adapter_from_bytes(data: bytes) -> tuple[MigrationAdapter, dict | None]:
    buf = io.BytesIO(data)
    if buf.read(4) != PUMA_MAGIC:
        raise ValueError("not an adapter file (bad magic)")
    version, k = struct.unpack("<HH", buf.read(4))
    if version != PUMA_VERSION:
        raise ValueError(f"unsupported adapter format version {version}")
    source_dims = [struct.unpack("<II", buf.read(8)) for _ in range(k)]
    l, d, R, hidden, n_act = struct.unpack("<IIIIH", buf.read(18))
    act = buf.read(n_act).decode()
    shell = build_adapter(source_dims, (l, d), R, 0, hidden, act)

    def read(shape):
        n = int(np.prod(shape))
        raw = buf.read(4 * n)
        if len(raw) != 4 * n:
            raise ValueError("truncated adapter file")
        return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)

    for name in shell.param_names():
        shell.params[name] = read(shell.params[name].shape)
    (h,) = struct.unpack("<I", buf.read(4))
    head = None
    if h:
        head = dict(zip(("W1", "b1", "W2", "b2"), (read((5, h)), read((h,)), read((h, 1)), read((1,)))))
    return shell, head


def save_adapter(adapter: MigrationAdapter, path, head: dict | None = None, provenance: dict | None = None) -> None:
    path = Path(path)
    raw = adapter_to_bytes(adapter, head)
    path.write_bytes(raw)
    side = {"n_params": adapter.n_params(), "sha256": hashlib.sha256(raw).hexdigest()}
    side.update(provenance or {})
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(side, indent=2, sort_keys=True, default=str))


def load_adapter(path) -> tuple[MigrationAdapter, dict | None]:
    return adapter_from_bytes(Path(path).read_bytes())
