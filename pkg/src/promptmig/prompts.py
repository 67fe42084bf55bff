"""Per-user soft prompts trained against a frozen scorer.

Rating records use ``0.8 * MSE + 0.2 * CE``: cross-entropy over the five
rating logits, and squared error of a small MLP head that regresses a
rating from the same raw logits.  Click records use binary cross-entropy
on the single logit.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import foundation as fd
from .data import InteractionDataset
from .metrics import MetricsReport, click_report, rating_report
from .numeric import (
    AdamState,
    ShapeError,
    adam_step,
    derive_seed,
    make_rng,
    sigmoid,
    softmax_cross_entropy,
    softmax_cross_entropy_batch,
    softplus,
)

MSE_WEIGHT = 0.8
CE_WEIGHT = 0.2
INIT_SD = 0.02
HEAD_HIDDEN = 16
RATING_MID = 3.0
PUMP_MAGIC = b"PUMP"
PUMP_VERSION = 1

TASK_HEADS = {"rating": "rating5", "click": "click1"}


@dataclass
class TrainHyper:
    epochs: int = 15
    lr: float = 5e-4
    batch: int = 32
    seed: int = 0

    def validate(self) -> None:
        if self.epochs <= 0 or self.lr <= 0 or self.batch <= 0:
            raise ValueError(f"hyperparameters must be positive: {self}")


class RecordCounter:
    """Counts record forward/backward passes inside training loops."""

    def __init__(self):
        self.records = 0
        self.steps = 0

    def add(self, n: int) -> None:
        self.records += int(n)
        self.steps += 1


# -- rating head ------------------------------------------------------------


def init_head(rng: np.random.Generator, hidden: int = HEAD_HIDDEN) -> dict:
    """Small-Gaussian head; the output bias starts at the middle of the 1..5 scale."""
    return {
        "W1": INIT_SD * rng.standard_normal((5, hidden)),
        "b1": INIT_SD * rng.standard_normal(hidden),
        "W2": INIT_SD * rng.standard_normal((hidden, 1)),
        "b2": np.full(1, RATING_MID) + INIT_SD * rng.standard_normal(1),
    }


def head_forward(head: dict, logits: np.ndarray):
    a = logits @ head["W1"] + head["b1"]
    t = np.tanh(a)
    return (t @ head["W2"] + head["b2"])[:, 0], (logits, t)


def head_backward(head: dict, cache, g_out: np.ndarray):
    """Returns ``(grad_logits, grad_head)``; head grads summed over the batch."""
    logits, t = cache
    g_out = g_out[:, None]
    g_t = g_out @ head["W2"].T
    g_a = g_t * (1.0 - t * t)
    grads = {
        "W1": logits.T @ g_a,
        "b1": g_a.sum(axis=0),
        "W2": t.T @ g_out,
        "b2": g_out.sum(axis=0),
    }
    return g_a @ head["W1"].T, grads


def head_predict(head: dict, logits: np.ndarray) -> np.ndarray:
    return head_forward(head, np.atleast_2d(logits))[0]


def rating_loss(logits5, head: dict, y: int):
    """``(loss, grad_logits, grad_head)`` for a single rating record."""
    if y not in (1, 2, 3, 4, 5):
        raise ValueError(f"rating must be in 1..5, got {y}")
    logits5 = np.asarray(logits5, dtype=np.float64)
    ce, g_ce = softmax_cross_entropy(logits5, int(y) - 1)
    yhat, cache = head_forward(head, logits5[None])
    err = yhat[0] - y
    g_logits, g_head = head_backward(head, cache, np.array([2.0 * MSE_WEIGHT * err]))
    loss = MSE_WEIGHT * err * err + CE_WEIGHT * ce
    return float(loss), g_logits[0] + CE_WEIGHT * g_ce, g_head


def click_loss(logit: float, y: int):
    """Binary cross-entropy on one logit: ``(loss, d loss / d logit)``."""
    z = float(logit)
    # softplus(-z) for a positive, softplus(z) for a negative: no cancellation at large |z|
    loss = float(softplus(-z if y else z))
    return loss, float(sigmoid(np.array([z]))[0] - y)


def task_loss_batch(task: str, logits: np.ndarray, y: np.ndarray, head: dict | None, scale: float = 1.0):
    """Per-record losses, ``scale``-weighted logit grads, and summed head grads."""
    if task == "rating":
        labels = y.astype(np.int64) - 1
        ce, g_ce = softmax_cross_entropy_batch(logits, labels)
        yhat, cache = head_forward(head, logits)
        err = yhat - y
        g_logits, g_head = head_backward(head, cache, 2.0 * MSE_WEIGHT * err * scale)
        losses = MSE_WEIGHT * err * err + CE_WEIGHT * ce
        return losses, g_logits + CE_WEIGHT * scale * g_ce, g_head
    z = logits[:, 0]
    losses = softplus(np.where(y > 0.5, -z, z))
    return losses, ((sigmoid(z) - y) * scale)[:, None], {}


# -- corpus -------------------------------------------------------------------


@dataclass
class PromptCorpus:
    prompts: np.ndarray  # (n_users, l, d)
    head: dict | None = None
    scorer_id: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def n_users(self) -> int:
        return self.prompts.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.prompts.shape[1], self.prompts.shape[2]

    def flat(self) -> np.ndarray:
        return self.prompts.reshape(self.n_users, -1)

    def copy(self) -> "PromptCorpus":
        head = None if self.head is None else {k: v.copy() for k, v in self.head.items()}
        return PromptCorpus(self.prompts.copy(), head, self.scorer_id, dict(self.meta))

    def prompts_hash(self) -> str:
        import hashlib

        return hashlib.sha256(np.ascontiguousarray(self.prompts, dtype="<f8").tobytes()).hexdigest()


def init_prompts(n_users: int, l: int, d: int, seed: int, task: str = "rating") -> PromptCorpus:
    if l <= 0 or d <= 0 or n_users <= 0:
        raise ValueError("n_users, l and d must be positive")
    rng = make_rng(derive_seed(seed, "init_prompts"))
    prompts = INIT_SD * rng.standard_normal((n_users, l, d))
    head = init_head(rng) if task == "rating" else None
    return PromptCorpus(prompts, head)


def check_task(scorer: fd.FrozenScorer, task: str) -> None:
    if TASK_HEADS[task] != scorer.family.head:
        raise ValueError(f"scorer head {scorer.family.head!r} cannot serve the {task!r} task")


def train_prompts(
    scorer: fd.FrozenScorer,
    ds: InteractionDataset,
    train_idx: np.ndarray,
    hyper: TrainHyper,
    init: PromptCorpus | None = None,
    update_prompts: bool = True,
    update_head: bool = True,
    counter: RecordCounter | None = None,
) -> tuple[PromptCorpus, list[float]]:
    """Fit per-user prompts (and the shared rating head) with the scorer frozen.

    ``update_prompts=False`` keeps prompts at their initial values and trains
    only the head; this is the random-initialization baseline.  Returns the
    corpus and the mean training loss of every epoch.
    """
    hyper.validate()
    check_task(scorer, ds.task)
    if init is None:
        init = init_prompts(ds.n_users, scorer.prompt_len, scorer.d_model, hyper.seed, ds.task)
    if init.shape != (scorer.prompt_len, scorer.d_model) or init.n_users != ds.n_users:
        raise ShapeError(f"initial corpus {init.prompts.shape} incompatible with scorer/dataset")
    corpus = init.copy()
    params = {"prompts": corpus.prompts}
    if corpus.head is not None and update_head:
        params.update({f"head.{k}": v for k, v in corpus.head.items()})
    state = AdamState(lr=hyper.lr)
    rng = make_rng(derive_seed(hyper.seed, "train_prompts"))
    train_idx = np.asarray(train_idx)
    history = []
    for _ in range(hyper.epochs):
        order = rng.permutation(train_idx)
        total = 0.0
        for start in range(0, len(order), hyper.batch):
            b = order[start : start + hyper.batch]
            u = ds.users[b]
            logits, cache = fd.forward(scorer, corpus.prompts[u], ds.item_embeds[ds.items[b]])
            losses, g_logits, g_head = task_loss_batch(ds.task, logits, ds.y[b], corpus.head, 1.0 / len(b))
            total += losses.sum()
            grads = {}
            if update_prompts:
                g_rec = fd.backward_inputs(scorer, cache, g_logits)
                g_p = np.zeros_like(corpus.prompts)
                np.add.at(g_p, u, g_rec)
                grads["prompts"] = g_p
            if corpus.head is not None and update_head:
                grads.update({f"head.{k}": v for k, v in g_head.items()})
            if grads:
                adam_step(params, grads, state)
            if counter is not None:
                counter.add(len(b))
        history.append(total / len(order))
    corpus.scorer_id = scorer.scorer_id
    corpus.meta = {"hyper": asdict(hyper), "update_prompts": update_prompts, "epoch_loss": history}
    return corpus, history


def predict(scorer: fd.FrozenScorer, corpus: PromptCorpus, ds: InteractionDataset, idx: np.ndarray, batch: int = 4096):
    """Rating predictions (clamped head output) or click probabilities for ``idx``."""
    check_task(scorer, ds.task)
    out = []
    for start in range(0, len(idx), batch):
        b = idx[start : start + batch]
        logits, _ = fd.forward(scorer, corpus.prompts[ds.users[b]], ds.item_embeds[ds.items[b]])
        if ds.task == "rating":
            out.append(np.clip(head_forward(corpus.head, logits)[0], 1.0, 5.0))
        else:
            out.append(sigmoid(logits[:, 0]))
    return np.concatenate(out) if out else np.zeros(0)


def expected_rating(scorer: fd.FrozenScorer, corpus: PromptCorpus, ds: InteractionDataset, idx: np.ndarray):
    """Softmax-expectation rating, logged beside the head's prediction."""
    logits, _ = fd.forward(scorer, corpus.prompts[ds.users[idx]], ds.item_embeds[ds.items[idx]])
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    return p @ np.arange(1.0, 6.0)


def evaluate(scorer: fd.FrozenScorer, corpus: PromptCorpus, ds: InteractionDataset, idx: np.ndarray) -> MetricsReport:
    idx = np.asarray(idx)
    if corpus.n_users < ds.n_users:
        raise KeyError(f"corpus holds {corpus.n_users} prompts but dataset has {ds.n_users} users")
    pred = predict(scorer, corpus, ds, idx)
    if ds.task == "rating":
        exp_r = expected_rating(scorer, corpus, ds, idx)
        return rating_report(pred, ds.y[idx], rmse_softmax_expectation=float(np.sqrt(np.mean((exp_r - ds.y[idx]) ** 2))))
    return click_report(pred, ds.y[idx], ds.users[idx])


def per_record_loss(scorer: fd.FrozenScorer, corpus: PromptCorpus, ds: InteractionDataset, idx: np.ndarray) -> np.ndarray:
    idx = np.asarray(idx)
    logits, _ = fd.forward(scorer, corpus.prompts[ds.users[idx]], ds.item_embeds[ds.items[idx]])
    return task_loss_batch(ds.task, logits, ds.y[idx], corpus.head)[0]


# -- persistence ---------------------------------------------------------------

_HEAD_KEYS = ("W1", "b1", "W2", "b2")


def corpus_to_bytes(corpus: PromptCorpus) -> bytes:
    n, (l, d) = corpus.n_users, corpus.shape
    sid = corpus.scorer_id.encode()
    out = [PUMP_MAGIC, struct.pack("<HH", PUMP_VERSION, len(sid)), sid, struct.pack("<III", l, d, n)]
    out.append(np.ascontiguousarray(corpus.prompts, dtype="<f4").tobytes())
    if corpus.head is None:
        out.append(struct.pack("<I", 0))
    else:
        out.append(struct.pack("<I", corpus.head["W1"].shape[1]))
        out += [np.ascontiguousarray(corpus.head[k], dtype="<f4").tobytes() for k in _HEAD_KEYS]
    return b"".join(out)


def corpus_from_bytes(data: bytes) -> PromptCorpus:
    buf = io.BytesIO(data)
    if buf.read(4) != PUMP_MAGIC:
        raise ValueError("not a prompt corpus file (bad magic)")
    version, n_sid = struct.unpack("<HH", buf.read(4))
    if version != PUMP_VERSION:
        raise ValueError(f"unsupported corpus format version {version}")
    sid = buf.read(n_sid).decode()
    l, d, n = struct.unpack("<III", buf.read(12))

    def read(shape):
        k = int(np.prod(shape))
        raw = buf.read(4 * k)
        if len(raw) != 4 * k:
            raise ValueError("truncated corpus file")
        return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)

    prompts = read((n, l, d))
    (h,) = struct.unpack("<I", buf.read(4))
    head = None
    if h:
        head = dict(zip(_HEAD_KEYS, (read((5, h)), read((h,)), read((h, 1)), read((1,)))))
    return PromptCorpus(prompts, head, sid)


def round_to_f32(corpus: PromptCorpus) -> PromptCorpus:
    """Corpus exactly as it would come back from disk."""
    return corpus_from_bytes(corpus_to_bytes(corpus))


def save_corpus(corpus: PromptCorpus, path) -> None:
    path = Path(path)
    path.write_bytes(corpus_to_bytes(corpus))
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps({"scorer_id": corpus.scorer_id, "shape": list(corpus.prompts.shape), **corpus.meta}, indent=2, sort_keys=True)
    )


def load_corpus(path) -> PromptCorpus:
    c = corpus_from_bytes(Path(path).read_bytes())
    side = Path(path).with_suffix(Path(path).suffix + ".json")
    if side.exists():
        meta = json.loads(side.read_text())
        c.meta = {k: v for k, v in meta.items() if k not in ("scorer_id", "shape")}
    return c
