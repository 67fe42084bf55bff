"""Synthetic user-item interaction data for rating and click tasks."""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numeric import derive_seed, make_rng, sigmoid

PUMD_MAGIC = b"PUMD"
PUMD_VERSION = 1
TASK_CODES = {"rating": 0, "click": 1}


@dataclass(frozen=True)
class DataConfig:
    task: str = "rating"
    n_users: int = 500
    n_items: int = 1000
    mean_records_per_user: float = 40.0
    d_latent: int = 4
    noise_sd: float = 0.5
    item_noise_sd: float = 0.3
    # ``None`` calibrates the bias so the expected positive rate is ``target_positive_ratio``
    click_bias: float | None = None
    target_positive_ratio: float = 0.178

    def validate(self) -> None:
        if self.task not in TASK_CODES:
            raise ValueError(f"unknown task {self.task!r}")
        if self.n_users <= 0 or self.n_items <= 0 or self.d_latent <= 0:
            raise ValueError("n_users, n_items, d_latent must be positive")
        if self.mean_records_per_user <= 0:
            raise ValueError("mean_records_per_user must be positive")
        if self.n_items < 2:
            raise ValueError("need at least 2 items so every user gets 2 records")
        if self.noise_sd < 0 or self.item_noise_sd < 0:
            raise ValueError("noise levels must be non-negative")
        if not 0 < self.target_positive_ratio < 1:
            raise ValueError("target_positive_ratio must lie in (0, 1)")


@dataclass
class InteractionDataset:
    task: str
    n_users: int
    item_embeds: np.ndarray  # (n_items, d_item); row i is the item's representation
    users: np.ndarray  # per-record user index
    items: np.ndarray  # per-record item index
    y: np.ndarray  # per-record outcome
    # generator state; never read by training or selection code
    _user_latent: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def n_items(self) -> int:
        return len(self.item_embeds)

    @property
    def n_records(self) -> int:
        return len(self.y)

    @property
    def d_item(self) -> int:
        return self.item_embeds.shape[1]

    def records_of(self, u: int) -> np.ndarray:
        return self._by_user()[u]

    def _by_user(self) -> list[np.ndarray]:
        cached = self.__dict__.get("_user_index")
        if cached is None:
            order = np.argsort(self.users, kind="stable")
            bounds = np.searchsorted(self.users[order], np.arange(self.n_users + 1))
            cached = [order[bounds[u] : bounds[u + 1]] for u in range(self.n_users)]
            self.__dict__["_user_index"] = cached
        return cached


@dataclass(frozen=True)
class DatasetStats:
    n_users: int
    n_items: int
    n_records: int
    records_per_user: float
    sparsity: float
    positive_ratio: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["positive_ratio"] is None:
            del d["positive_ratio"]
        return d


def calibrate_click_bias(scores: np.ndarray, target: float, tol: float = 1e-10) -> float:
    """Bisection for ``b`` with ``mean(sigmoid(scores + b)) == target``."""
    lo, hi = -50.0, 50.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if sigmoid(scores + mid).mean() < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def generate_dataset(cfg: DataConfig, seed: int) -> InteractionDataset:
    cfg.validate()
    rng = make_rng(derive_seed(seed, "data"))
    d = cfg.d_latent
    # affinity <z_u, x_i> has unit variance
    z = rng.standard_normal((cfg.n_users, d)) / np.sqrt(d)
    x = rng.standard_normal((cfg.n_items, d))
    # stored as f32 on disk; round now so a reloaded dataset is bit-identical
    embeds = (x + cfg.item_noise_sd * rng.standard_normal(x.shape)).astype(np.float32).astype(np.float64)

    counts = np.maximum(rng.poisson(cfg.mean_records_per_user, cfg.n_users), 2)
    counts = np.minimum(counts, cfg.n_items)
    users = np.repeat(np.arange(cfg.n_users), counts)
    items = np.concatenate([rng.choice(cfg.n_items, size=c, replace=False) for c in counts])
    affinity = np.einsum("rd,rd->r", z[users], x[items])

    if cfg.task == "rating":
        eps = cfg.noise_sd * rng.standard_normal(len(users))
        y = np.clip(np.round(3.0 + 1.5 * affinity + eps), 1, 5)
    else:
        bias = cfg.click_bias
        if bias is None:
            bias = calibrate_click_bias(affinity, cfg.target_positive_ratio)
        y = (rng.random(len(users)) < sigmoid(affinity + bias)).astype(np.float64)
    return InteractionDataset(
        task=cfg.task,
        n_users=cfg.n_users,
        item_embeds=embeds,
        users=users.astype(np.int64),
        items=items.astype(np.int64),
        y=y.astype(np.float64),
        _user_latent=z,
    )


@dataclass(frozen=True)
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def get(self, name: str) -> np.ndarray:
        if name not in ("train", "val", "test", "all"):
            raise ValueError(f"unknown split {name!r}")
        if name == "all":
            return np.sort(np.concatenate([self.train, self.val, self.test]))
        return getattr(self, name)


def split(ds: InteractionDataset, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> Split:
    """Per-user split with global error carrying.

    Each user's records are shuffled and cut so that running totals track
    ``ratios`` to within one record overall.  Every user keeps at least one
    training record; a user with a single record is train-only.
    """
    r = np.asarray(ratios, dtype=np.float64)
    if r.shape != (3,) or (r < 0).any() or not np.isclose(r.sum(), 1.0):
        raise ValueError(f"split ratios must be 3 non-negative values summing to 1, got {ratios}")
    rng = make_rng(derive_seed(seed, "split"))
    parts = ([], [], [])
    expect = np.zeros(2)
    given = np.zeros(2, dtype=np.int64)
    for u in range(ds.n_users):
        recs = rng.permutation(ds.records_of(u))
        n = len(recs)
        expect += r[1:] * n
        want = np.maximum(np.round(expect).astype(np.int64) - given, 0)
        n_val, n_test = int(want[0]), int(want[1])
        # keep at least one training record
        while n_val + n_test > n - 1:
            if n_test >= n_val and n_test > 0:
                n_test -= 1
            else:
                n_val -= 1
        given += (n_val, n_test)
        n_train = n - n_val - n_test
        parts[0].append(recs[:n_train])
        parts[1].append(recs[n_train : n_train + n_val])
        parts[2].append(recs[n_train + n_val :])
    return Split(*(np.sort(np.concatenate(p)).astype(np.int64) for p in parts))


def user_outcome_variance(ds: InteractionDataset, u: int, train_idx: np.ndarray | None = None) -> float:
    """Population variance of user ``u``'s outcomes, restricted to ``train_idx`` if given."""
    if not 0 <= u < ds.n_users:
        raise KeyError(f"unknown user {u}")
    recs = ds.records_of(u)
    if train_idx is not None:
        recs = recs[np.isin(recs, train_idx)]
    if len(recs) == 0:
        raise ValueError(f"user {u} has no training records")
    return float(np.var(ds.y[recs]))


def all_user_variances(ds: InteractionDataset, train_idx: np.ndarray) -> np.ndarray:
    y = ds.y[train_idx]
    u = ds.users[train_idx]
    n = np.bincount(u, minlength=ds.n_users).astype(np.float64)
    s1 = np.bincount(u, weights=y, minlength=ds.n_users)
    s2 = np.bincount(u, weights=y * y, minlength=ds.n_users)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = s1 / n
        var = s2 / n - mean * mean
    return np.maximum(np.nan_to_num(var), 0.0)


def stats(ds: InteractionDataset) -> DatasetStats:
    n = ds.n_records
    return DatasetStats(
        n_users=ds.n_users,
        n_items=ds.n_items,
        n_records=n,
        records_per_user=n / ds.n_users,
        sparsity=1.0 - n / (ds.n_users * ds.n_items),
        positive_ratio=float(ds.y.mean()) if ds.task == "click" else None,
    )


# -- persistence ---------------------------------------------------------------


def dataset_to_bytes(ds: InteractionDataset) -> bytes:
    head = PUMD_MAGIC + struct.pack(
        "<HBIIII", PUMD_VERSION, TASK_CODES[ds.task], ds.n_users, ds.n_items, ds.n_records, ds.d_item
    )
    rec = np.zeros(ds.n_records, dtype=[("u", "<u4"), ("i", "<u4"), ("y", "<f4")])
    rec["u"], rec["i"], rec["y"] = ds.users, ds.items, ds.y
    return head + rec.tobytes() + np.ascontiguousarray(ds.item_embeds, dtype="<f4").tobytes()


def dataset_from_bytes(data: bytes) -> InteractionDataset:
    buf = io.BytesIO(data)
    if buf.read(4) != PUMD_MAGIC:
        raise ValueError("not a dataset file (bad magic)")
    version, task, n_users, n_items, n_rec, d_item = struct.unpack("<HBIIII", buf.read(19))
    if version != PUMD_VERSION:
        raise ValueError(f"unsupported dataset format version {version}")
    rec = np.frombuffer(buf.read(12 * n_rec), dtype=[("u", "<u4"), ("i", "<u4"), ("y", "<f4")])
    emb = np.frombuffer(buf.read(4 * n_items * d_item), dtype="<f4").reshape(n_items, d_item)
    if len(rec) != n_rec or emb.size != n_items * d_item:
        raise ValueError("truncated dataset file")
    task_name = {v: k for k, v in TASK_CODES.items()}[task]
    return InteractionDataset(
        task=task_name,
        n_users=n_users,
        item_embeds=emb.astype(np.float64),
        users=rec["u"].astype(np.int64),
        items=rec["i"].astype(np.int64),
        y=rec["y"].astype(np.float64),
    )


def save_dataset(ds: InteractionDataset, path) -> None:
    path = Path(path)
    path.write_bytes(dataset_to_bytes(ds))
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps({"task": ds.task, **stats(ds).to_dict()}, indent=2, sort_keys=True)
    )


def load_dataset(path) -> InteractionDataset:
    return dataset_from_bytes(Path(path).read_bytes())
