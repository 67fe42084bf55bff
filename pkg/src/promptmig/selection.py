"""User-subset selection for adapter training.

The default strategy (``kmeans_var_strat``) clusters users on their source
prompts, gives every cluster a share of the budget proportional to its size,
then inside each cluster splits users into equal-frequency bins of
historical outcome variance and fills the bins with Gaussian weights that
favour the middle of the variance range.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import foundation as fd
from .data import InteractionDataset, all_user_variances
from .numeric import derive_seed, make_rng
from .prompts import PromptCorpus, per_record_loss

STRATEGIES = (
    "random",
    "variance_bucket",
    "loss_bucket",
    "kmeans_stratified",
    "kmeans_pca",
    "kmeans_fps",
    "kmeans_loss_strat",
    "kmeans_var_strat",
    "ffn_kmeans",
    "ffn_kmeans_loss",
    "ffn_kmeans_var",
)
PUMA_STRATEGY = "kmeans_var_strat"


@dataclass
class SelectionConfig:
    strategy: str = PUMA_STRATEGY
    budget: int = 100
    k: int | None = None  # None -> ceil(sqrt(budget))
    bins: int = 5
    sigma: float = 1.0
    pca_components: int = 8
    seed: int = 0

    def validate(self, n_users: int | None = None) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; known: {STRATEGIES}")
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if self.k is not None and self.k < 1:
            raise ValueError("k must be >= 1")
        if self.bins < 1 or self.sigma <= 0 or self.pca_components < 1:
            raise ValueError("bins, sigma and pca_components must be positive")


@dataclass
class SelectionResult:
    users: np.ndarray
    cluster_of: np.ndarray
    bin_of: np.ndarray
    audit: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "users": self.users.tolist(),
            "cluster_of": self.cluster_of.tolist(),
            "bin_of": self.bin_of.tolist(),
            "audit": self.audit,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SelectionResult":
        return cls(
            np.asarray(d["users"], dtype=np.int64),
            np.asarray(d["cluster_of"], dtype=np.int64),
            np.asarray(d["bin_of"], dtype=np.int64),
            d.get("audit", {}),
        )


# -- primitives ---------------------------------------------------------------


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans(points: np.ndarray, k: int, seed: int = 0, tol: float = 1e-6, max_iter: int = 100, n_init: int = 10):
    """Greedy k-means++ seeding, Lloyd iterations, then Hartigan transfers; best of ``n_init`` restarts.

    During Lloyd an emptied cluster takes the point farthest from its own centroid.
    Returns ``(assignments, centroids, inertia)`` of the lowest-inertia run
    (earliest run on ties).
    """
    X = np.asarray(points, dtype=np.float64)
    n = len(X)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must be in [1, {n}]")
    if n_init < 1:
        raise ValueError("n_init must be >= 1")
    rng = make_rng(derive_seed(seed, "kmeans"))
    best = None
    for _ in range(n_init):
        run = _lloyd(X, k, rng, tol, max_iter)
        if best is None or run[2] < best[2]:
            best = run
    return best


def _lloyd(X: np.ndarray, k: int, rng, tol: float, max_iter: int):
    n = len(X)
    # greedy k-means++: of 2 + log(k) D^2-sampled candidates keep the one that lowers the potential most
    trials = 2 + int(np.log(k))
    C = np.empty((k, X.shape[1]))
    C[0] = X[rng.integers(n)]
    closest = _sq_dists(X, C[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            # fewer distinct points than k; reuse an unused index
            C[j] = X[j % n]
            continue
        cand = np.searchsorted(np.cumsum(closest), rng.random(trials) * total, side="right")
        cand = np.minimum(cand, n - 1)
        pots = np.minimum(closest[None, :], _sq_dists(X, X[cand]).T)
        best = int(pots.sum(1).argmin())
        C[j] = X[cand[best]]
        closest = pots[best]

    for _ in range(max_iter):
        D = _sq_dists(X, C)
        assign = D.argmin(axis=1)
        counts = np.bincount(assign, minlength=k)
        for j in np.flatnonzero(counts == 0):
            own = D[np.arange(n), assign]
            movable = counts[assign] > 1
            cand = np.where(movable, own, -1.0)
            i = int(cand.argmax())
            counts[assign[i]] -= 1
            assign[i] = j
            counts[j] = 1
            D[i] = np.inf
            D[i, j] = 0.0
        newC = np.zeros_like(C)
        np.add.at(newC, assign, X)
        newC /= counts[:, None]
        shift = np.sqrt(((newC - C) ** 2).sum(1)).max()
        C = newC
        if shift < tol:
            break
    assign, C = _hartigan(X, assign, k)
    inertia = float(((X - C[assign]) ** 2).sum())
    return assign, C, inertia


def _hartigan(X: np.ndarray, assign: np.ndarray, k: int, max_moves: int = 10000):
    """Single-point transfers that strictly lower inertia, best move first, until none is left.

    Moving ``x`` from ``a`` to ``b`` changes inertia by
    ``n_b/(n_b+1) |x-c_b|^2 - n_a/(n_a-1) |x-c_a|^2``; every Lloyd fixed
    point that admits such a move is escaped.
    """
    assign = assign.copy()
    n = len(X)
    counts = np.bincount(assign, minlength=k).astype(np.float64)
    sums = np.zeros((k, X.shape[1]))
    np.add.at(sums, assign, X)
    rows = np.arange(n)
    for _ in range(max_moves):
        C = sums / np.maximum(counts, 1.0)[:, None]
        D = _sq_dists(X, C)
        na = counts[assign]
        with np.errstate(divide="ignore", invalid="ignore"):
            remove = np.where(na > 1, na / (na - 1.0) * D[rows, assign], -np.inf)
        add = counts[None, :] / (counts[None, :] + 1.0) * D
        add[rows, assign] = np.inf
        b = add.argmin(axis=1)
        delta = add[rows, b] - remove
        i = int(delta.argmin())
        if not delta[i] < -1e-12 * max(remove[i], 1e-300):
            break
        a = assign[i]
        sums[a] -= X[i]
        sums[b[i]] += X[i]
        counts[a] -= 1
        counts[b[i]] += 1
        assign[i] = b[i]
    return assign, sums / counts[:, None]


def pca_project(points: np.ndarray, q: int, tol: float = 1e-10, max_iter: int = 10000):
    """Project centered points on the top-``q`` covariance eigenvectors.

    Eigenvectors come from power iteration with deflation.  Returns
    ``(projected, components, explained_variance_ratio)``; the ratio is per
    component and sums to at most 1.
    """
    X = np.asarray(points, dtype=np.float64)
    n, d = X.shape
    if q > d or q < 1:
        raise ValueError(f"q={q} must be in [1, {d}]")
    Xc = X - X.mean(axis=0)
    C = Xc.T @ Xc / n
    total = float(np.trace(C))
    rng = make_rng(derive_seed(0, "pca"))
    comps = np.zeros((q, d))
    eig = np.zeros(q)
    A = C.copy()
    for j in range(q):
        v = rng.standard_normal(d)
        v /= np.linalg.norm(v)
        lam = 0.0
        scale = max(np.abs(A).max(), 1e-300)
        for _ in range(max_iter):
            w = A @ v
            nw = np.linalg.norm(w)
            if nw <= 1e-300:
                break
            v_new = w / nw
            lam = float(v_new @ A @ v_new)
            if np.linalg.norm(A @ v_new - lam * v_new) <= tol * scale:
                v = v_new
                break
            v = v_new
        # orthogonalize against earlier components to limit drift
        v -= comps[:j].T @ (comps[:j] @ v)
        nv = np.linalg.norm(v)
        if nv > 0:
            v /= nv
        lam = float(v @ C @ v)
        comps[j], eig[j] = v, lam
        A = A - lam * np.outer(v, v)
    ratio = eig / total if total > 0 else np.zeros(q)
    return Xc @ comps.T, comps, ratio


def fps(points: np.ndarray, m: int, start: int = 0) -> np.ndarray:
    """Greedy farthest-point sampling; ties go to the lowest index."""
    X = np.asarray(points, dtype=np.float64)
    n = len(X)
    if not 0 <= m <= n:
        raise ValueError(f"m={m} must be in [0, {n}]")
    if m == 0:
        return np.zeros(0, dtype=np.int64)
    chosen = [int(start)]
    dist = np.sqrt(((X - X[start]) ** 2).sum(1))
    dist[start] = -1.0
    for _ in range(m - 1):
        i = int(dist.argmax())
        chosen.append(i)
        dist = np.minimum(dist, np.sqrt(((X - X[i]) ** 2).sum(1)))
        dist[chosen] = -1.0
    return np.asarray(chosen, dtype=np.int64)


def stratify(values, B: int) -> np.ndarray:
    """Equal-frequency bins ``0..B-1``; tied values share the lowest bin any of them reaches."""
    v = np.asarray(values, dtype=np.float64)
    if B < 1:
        raise ValueError("B must be >= 1")
    n = len(v)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(v, kind="stable")
    sv = v[order]
    first = np.searchsorted(sv, sv, side="left")
    bins = np.empty(n, dtype=np.int64)
    bins[order] = (first * B) // n
    return bins


def normal_bin_weights(B: int, sigma: float = 1.0) -> np.ndarray:
    if B < 1 or sigma <= 0:
        raise ValueError("need B >= 1 and sigma > 0")
    j = np.arange(B, dtype=np.float64)
    w = np.exp(-((j - (B - 1) / 2.0) ** 2) / (2.0 * sigma**2))
    return w / w.sum()


def largest_remainder(total: int, weights, capacity=None) -> np.ndarray:
    """Integer allocation of ``total`` proportional to ``weights``.

    Floors first, then hands leftover units to the largest remainders
    (ties to the lowest index).  With ``capacity`` the allocation is capped
    and the overflow is re-spread over bins that still have room.
    """
    w = np.asarray(weights, dtype=np.float64)
    if capacity is None:
        cap = np.full(len(w), int(total), dtype=np.int64)
    else:
        cap = np.asarray(capacity, dtype=np.int64)
        total = int(min(total, cap.sum()))
    alloc = np.zeros(len(w), dtype=np.int64)
    remaining = total
    while remaining > 0:
        open_ = (alloc < cap) & (w > 0)
        if not open_.any():
            open_ = alloc < cap
            ww = open_.astype(np.float64)
        else:
            ww = np.where(open_, w, 0.0)
        share = remaining * ww / ww.sum()
        base = np.floor(share).astype(np.int64)
        rem = share - base
        left = remaining - base.sum()
        order = np.lexsort((np.arange(len(w)), -rem))
        extra = np.zeros(len(w), dtype=np.int64)
        extra[order[:left]] = 1
        add = np.minimum(base + extra, cap - alloc)
        alloc += add
        remaining -= int(add.sum())
    return alloc


def per_user_loss(scorer: fd.FrozenScorer, corpus: PromptCorpus, ds: InteractionDataset, train_idx: np.ndarray) -> np.ndarray:
    """Mean task loss of each user's training records under frozen prompts (0 for users without any)."""
    if corpus.n_users < ds.n_users:
        raise KeyError("corpus is missing prompts for some users")
    train_idx = np.asarray(train_idx)
    losses = np.zeros(0)
    if len(train_idx):
        losses = np.concatenate(
            [per_record_loss(scorer, corpus, ds, train_idx[s : s + 4096]) for s in range(0, len(train_idx), 4096)]
        )
    u = ds.users[train_idx]
    n = np.bincount(u, minlength=ds.n_users)
    s = np.bincount(u, weights=losses, minlength=ds.n_users)
    return np.divide(s, n, out=np.zeros(ds.n_users), where=n > 0)


# -- strategies ---------------------------------------------------------------


def _sample_bins(members: np.ndarray, bins: np.ndarray, quota: int, weights: np.ndarray, rng) -> tuple[list, dict]:
    B = len(weights)
    cap = np.bincount(bins, minlength=B)
    alloc = largest_remainder(quota, weights, cap)
    picked = []
    for j in range(B):
        if alloc[j]:
            pool = members[bins == j]
            picked.extend(rng.choice(pool, size=int(alloc[j]), replace=False).tolist())
    return picked, {"bin_sizes": cap.tolist(), "bin_quotas": alloc.tolist()}


def _cluster_quotas(assign: np.ndarray, k: int, budget: int) -> np.ndarray:
    sizes = np.bincount(assign, minlength=k)
    quotas = largest_remainder(budget, sizes, sizes)
    nonempty = np.flatnonzero(sizes > 0)
    if budget >= len(nonempty):
        # every nonempty cluster contributes at least one user
        for c in nonempty:
            if quotas[c] == 0:
                donor = int(np.lexsort((np.arange(k), -quotas))[0])
                quotas[donor] -= 1
                quotas[c] = 1
    return quotas


def select_users(
    cfg: SelectionConfig,
    corpus: PromptCorpus,
    ds: InteractionDataset,
    train_idx: np.ndarray,
    scorer: fd.FrozenScorer | None = None,
) -> SelectionResult:
    cfg.validate()
    n = ds.n_users
    all_users = np.arange(n)
    rng = make_rng(derive_seed(cfg.seed, "select", cfg.strategy))
    base_audit = {"strategy": cfg.strategy, "budget": int(cfg.budget), "population": n}
    none = np.full(n, -1, dtype=np.int64)
    if cfg.budget >= n:
        return SelectionResult(all_users.copy(), none.copy(), none.copy(), {**base_audit, "note": "budget covers population"})

    needs_scorer = cfg.strategy.startswith("ffn_") or "loss" in cfg.strategy
    if needs_scorer and scorer is None:
        raise ValueError(f"strategy {cfg.strategy!r} needs the source scorer")

    def stratum_values(kind: str) -> np.ndarray:
        if kind == "var":
            return all_user_variances(ds, train_idx)
        return per_user_loss(scorer, corpus, ds, train_idx)

    if cfg.strategy == "random":
        users = np.sort(rng.choice(n, size=cfg.budget, replace=False))
        return SelectionResult(users, none[: len(users)], none[: len(users)], base_audit)

    if cfg.strategy in ("variance_bucket", "loss_bucket"):
        vals = stratum_values("var" if cfg.strategy == "variance_bucket" else "loss")
        bins = stratify(vals, cfg.bins)
        picked, info = _sample_bins(all_users, bins, cfg.budget, np.full(cfg.bins, 1.0 / cfg.bins), rng)
        users = np.sort(np.asarray(picked, dtype=np.int64))
        return SelectionResult(users, none[: len(users)], bins[users], {**base_audit, **info})

    # clustering strategies
    k = cfg.k or math.ceil(math.sqrt(cfg.budget))
    k = min(k, n)
    if cfg.strategy.startswith("ffn_"):
        feats = fd.ffn_activations(scorer, corpus.prompts)
    else:
        feats = corpus.flat()
    audit = dict(base_audit, k=k)
    if cfg.strategy == "kmeans_pca":
        q = min(cfg.pca_components, feats.shape[1])
        feats, _, ratio = pca_project(feats, q)
        audit["pca_explained_variance_ratio"] = ratio.tolist()
    assign, centroids, inertia = kmeans(feats, k, cfg.seed)
    audit["inertia"] = inertia
    quotas = _cluster_quotas(assign, k, cfg.budget)
    audit["cluster_sizes"] = np.bincount(assign, minlength=k).tolist()
    audit["cluster_quotas"] = quotas.tolist()

    within = {
        "kmeans_stratified": None,
        "kmeans_pca": None,
        "ffn_kmeans": None,
        "kmeans_fps": "fps",
        "kmeans_loss_strat": "loss",
        "ffn_kmeans_loss": "loss",
        "kmeans_var_strat": "var",
        "ffn_kmeans_var": "var",
    }[cfg.strategy]
    if within in ("loss", "var"):
        vals = stratum_values(within)
        weights = normal_bin_weights(cfg.bins, cfg.sigma) if within == "var" else np.full(cfg.bins, 1.0 / cfg.bins)
        audit["bin_weights"] = weights.tolist()
    bin_of = none.copy()
    picked = []
    audit["clusters"] = []
    for c in range(k):
        members = np.flatnonzero(assign == c)
        q = int(quotas[c])
        if q == 0:
            continue
        if within is None:
            chosen = rng.choice(members, size=q, replace=False).tolist()
            info = {}
        elif within == "fps":
            start = int(np.argmin(((feats[members] - centroids[c]) ** 2).sum(1)))
            chosen = members[fps(feats[members], q, start)].tolist()
            info = {}
        else:
            bins = stratify(vals[members], cfg.bins)
            bin_of[members] = bins
            chosen, info = _sample_bins(members, bins, q, weights, rng)
        audit["clusters"].append({"cluster": c, "quota": q, **info})
        picked.extend(chosen)
    users = np.sort(np.asarray(picked, dtype=np.int64))
    return SelectionResult(users, assign[users], bin_of[users], audit)


def selection_config_from_dict(d: dict) -> SelectionConfig:
    known = {f for f in SelectionConfig.__dataclass_fields__}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown selection keys {sorted(unknown)}")
    return SelectionConfig(**d)


def config_to_dict(cfg: SelectionConfig) -> dict:
    return asdict(cfg)
