"""Rating and click evaluation metrics."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

CSV_COLUMNS = ("task", "n_eval", "rmse", "mae", "auc", "uauc", "uauc_excluded_users")


class UndefinedMetricError(ValueError):
    """The metric has no signal for this input (e.g. a single class)."""


def _pair(pred, truth):
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise ValueError("empty input")
    return pred, truth


def rmse(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def mae(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean(np.abs(p - t)))


def auc(scores, labels) -> float:
    """Mann-Whitney AUC; ties between a positive and a negative count 1/2."""
    s, y = _pair(scores, labels)
    pos = y > 0.5
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative labels")
    ranks = rankdata(s)  # average ranks handle ties
    u_stat = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u_stat / (n_pos * n_neg))


def uauc(scores, labels, user_of) -> tuple[float, int]:
    """Unweighted mean of per-user AUC.

    Returns ``(uauc, n_excluded)``; users whose records hold a single class
    are excluded and counted.
    """
    s, y = _pair(scores, labels)
    user_of = np.asarray(user_of).ravel()
    if user_of.shape != s.shape:
        raise ValueError("user_of must align with scores")
    per_user = []
    excluded = 0
    for u in np.unique(user_of):
        m = user_of == u
        yu = y[m]
        if yu.min() == yu.max():
            excluded += 1
            continue
        per_user.append(auc(s[m], yu))
    if not per_user:
        raise UndefinedMetricError("no user has both classes")
    return float(np.mean(per_user)), excluded


def gain_ratio(retrained_rmse: float, migrated_rmse: float) -> float:
    """Full-retrained RMSE over migrated RMSE; above 1 means migration won."""
    if retrained_rmse <= 0 or migrated_rmse <= 0:
        raise ValueError("gain_ratio needs positive RMSE values")
    return retrained_rmse / migrated_rmse


@dataclass
class MetricsReport:
    task: str
    n_eval: int
    rmse: float | None = None
    mae: float | None = None
    auc: float | None = None
    uauc: float | None = None
    uauc_excluded_users: int | None = None
    extra: dict = field(default_factory=dict)

    def headline(self) -> float:
        return self.rmse if self.task == "rating" else self.auc

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def csv_row(self) -> list:
        return ["" if getattr(self, c) is None else getattr(self, c) for c in CSV_COLUMNS]

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(CSV_COLUMNS)
        w.writerow(self.csv_row())
        return buf.getvalue()


def rating_report(pred, truth, **extra) -> MetricsReport:
    return MetricsReport("rating", len(truth), rmse=rmse(pred, truth), mae=mae(pred, truth), extra=extra)


def click_report(scores, labels, user_of, **extra) -> MetricsReport:
    u, excluded = uauc(scores, labels, user_of)
    return MetricsReport(
        "click", len(labels), auc=auc(scores, labels), uauc=u, uauc_excluded_users=excluded, extra=extra
    )
