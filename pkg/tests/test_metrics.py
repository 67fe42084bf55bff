import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import auc_pairs
from promptmig.metrics import (
    CSV_COLUMNS,
    UndefinedMetricError,
    auc,
    click_report,
    gain_ratio,
    mae,
    rating_report,
    rmse,
    uauc,
)


def test_rmse_mae_cases():
    assert rmse([1, 2, 3], [1, 2, 3]) == 0.0
    assert mae([1, 2, 3], [1, 2, 3]) == 0.0
    assert rmse([3, 3], [1, 5]) == 2.0
    assert mae([3, 3], [1, 5]) == 2.0
    with pytest.raises(ValueError):
        rmse([], [])
    with pytest.raises(ValueError):
        mae([1, 2], [1])


@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=1, max_size=50), st.randoms())
@settings(max_examples=80, deadline=None)
def test_rmse_mae_properties(pairs, rnd):
    p, t = map(np.array, zip(*pairs))
    assert mae(p, t) <= rmse(p, t) + 1e-9
    perm = list(range(len(p)))
    rnd.shuffle(perm)
    assert rmse(p[perm], t[perm]) == pytest.approx(rmse(p, t))
    assert mae(p[perm], t[perm]) == pytest.approx(mae(p, t))


def test_auc_cases():
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    with pytest.raises(UndefinedMetricError):
        auc([0.1, 0.2], [1, 1])


@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 1)), min_size=2, max_size=60))
@settings(max_examples=150, deadline=None)
def test_auc_matches_pair_counting(rows):
    scores = [s / 3 for s, _ in rows]  # small integer grid -> many ties
    labels = [y for _, y in rows]
    if len(set(labels)) < 2:
        return
    assert auc(scores, labels) == pytest.approx(auc_pairs(scores, labels), abs=1e-12)


def test_uauc_cases():
    s, y = [0.2, 0.9, 0.4, 0.1], [0, 1, 1, 0]
    assert uauc(s, y, [7, 7, 7, 7]) == (auc(s, y), 0)
    val, excl = uauc([0.1, 0.9, 0.5, 0.5, 0.3, 0.2], [0, 1, 0, 1, 1, 1], [0, 0, 1, 1, 2, 2])
    assert val == pytest.approx(0.75)
    assert excl == 1
    with pytest.raises(UndefinedMetricError):
        uauc([0.1, 0.2], [1, 1], [0, 1])


def test_gain_ratio():
    assert gain_ratio(0.9, 0.9) == 1.0
    assert gain_ratio(0.9414, 0.9135) == pytest.approx(1.0305, abs=1e-4)
    assert gain_ratio(1.0, 0.8) > gain_ratio(1.0, 0.9)
    with pytest.raises(ValueError):
        gain_ratio(0.0, 1.0)


def test_report_serialization():
    r = rating_report(np.array([3.0, 4.0]), np.array([3.0, 5.0]))
    assert r.rmse == pytest.approx(np.sqrt(0.5)) and r.auc is None
    header, row = r.to_csv().strip().split("\n")
    assert tuple(header.split(",")) == CSV_COLUMNS
    assert row.split(",")[0] == "rating"
    assert json.loads(r.to_json())["n_eval"] == 2
    c = click_report(np.array([0.1, 0.9, 0.3, 0.2]), np.array([0.0, 1.0, 1.0, 0.0]), np.array([0, 0, 1, 1]))
    assert c.rmse is None and c.auc == 1.0 and c.uauc == 1.0 and c.uauc_excluded_users == 0
