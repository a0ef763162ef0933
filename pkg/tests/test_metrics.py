import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from gfss.errors import DataError
from gfss.metrics import ConfusionMatrix, EvalReport, confusion_accumulate, evaluate, hiou, iou_per_class

import oracles

labels = arrays(np.int64, st.tuples(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5)),
                elements=st.integers(0, 4))


@given(labels, st.data())
def test_iou_matches_set_definition(truth, data):
    pred = data.draw(arrays(np.int64, truth.shape, elements=st.integers(0, 4)))
    acc = confusion_accumulate(pred, truth, ConfusionMatrix(5))
    got = iou_per_class(acc)
    want = oracles.iou_table(pred, truth, 5)
    assert got.keys() == want.keys()
    for k in got:
        assert got[k] == pytest.approx(want[k], abs=1e-15)


@given(labels, st.data())
def test_partitioning_does_not_change_counts(truth, data):
    pred = data.draw(arrays(np.int64, truth.shape, elements=st.integers(0, 4)))
    whole = confusion_accumulate(pred, truth, ConfusionMatrix(5))
    split = ConfusionMatrix(5)
    for i in range(truth.shape[0]):
        split = confusion_accumulate(pred[i:i + 1], truth[i:i + 1], split)
    assert np.array_equal(whole.counts, split.counts)
    assert whole.images == split.images


def test_hiou_values():
    assert hiou(0.6, 0.3) == pytest.approx(0.4, abs=1e-12)
    assert hiou(0.0, 0.0) == 0.0
    assert hiou(0.7, 0.7) == 0.7


@given(st.floats(0, 1))
def test_hiou_of_equal_pair_is_exact(x):
    assert hiou(x, x) == x


@given(st.floats(0, 1), st.floats(0, 1))
def test_hiou_bounded_by_pair(a, b):
    h = hiou(a, b)
    assert min(a, b) - 1e-15 <= h <= max(a, b) + 1e-15
    assert h == pytest.approx(hiou(b, a), abs=1e-15)


def test_perfect_prediction():
    y = np.array([[[0, 1], [2, 3]]])
    rep = evaluate(confusion_accumulate(y, y, ConfusionMatrix(4)), [0, 1], [2, 3])
    assert (rep.miou_base, rep.miou_novel, rep.miou_overall, rep.hiou) == (1.0, 1.0, 1.0, 1.0)


def test_missing_split_is_none():
    y = np.zeros((1, 2, 2), dtype=int)
    rep = evaluate(confusion_accumulate(y, y, ConfusionMatrix(3)), [0, 1], [2])
    assert rep.miou_novel is None and rep.hiou is None
    assert rep.csv_row().startswith(",1.0,,")


def test_out_of_range_label_raises():
    with pytest.raises(DataError):
        confusion_accumulate(np.array([[5]]), np.array([[0]]), ConfusionMatrix(3))


def test_report_serialisation_is_stable():
    rep = EvalReport({2: 0.5, 0: 1.0}, 1.0, 0.5, 0.75, hiou(1.0, 0.5), 4, 1, "x")
    assert rep.to_json() == EvalReport({0: 1.0, 2: 0.5}, 1.0, 0.5, 0.75, hiou(1.0, 0.5), 4, 1, "x").to_json()
    assert rep.csv_row(header=True).splitlines()[0] == ",".join(EvalReport.CSV_COLUMNS)
