import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from plugfed.dataset import Dataset
from plugfed.metrics import (
    ConfusionMatrix,
    accuracy,
    confusion,
    evaluate,
    macro_prf,
    metrics_rows,
    precision_recall_f1,
    write_metrics_csv,
)
from plugfed.model import Backend, ModelParams


def fixed_class_model(c, num_classes, m=2):
    w = np.zeros((num_classes, m + 1))
    w[c, -1] = 5.0
    return ModelParams(Backend.SOFTMAX_REG, w.ravel(), num_classes, m)


def test_perfect_predictor_gives_diagonal():
    cm = confusion([0, 1, 2, 1], [0, 1, 2, 1], 3)
    assert np.array_equal(cm.counts, np.diag([1, 2, 1]))
    assert accuracy(cm) == 1.0
    assert all(precision_recall_f1(cm, c) == (1.0, 1.0, 1.0) for c in range(3))


def test_constant_predictor_fills_one_column():
    ds = Dataset(np.zeros((5, 2)), [0, 1, 2, 2, 1], ("a", "b", "c"))
    cm = evaluate(fixed_class_model(2, 3), ds)
    assert cm.counts[:, 2].tolist() == [1, 2, 2]
    assert cm.counts[:, :2].sum() == 0
    assert accuracy(cm) == np.trace(cm.counts) / 5


def test_binary_example():
    cm = ConfusionMatrix(np.array([[2, 1], [1, 2]]))
    p, r, f = precision_recall_f1(cm, 0)
    assert (p, r, f) == pytest.approx((2 / 3, 2 / 3, 2 / 3), abs=1e-15)
    assert accuracy(cm) == pytest.approx(4 / 6)


def test_absent_class_scores_zero():
    cm = ConfusionMatrix(np.array([[3, 0], [0, 0]]))
    assert precision_recall_f1(cm, 1) == (0.0, 0.0, 0.0)


def test_zero_diagonal_and_empty_matrix():
    assert accuracy(ConfusionMatrix(np.array([[0, 2], [3, 0]]))) == 0.0
    with pytest.raises(ValueError):
        accuracy(ConfusionMatrix(np.zeros((2, 2))))


def test_evaluate_rejects_shape_mismatch():
    ds = Dataset(np.zeros((2, 4)), [0, 1], ("a", "b"))
    with pytest.raises(ValueError):
        evaluate(fixed_class_model(0, 2, m=2), ds)


matrices = st.integers(1, 5).flatmap(
    lambda c: st.lists(st.lists(st.integers(0, 6), min_size=c, max_size=c), min_size=c, max_size=c)
)


@given(matrices)
def test_macro_scores_match_brute_force(counts):
    cm = ConfusionMatrix(np.array(counts))
    y_true, y_pred = oracles.expand_confusion(counts)
    rows = oracles.per_class_prf(y_true, y_pred, len(counts))
    want = np.mean(rows, axis=0)
    assert np.allclose(macro_prf(cm), want, atol=1e-12)
    if y_true:
        assert accuracy(cm) == pytest.approx(np.mean(np.array(y_true) == np.array(y_pred)), abs=1e-15)
        assert np.array_equal(confusion(y_true, y_pred, len(counts)).counts, cm.counts)


def test_thousand_random_matrices_match_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        c = int(rng.integers(2, 7))
        counts = rng.integers(0, 8, size=(c, c))
        counts[rng.random((c, c)) < 0.3] = 0
        cm = ConfusionMatrix(counts)
        y_true, y_pred = oracles.expand_confusion(counts)
        rows = oracles.per_class_prf(y_true, y_pred, c)
        for k in range(c):
            assert np.allclose(precision_recall_f1(cm, k), rows[k], atol=1e-12)


@given(matrices.filter(lambda m: sum(map(sum, m)) > 0), st.randoms(use_true_random=False))
def test_relabelling_classes_keeps_accuracy_and_macro(counts, rnd):
    c = len(counts)
    perm = list(range(c))
    rnd.shuffle(perm)
    a = np.array(counts)
    b = a[np.ix_(perm, perm)]
    assert accuracy(ConfusionMatrix(a)) == accuracy(ConfusionMatrix(b))
    assert np.allclose(macro_prf(ConfusionMatrix(a)), macro_prf(ConfusionMatrix(b)), atol=1e-12)


@given(matrices, st.data())
def test_accumulation_is_associative(counts, data):
    a = np.array(counts)
    b = np.array(data.draw(st.lists(st.lists(st.integers(0, 5), min_size=len(counts), max_size=len(counts)), min_size=len(counts), max_size=len(counts))))
    assert np.array_equal((ConfusionMatrix(a) + ConfusionMatrix(b)).counts, a + b)


def test_metrics_csv(tmp_path):
    cm = ConfusionMatrix(np.array([[2, 1], [1, 2]]))
    write_metrics_csv(cm, ["fridge", "kettle"], tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines == [
        "class,precision,recall,f1",
        "fridge,0.666667,0.666667,0.666667",
        "kettle,0.666667,0.666667,0.666667",
        "__macro__,0.666667,0.666667,0.666667",
        "__accuracy__,0.666667,0.666667,0.666667",
    ]
    assert [r[0] for r in metrics_rows(cm, ["a", "b"])] == ["a", "b", "__macro__", "__accuracy__"]
