import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from eegvlm.errors import DegenerateKappa, EmptyMatrix, InsufficientClass, LengthMismatch, UnknownLabel
from eegvlm.evaluate import confusion, metrics, split_dataset
from eegvlm.stages import CLASS_ORDER, Stage
from oracles import labels_from_matrix, tally_metrics


def inventory(counts):
    return [(i, stage) for stage, n in zip(CLASS_ORDER, counts) for i in range(n)]


def test_split_counts_and_disjointness():
    records = inventory([80, 90, 100, 76, 75])
    train, test = split_dataset(records, lambda r: r[1], 75, seed=0)
    assert len(test) == 375 and len(train) == len(records) - 375
    assert {r[1]: sum(1 for x in test if x[1] == r[1]) for r in test} == {s: 75 for s in CLASS_ORDER}
    assert not set(train) & set(test)
    assert split_dataset(records, lambda r: r[1], 75, seed=0) == (train, test)
    assert split_dataset(records, lambda r: r[1], 75, seed=1)[1] != test


def test_split_keeps_input_order():
    records = inventory([5] * 5)
    train, test = split_dataset(records, lambda r: r[1], 2, seed=3)
    assert train == [r for r in records if r in train]
    assert test == [r for r in records if r in test]


def test_split_insufficient_class():
    with pytest.raises(InsufficientClass):
        split_dataset(inventory([80, 80, 74, 80, 80]), lambda r: r[1], 75)


def test_confusion_examples():
    cm = confusion(["Wake", "N1", "N1", "REM"], ["Wake", "N2", "N1", "Wake"])
    expected = np.zeros((5, 5), int)
    expected[0, 0] = expected[1, 2] = expected[1, 1] = expected[4, 0] = 1
    np.testing.assert_array_equal(cm.counts, expected)
    assert cm.total == 4


def test_confusion_errors():
    with pytest.raises(LengthMismatch):
        confusion(["Wake"], [])
    with pytest.raises(UnknownLabel):
        confusion(["Wake"], ["N4"])


labels = st.lists(st.sampled_from(CLASS_ORDER), min_size=1, max_size=200)


@given(st.data())
def test_confusion_matches_tally(data):
    truth = data.draw(labels)
    pred = data.draw(st.lists(st.sampled_from(CLASS_ORDER), min_size=len(truth), max_size=len(truth)))
    cm = confusion(truth, pred)
    for i, a in enumerate(CLASS_ORDER):
        for j, b in enumerate(CLASS_ORDER):
            assert cm.counts[i, j] == sum(1 for t, p in zip(truth, pred) if t == a and p == b)
    assert cm.total == len(truth)


def test_perfect_agreement():
    m = metrics(np.diag([3, 1, 4, 1, 5]))
    assert (m.accuracy, m.macro_f1, m.kappa) == (1.0, 1.0, 1.0)


def test_chance_agreement():
    m = metrics(np.array([[25, 25], [25, 25]]))
    assert m.kappa == 0.0 and m.accuracy == 0.5


def test_worked_example():
    m = metrics(np.array([[40, 10], [20, 30]]))
    assert m.accuracy == 0.7
    assert m.kappa == 0.4
    np.testing.assert_allclose(m.per_class_f1, [80 / 110, 60 / 90], atol=1e-12)
    assert m.macro_f1 == pytest.approx(0.6970, abs=1e-4)


def test_absent_class_gets_zero_f1():
    m = metrics(np.array([[5, 0, 0], [0, 5, 0], [0, 0, 0]]))
    assert m.per_class_f1 == (1.0, 1.0, 0.0)


def test_metric_errors():
    with pytest.raises(EmptyMatrix):
        metrics(np.zeros((5, 5)))
    with pytest.raises(DegenerateKappa):
        metrics(np.array([[7, 0], [0, 0]]))


matrices = st.integers(2, 6).flatmap(
    lambda k: st.lists(st.lists(st.integers(0, 30), min_size=k, max_size=k), min_size=k, max_size=k)
)


@given(matrices)
def test_metrics_match_oracle(m):
    c = np.array(m)
    truth, pred = labels_from_matrix(m)
    if c.sum() == 0:
        return
    row, col = c.sum(1), c.sum(0)
    if (row * col).sum() == c.sum() ** 2:  # chance agreement 1
        return
    acc, f1, mf1, kappa = tally_metrics(truth, pred, list(range(len(m))))
    got = metrics(c)
    assert got.accuracy == pytest.approx(acc, abs=1e-9)
    np.testing.assert_allclose(got.per_class_f1, f1, atol=1e-9)
    assert got.macro_f1 == pytest.approx(mf1, abs=1e-9)
    assert got.kappa == pytest.approx(kappa, abs=1e-9)


@given(matrices, st.randoms(use_true_random=False))
def test_permutation_invariance(m, rnd):
    c = np.array(m) + np.eye(len(m), dtype=int)
    perm = list(range(len(m)))
    rnd.shuffle(perm)
    a, b = metrics(c), metrics(c[np.ix_(perm, perm)])
    assert a.accuracy == pytest.approx(b.accuracy, abs=1e-12)
    assert a.macro_f1 == pytest.approx(b.macro_f1, abs=1e-12)
    assert a.kappa == pytest.approx(b.kappa, abs=1e-12)


@given(matrices)
def test_accuracy_is_support_weighted_recall(m):
    c = np.array(m) + np.eye(len(m), dtype=int)
    row = c.sum(1)
    recall = np.divide(np.diag(c), row, out=np.zeros(len(m)), where=row > 0)
    assert metrics(c).accuracy == pytest.approx(float((recall * row).sum() / c.sum()), abs=1e-12)


@given(matrices)
def test_kappa_one_iff_diagonal(m):
    c = np.array(m) + np.eye(len(m), dtype=int)
    diagonal = not (c - np.diag(np.diag(c))).any()
    try:
        k = metrics(c).kappa
    except DegenerateKappa:
        return
    assert (abs(k - 1.0) < 1e-12) == diagonal
    assert -1.0 - 1e-12 <= k <= 1.0 + 1e-12


def test_stage_labels_accept_strings_and_enums():
    a = confusion([Stage.N3, "N3"], ["N3", Stage.N3])
    assert a.counts[3, 3] == 2
