import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from crdn.errors import ShapeError
from crdn.metrics import (
    ConfusionCounts,
    dice,
    macro_mean_dice,
    mean_dice,
    per_sample_dice,
    pixel_accuracy,
    write_boxplot_csv,
)

label_maps = hnp.arrays(np.uint8, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.integers(0, 3))


def test_dice_identical():
    a = np.array([[0, 1], [2, 3]])
    assert dice(a, a, 2) == 1.0


def test_dice_disjoint():
    a = np.array([[1, 1, 0, 0]])
    b = np.array([[0, 0, 1, 1]])
    assert dice(a, b, 1) == 0.0


def test_dice_half_overlap():
    pred = np.zeros((4, 4), dtype=int)
    gt = np.zeros((4, 4), dtype=int)
    pred[0, :4] = 1
    gt[0, 2:4] = 1
    gt[1, 0:2] = 1
    assert dice(pred, gt, 1) == pytest.approx(0.5)


def test_dice_absent_class_is_one():
    a = np.zeros((3, 3), dtype=int)
    assert dice(a, a, 3) == 1.0


def test_dice_shape_mismatch():
    with pytest.raises(ShapeError):
        dice(np.zeros((2, 2)), np.zeros((2, 3)), 1)


def test_mean_dice_values():
    a = np.array([[1, 2, 3, 0]])
    assert mean_dice(a, a, 4) == 1.0
    # class 1 perfect; classes 2 and 3 each half right
    pred = np.array([[1, 2, 2, 3, 3, 0]])
    gt = np.array([[1, 2, 0, 3, 0, 0]])
    d2 = dice(pred, gt, 2)
    assert d2 == pytest.approx(2 / 3)
    assert mean_dice(pred, gt, 4) == pytest.approx((1 + 2 / 3 + 2 / 3) / 3)


def test_mean_dice_of_given_per_class_values():
    # foreground Dice {1.0, 0.5, 0.5}: class 2 and 3 each with 2-of-4 overlap
    gt = np.array([[1, 2, 2, 0, 0, 3, 3, 0, 0]])
    pred = np.array([[1, 2, 0, 2, 0, 3, 0, 3, 0]])
    assert [dice(pred, gt, k) for k in (1, 2, 3)] == [1.0, 0.5, 0.5]
    assert mean_dice(pred, gt, 4) == pytest.approx(2 / 3)


def test_pixel_accuracy_examples():
    a = np.array([[0, 1], [2, 3]])
    assert pixel_accuracy(a, a) == 1.0
    assert pixel_accuracy(a, (a + 1) % 4) == 0.0
    checker = np.indices((4, 4)).sum(axis=0) % 2
    assert pixel_accuracy(checker, np.zeros((4, 4), dtype=int)) == 0.5


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_dice_symmetry(data):
    a = data.draw(label_maps)
    b = data.draw(hnp.arrays(np.uint8, a.shape, elements=st.integers(0, 3)))
    for k in range(4):
        assert dice(a, b, k) == dice(b, a, k)


@settings(max_examples=60, deadline=None)
@given(st.data(), st.permutations([1, 2, 3]))
def test_mean_dice_permutation_invariant(data, perm):
    a = data.draw(label_maps)
    b = data.draw(hnp.arrays(np.uint8, a.shape, elements=st.integers(0, 3)))
    relabel = np.array([0] + list(perm), dtype=np.uint8)
    assert mean_dice(relabel[a], relabel[b], 4) == pytest.approx(mean_dice(a, b, 4), abs=1e-15)


@pytest.mark.parametrize("seed", range(20))
def test_counts_match_direct_definitions(seed):
    rng = np.random.default_rng(seed)
    pred = rng.integers(0, 4, size=(3, 9, 7))
    gt = rng.integers(0, 4, size=(3, 9, 7))
    counts = ConfusionCounts.from_maps(pred, gt, 4)
    for k in range(4):
        tp = int(((pred == k) & (gt == k)).sum())
        fp = int(((pred == k) & (gt != k)).sum())
        fn = int(((pred != k) & (gt == k)).sum())
        assert (counts.tp[k], counts.fp[k], counts.fn[k]) == (tp, fp, fn)
        assert counts.dice(k) == pytest.approx(dice(pred, gt, k))
    assert counts.pixel_accuracy() == pytest.approx(pixel_accuracy(pred, gt))
    assert counts.mean_dice() == pytest.approx(mean_dice(pred, gt, 4))


def test_counts_merge_is_associative():
    rng = np.random.default_rng(0)
    maps = [(rng.integers(0, 4, (5, 5)), rng.integers(0, 4, (5, 5))) for _ in range(3)]
    c = [ConfusionCounts.from_maps(p, g, 4) for p, g in maps]
    left, right = (c[0] + c[1]) + c[2], c[0] + (c[1] + c[2])
    assert left.tp.tolist() == right.tp.tolist() and left.correct == right.correct
    pooled = ConfusionCounts.from_maps(np.stack([p for p, _ in maps]), np.stack([g for _, g in maps]), 4)
    assert pooled.tp.tolist() == left.tp.tolist() and pooled.total == left.total


def test_counts_reject_out_of_range():
    with pytest.raises(ValueError, match="labels"):
        ConfusionCounts.from_maps(np.array([[4]]), np.array([[0]]), 4)


def test_macro_vs_micro():
    gt = [np.array([[1, 1, 1, 1]]), np.array([[1, 0, 0, 0]])]
    pred = [np.array([[1, 1, 1, 1]]), np.array([[0, 0, 0, 0]])]
    # per image mean Dice over classes 1..1: [1.0, 0.0] -> macro 0.5; pooled 2*4/(4+5) -> micro 8/9
    assert macro_mean_dice(pred, gt, 2) == pytest.approx(0.5)
    c = ConfusionCounts.from_maps(np.stack(pred), np.stack(gt), 2)
    assert c.mean_dice() == pytest.approx(8 / 9)


def test_boxplot_csv(tmp_path):
    pred = [np.array([[1, 2], [3, 0]])] * 2
    rows = per_sample_dice(pred, pred, 4, ids=[10, 11])
    assert len(rows) == 6 and rows[0] == {"sample_id": 10, "class": 1, "dice": 1.0}
    write_boxplot_csv(tmp_path / "b.csv", rows)
    with open(tmp_path / "b.csv") as fh:
        got = list(csv.DictReader(fh))
    assert got[0] == {"sample_id": "10", "class": "1", "dice": "1.0"}
    assert len(got) == 6
