import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hierseg.metrics import (
    COLUMNS,
    REGIONS,
    Confusion,
    RegionScores,
    binary_confusion,
    eval_table,
    region_masks,
    region_scores,
)


def brute_counts(pred, truth):
    tp = fp = fn = tn = 0
    for p, t in zip(np.ravel(pred).tolist(), np.ravel(truth).tolist()):
        if p and t:
            tp += 1
        elif p:
            fp += 1
        elif t:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def brute_scores(tp, fp, fn):
    def ratio(a, b):
        if b == 0:
            return 1.0 if tp + fn == 0 else 0.0
        return a / b
    return ratio(tp, tp + fp), ratio(tp, tp + fn), ratio(tp, tp + fp + fn), ratio(2 * tp, 2 * tp + fp + fn)


def test_region_masks_examples():
    c, k, e = region_masks([0, 2, 4])
    assert c.tolist() == [0, 1, 1] and k.tolist() == [0, 0, 1] and e.tolist() == [0, 0, 1]
    c, k, e = region_masks([1])
    assert c[0] and k[0] and not e[0]
    assert not any(m.any() for m in region_masks(np.zeros((3, 3), int)))
    with pytest.raises(ValueError):
        region_masks([5])


def test_confusion_examples():
    truth = np.zeros(10, bool)
    truth[:4] = True
    assert binary_confusion(truth, truth) == Confusion(4, 0, 0, 6)
    assert binary_confusion(~truth, truth).tp == 0
    pred = np.zeros(10, bool)
    pred[1:7] = True
    assert binary_confusion(pred, truth) == Confusion(3, 3, 1, 3)
    with pytest.raises(ValueError):
        binary_confusion(np.zeros(3), np.zeros(4))


def test_score_examples():
    assert region_scores(Confusion(3, 3, 1, 0)) == (0.5, 0.75, 3 / 7, 0.6)
    assert region_scores(Confusion(5, 0, 0, 2)) == (1.0, 1.0, 1.0, 1.0)
    assert region_scores(Confusion(0, 0, 0, 9)) == (1.0, 1.0, 1.0, 1.0)
    # prediction on empty truth
    assert region_scores(Confusion(0, 2, 0, 7)) == (0.0, 1.0, 0.0, 0.0)
    # missed everything
    assert region_scores(Confusion(0, 0, 3, 7)) == (0.0, 0.0, 0.0, 0.0)


@pytest.mark.parametrize("seed", range(100))
def test_streaming_matches_brute_force(seed):
    r = np.random.default_rng(seed)
    shape = tuple(r.integers(1, 9, size=2))
    truth = r.choice(5, size=shape, p=r.dirichlet(np.ones(5)))
    pred = r.choice(5, size=shape, p=r.dirichlet(np.ones(5)))
    table = eval_table([pred], [truth]).table
    for i, (pm, tm) in enumerate(zip(region_masks(pred), region_masks(truth))):
        tp, fp, fn, tn = brute_counts(pm, tm)
        assert binary_confusion(pm, tm) == Confusion(tp, fp, fn, tn)
        assert tuple(table[i]) == brute_scores(tp, fp, fn)
        assert table[i, 2] <= table[i, 3]


@settings(max_examples=200)
@given(st.integers(0, 1000), st.integers(0, 1000), st.integers(0, 1000))
def test_miou_le_dice(tp, fp, fn):
    _, _, miou, dice = region_scores(Confusion(tp, fp, fn, 0))
    assert miou <= dice


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=64))
def test_masks_nested(labels):
    c, k, e = region_masks(labels)
    assert np.all(e <= k) and np.all(k <= c)


def test_eval_table_averages_per_volume():
    truth = np.array([1, 1, 1, 1, 0])
    a = np.array([1, 1, 1, 1, 1])   # complete dice 8/9
    b = np.array([1, 1, 0, 0, 0])   # complete dice 4/6
    t = eval_table([a, b], [truth, truth])
    assert t["complete", "dice"] == pytest.approx((8 / 9 + 4 / 6) / 2, abs=1e-15)
    single = eval_table([a], [truth])
    assert single["complete", "dice"] == pytest.approx(8 / 9, abs=1e-15)


def test_eval_table_accepts_mask_tuples():
    truth = np.array([0, 2, 4, 1])
    pred = np.array([2, 2, 4, 0])
    assert np.array_equal(eval_table([region_masks(pred)], [truth]).table, eval_table([pred], [truth]).table)


def test_eval_table_errors():
    with pytest.raises(ValueError):
        eval_table([], [])
    with pytest.raises(ValueError):
        eval_table([np.zeros(3, int)], [np.zeros(4, int)])


def test_random_assignment_precision_near_prevalence():
    r = np.random.default_rng(7)
    truth = r.choice(5, size=200_000, p=[0.6, 0.1, 0.2, 0.05, 0.05])
    pred = r.integers(0, 5, size=truth.size)
    t = eval_table([pred], [truth])
    for name, mask in zip(REGIONS, region_masks(truth)):
        assert t[name, "precision"] == pytest.approx(mask.mean(), abs=0.01)


def test_csv_round_trip():
    t = RegionScores(np.arange(12, dtype=float).reshape(3, 4) / 12)
    text = t.to_csv()
    assert text.splitlines()[0] == "region," + ",".join(COLUMNS)
    assert [ln.split(",")[0] for ln in text.splitlines()[1:]] == list(REGIONS)
    assert np.allclose(RegionScores.from_csv(text).table, t.table, atol=1e-6)
