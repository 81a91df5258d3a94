import itertools
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from hierseg.classifier import (
    RegionDecision,
    argmax_decide,
    decision_masks,
    decisions_to_labels,
    hierarchical_decide,
    hierarchical_decide_array,
)
from hierseg.metrics import region_masks

GRID = [round(0.05 * i, 2) for i in range(21)]


def nested_grid():
    for p0, p1, p2 in itertools.product(GRID, repeat=3):
        if p2 <= p1 <= p0:
            yield p0, p1, p2


def has_tie(p0, p1, p2):
    return any(abs(a - b) < 1e-12 for a, b in ((p0, 1 - p0), (p1, p0 - p1), (p2, p1 - p2)))


@pytest.mark.parametrize("p,expected", [
    ((0.4, 0.3, 0.1), RegionDecision.NON_TUMOR),
    ((0.6, 0.2, 0.1), RegionDecision.EDEMA_ONLY),
    ((0.9, 0.6, 0.4), RegionDecision.ENHANCING),
    ((0.9, 0.6, 0.2), RegionDecision.CORE_NON_ENHANCING),
])
def test_examples(p, expected):
    assert hierarchical_decide(*p) is expected


@pytest.mark.parametrize("p,expected", [
    ((0.5, 0.4, 0.3), RegionDecision.NON_TUMOR),
    ((0.8, 0.4, 0.3), RegionDecision.EDEMA_ONLY),
    ((0.8, 0.6, 0.3), RegionDecision.CORE_NON_ENHANCING),
])
def test_ties_go_to_less_specific(p, expected):
    assert hierarchical_decide(*p) is expected


@pytest.mark.parametrize("bad", [(-0.1, 0, 0), (1.2, 0.5, 0.1), (0.5, 0.5, np.nan)])
def test_out_of_range(bad):
    with pytest.raises(ValueError):
        hierarchical_decide(*bad)
    with pytest.raises(ValueError):
        hierarchical_decide_array(*[[v] for v in bad])


def test_grid_matches_brute_force():
    start = time.perf_counter()
    checked = 0
    for p in nested_grid():
        code = hierarchical_decide(*p)
        if not has_tie(*p):
            assert oracles.decide(*p) == int(code), p
            checked += 1
    assert checked > 1000
    assert time.perf_counter() - start < 1.0


def test_grid_masks_nested_and_array_agrees():
    pts = np.array(list(nested_grid()))
    codes = hierarchical_decide_array(pts[:, 0], pts[:, 1], pts[:, 2])
    assert codes.tolist() == [int(hierarchical_decide(*p)) for p in pts]
    complete, core, enh = decision_masks(codes)
    assert np.all(enh <= core) and np.all(core <= complete)


def test_labels_round_trip_through_masks():
    codes = np.arange(4)
    for a, b in zip(region_masks(decisions_to_labels(codes)), decision_masks(codes)):
        assert np.array_equal(a, b)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0.1, 10), st.floats(-5, 5))
def test_monotone_rescaling(a, b, c, scale, shift):
    p0, p1, p2 = sorted((a, b, c), reverse=True)
    f = lambda v: scale * v + shift
    scaled = 0 if not f(p0) > f(1 - p0) else 1 if not f(p1) > f(p0 - p1) else 2 if not f(p2) > f(p1 - p2) else 3
    # affine rescaling can flip float ties, so only compare away from them
    if min(abs(p0 - (1 - p0)), abs(p1 - (p0 - p1)), abs(p2 - (p1 - p2))) > 1e-9:
        assert scaled == int(hierarchical_decide(p0, p1, p2))


@pytest.mark.parametrize("q,expected", [
    ((0.9, 0.025, 0.025, 0.025, 0.025), 0),
    ((0.2,) * 5, 0),
    ((0.1, 0.1, 0.5, 0.2, 0.1), 2),
])
def test_argmax(q, expected):
    assert int(argmax_decide(q)) == expected
