import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from refineseg.selector import (SelectionMask, entropy_map, entropy_rows, entropy_rows_backward,
                                select_entropy, select_magnitude, select_random, selector_metrics)
from refineseg.tensor import IGNORE, NumericError


def _entropy_oracle(z):
    ex = [math.exp(v - max(z)) for v in z]
    s = sum(ex)
    return -sum(e / s * math.log(e / s) for e in ex if e > 0)


def test_entropy_uniform_and_confident():
    assert entropy_map(np.zeros((6, 1, 1)))[0, 0] == pytest.approx(math.log(6))
    z = [10.0, 0.0, 0.0]
    e = entropy_map(np.array(z).reshape(3, 1, 1))[0, 0]
    assert e == pytest.approx(_entropy_oracle(z), rel=1e-10)
    assert e == pytest.approx(9.99e-4, abs=1e-6)


def test_entropy_saturated_logits_are_finite():
    e = entropy_map(np.array([1000.0, -1000.0]).reshape(2, 1, 1))
    assert e[0, 0] == 0.0


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(2, 6), st.integers(1, 4), st.integers(1, 4)),
                  elements=st.floats(-30, 30)))
def test_entropy_bounds_and_oracle(logits):
    e = entropy_map(logits)
    c = logits.shape[0]
    assert e.min() >= 0 and e.max() <= math.log(c)
    assert e[0, 0] == pytest.approx(_entropy_oracle(list(logits[:, 0, 0])), abs=1e-9)


def test_entropy_errors():
    with pytest.raises(ValueError):
        entropy_map(np.zeros((1, 2, 2)))
    with pytest.raises(NumericError):
        entropy_map(np.array([np.nan, 0]).reshape(2, 1, 1))


def test_entropy_rows_gradient():
    rng = np.random.default_rng(0)
    y = rng.standard_normal((4, 5))
    g = rng.standard_normal(4)
    e, p, lp = entropy_rows(y)
    analytic = entropy_rows_backward(g, p, lp, e)
    h = 1e-6
    for i, j in [(0, 0), (2, 3), (3, 4)]:
        yp, ym = y.copy(), y.copy()
        yp[i, j] += h
        ym[i, j] -= h
        num = ((entropy_rows(yp)[0] - entropy_rows(ym)[0]) * g).sum() / (2 * h)
        assert analytic[i, j] == pytest.approx(num, abs=1e-8)


def test_threshold_example():
    m = select_entropy(np.array([[0.1, 0.5], [0.3, 0.9]]), 0.3)
    assert m.mask.tolist() == [[False, True], [False, True]]
    assert m.coords.tolist() == [[0, 1], [1, 1]]
    assert m.count == 2 and m.density == 0.5


def test_threshold_extremes():
    e = entropy_map(np.random.default_rng(0).standard_normal((4, 5, 5)))
    assert select_entropy(e, 0.0).count == (e > 0).sum()
    assert select_entropy(e, math.log(4)).count == 0
    with pytest.raises(ValueError):
        select_entropy(e, -0.1)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (8, 8), elements=st.floats(0, 3)),
       st.floats(0, 3), st.floats(0, 3))
def test_masks_nest_as_alpha_grows(e, a, b):
    lo, hi = sorted((a, b))
    small, big = select_entropy(e, hi).mask, select_entropy(e, lo).mask
    assert not (small & ~big).any()


def test_random_selector():
    m = select_random(10, 10, 0.25, seed=3)
    assert m.count == 25
    assert select_random(10, 10, 0.25, seed=3).mask.tobytes() == m.mask.tobytes()
    assert select_random(10, 10, 0.25, seed=4).mask.tobytes() != m.mask.tobytes()
    assert select_random(3, 3, 0.5, 0).count == 4
    assert select_random(3, 3, 0.0, 0).count == 0
    with pytest.raises(ValueError):
        select_random(3, 3, 1.5, 0)


def test_magnitude_selector_picks_small_norms_with_scan_order_ties():
    f = np.array([[[3.0, 0.0], [1.0, 0.0]], [[4.0, 0.0], [0.0, 2.0]]])
    # norms: 5, 0, 1, 2
    assert select_magnitude(f, 0.5).mask.tolist() == [[False, True], [True, False]]
    ties = np.zeros((1, 2, 3))
    assert select_magnitude(ties, 0.34).mask.tolist() == [[True, True, False], [False] * 3]


def test_metrics_example():
    pred = np.array([[0, 1], [2, 3]])
    gt = np.array([[0, 2], [2, 0]])
    mask = np.array([[True, True], [False, False]])
    r = selector_metrics(mask, pred, gt)
    # errors at (0,1) and (1,1); only (0,1) is selected
    assert (r.density, r.recall, r.precision) == (0.5, 0.5, 0.5)


def test_metrics_ignore_and_empty():
    pred = np.array([[1, 1]])
    gt = np.array([[0, IGNORE]])
    r = selector_metrics(np.array([[False, True]]), pred, gt)
    assert r.recall == 0.0 and r.precision == 0.0
    r = selector_metrics(np.zeros((1, 2), bool), pred, pred)
    assert (r.density, r.recall, r.precision) == (0.0, 0.0, 0.0)


def test_selection_mask_is_frozen():
    m = SelectionMask(np.ones((2, 2)))
    with pytest.raises(ValueError):
        m.mask[0, 0] = False
    with pytest.raises(ValueError):
        SelectionMask(np.ones(3))


def test_more_selector_examples():
    assert entropy_map(np.zeros((19, 2, 2))) == pytest.approx(np.full((2, 2), math.log(19)))
    e = np.array([[0.01, 0.2], [1e-9, 2.0]])
    assert select_entropy(e, 0.0).count == 4
    assert select_random(4, 4, 1.0, 0).count == 16
    f = np.ones((2, 3, 3))
    f[:, 2, 1] = 0
    assert select_magnitude(f, 1 / 9).coords.tolist() == [[2, 1]]
    norms = np.array([[3.0, 1.0], [2.0, 4.0]])[None]
    assert select_magnitude(norms, 0.5).coords.tolist() == [[0, 1], [1, 0]]


def test_mask_equal_to_error_set():
    pred = np.array([[0, 1], [1, 1]])
    gt = np.array([[1, 1], [0, 1]])
    r = selector_metrics(pred != gt, pred, gt)
    assert (r.recall, r.precision) == (1.0, 1.0)
    with pytest.raises(ValueError):
        selector_metrics(np.ones((3, 3), bool), pred, gt)
