import numpy as np
import pytest

from conftest import naive_pair_count
from refineseg.nn.layers import SubmConv
from refineseg.sparse.conv import submanifold_conv
from refineseg.sparse.kmap import submanifold_map
from refineseg.sparse.macs import conv_macs, count_macs, dense_conv_macs, linear_macs
from refineseg.sparse.tensor import dense_to_sparse


def _kmap(mask):
    x = dense_to_sparse(np.zeros((1,) + mask.shape), mask)
    return submanifold_map(x.cset, 3)


def test_full_8x8_example():
    km = _kmap(np.ones((8, 8), bool))
    # each axis keeps 8 + 7 + 7 = 22 of the 24 tap positions
    assert km.total_pairs == 22 * 22
    assert conv_macs(km, 4, 4) == 7744
    assert dense_conv_macs(3, 4, 4, 8, 8) == 9216


@pytest.mark.parametrize("h, w", [(4, 4), (6, 9), (16, 32)])
def test_interior_sites_match_dense(h, w):
    # fully active (H+2)x(W+2) grid: every interior site sees all 9 taps
    km = _kmap(np.ones((h + 2, w + 2), bool))
    table = km.neighbor_table()
    rows = np.arange(km.n_out).reshape(h + 2, w + 2)[1:-1, 1:-1].ravel()
    interior_pairs = int((table[rows] < km.n_in).sum())
    assert interior_pairs * 5 * 7 == dense_conv_macs(3, 5, 7, h, w)


def test_random_masks_match_pair_oracle_and_density_bound():
    rng = np.random.default_rng(0)
    for _ in range(100):
        h, w = (int(v) for v in rng.integers(1, 17, 2))
        mask = rng.random((h, w)) < rng.uniform(0, 1)
        km = _kmap(mask)
        assert km.total_pairs == naive_pair_count(mask)
        assert conv_macs(km, 3, 2) <= 9 * int(mask.sum()) * 3 * 2
        assert conv_macs(km, 3, 2) <= dense_conv_macs(3, 3, 2, h, w)


def test_layer_macs():
    rng = np.random.default_rng(0)
    conv = SubmConv(2, 3, 3, rng, np.float64)
    x = dense_to_sparse(np.ones((2, 8, 8)), np.ones((8, 8), bool))
    conv.forward(x)
    _, km = submanifold_conv(x, conv.weight.value)
    assert conv.last_macs == count_macs(conv, km) == 484 * 6
    assert linear_macs(10, 4, 5) == 200
    with pytest.raises(ValueError):
        count_macs(conv)


def test_k1_macs_equal_rows():
    mask = np.random.default_rng(1).random((5, 5)) < 0.5
    x = dense_to_sparse(np.zeros((1, 5, 5)), mask)
    assert conv_macs(submanifold_map(x.cset, 1), 1, 1) == int(mask.sum())
