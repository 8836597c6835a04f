"""Gather -> GEMM -> scatter execution of sparse convolutions.

Weights are stored as ``(K*K, Cin, Cout)``; offset ``k`` matches
``KernelMap.offsets[k]``. Sparse maps run one GEMM per offset and
scatter-accumulate the offsets in their listed order. Densely populated maps
(see ``KernelMap.dense``) instead gather every tap through the neighbor table
and run a single GEMM. The path depends only on the map, so a given input
always takes the same one and results are bit-reproducible.
"""

from __future__ import annotations

import numpy as np

from .coords import CoordinateError
from .kmap import KernelMap, build_kernel_map, submanifold_map
from .tensor import SparseTensor, downsample_coords


def _check_weight(x: SparseTensor, weight, n_offsets):
    if weight.ndim != 3 or weight.shape[0] != n_offsets:
        raise ValueError(f"weight shape {weight.shape} does not fit {n_offsets} offsets")
    if weight.shape[1] != x.num_channels:
        raise ValueError(f"channel mismatch: input has {x.num_channels}, weight expects {weight.shape[1]}")


def _padded(rows, n_cols, dtype):
    out = np.empty((rows.shape[0] + 1, n_cols), dtype=dtype)
    out[:-1] = rows
    out[-1] = 0
    return out


def _gather_taps(feats, table):
    fp = _padded(feats, feats.shape[1], feats.dtype)
    return np.take(fp, table, axis=0).reshape(table.shape[0], -1)


def apply_kernel_map(feats, kmap: KernelMap, weight, bias=None) -> np.ndarray:
    dtype = np.result_type(feats, weight)
    if kmap.dense and kmap.n_out:
        taps = _gather_taps(feats, kmap.neighbor_table())
        out = taps @ weight.reshape(-1, weight.shape[2])
        if bias is not None:
            out += bias
        return out.astype(dtype, copy=False)
    out = np.zeros((kmap.n_out, weight.shape[2]), dtype=np.result_type(feats, weight))
    for k in range(len(kmap.offsets)):
        i, o = kmap.in_rows[k], kmap.out_rows[k]
        if i is None:
            out += feats @ weight[k]
        elif i.size:
            # each output row appears at most once per offset, so fancy += is exact
            out[o] += np.take(feats, i, axis=0) @ weight[k]
    if bias is not None:
        out += bias
    return out


def kernel_map_backward(feats, kmap: KernelMap, weight, grad_out):
    """Gradients w.r.t. input rows, weight and bias for ``apply_kernel_map``."""
    if kmap.dense and kmap.n_out and kmap.n_in:
        taps = _gather_taps(feats, kmap.neighbor_table())
        grad_w = (taps.T @ grad_out).reshape(weight.shape)
        back = _gather_taps(grad_out, kmap.reverse_table())
        wt = weight.transpose(0, 2, 1).reshape(-1, weight.shape[1])
        return back @ wt, grad_w, grad_out.sum(axis=0)
    grad_in = np.zeros((kmap.n_in, weight.shape[1]), dtype=grad_out.dtype)
    grad_w = np.zeros_like(weight)
    for k in range(len(kmap.offsets)):
        i, o = kmap.in_rows[k], kmap.out_rows[k]
        if i is None:
            grad_w[k] = feats.T @ grad_out
            grad_in += grad_out @ weight[k].T
        elif i.size:
            g = np.take(grad_out, o, axis=0)
            grad_w[k] = np.take(feats, i, axis=0).T @ g
            grad_in[i] += g @ weight[k].T
    return grad_in, grad_w, grad_out.sum(axis=0)


def submanifold_conv(x: SparseTensor, weight, bias=None, kmap: KernelMap | None = None):
    """Output sites are exactly the input sites (same ``CoordSet`` object)."""
    k = weight.shape[0]
    ksize = int(round(k ** 0.5))
    _check_weight(x, weight, ksize * ksize)
    if kmap is None:
        kmap = submanifold_map(x.cset, ksize, x.manager)
    return x.replace(apply_kernel_map(x.features, kmap, weight, bias)), kmap


def strided_map(x: SparseTensor, factor: int = 2):
    """Kernel map and coarse sites for a ``factor`` x ``factor`` stride-``factor`` conv.

    Registers both levels with the tensor's manager so an inverse conv can
    find the finer set later.
    """
    mgr = x.manager
    fine = mgr.register(x.cset)
    key = ("down", fine.stride, factor)
    cached = mgr.kernel_maps.get(key)
    if cached is not None:
        return cached
    coarse = mgr.levels.get(fine.stride * factor)
    if coarse is None:
        coarse = mgr.register(downsample_coords(fine, factor))
    km = build_kernel_map(fine, coarse, factor, stride=factor)
    mgr.kernel_maps[key] = (km, coarse)
    return km, coarse


def strided_conv(x: SparseTensor, weight, bias=None, factor: int = 2):
    _check_weight(x, weight, factor * factor)
    km, coarse = strided_map(x, factor)
    out = apply_kernel_map(x.features, km, weight, bias)
    return SparseTensor(out, coarse, x.manager), km


def inverse_map(x: SparseTensor, factor: int = 2):
    mgr = x.manager
    if x.stride % factor:
        raise CoordinateError(f"stride {x.stride} is not divisible by {factor}")
    if mgr.levels.get(x.stride) is not x.cset:
        raise CoordinateError("coarse tensor is not registered with its manager")
    fine_stride = x.stride // factor
    key = ("up", fine_stride, factor)
    cached = mgr.kernel_maps.get(key)
    if cached is not None:
        return cached
    fine = mgr.get(fine_stride)
    down = mgr.kernel_maps.get(("down", fine_stride, factor))
    if down is not None and down[1] is x.cset:
        km = down[0].transpose()
    else:
        km = build_kernel_map(fine, x.cset, factor, stride=factor).transpose()
    mgr.kernel_maps[key] = (km, fine)
    return km, fine


def inverse_conv(x: SparseTensor, weight, bias=None, factor: int = 2):
    """Transposed strided conv back onto the cached finer coordinate set."""
    _check_weight(x, weight, factor * factor)
    km, fine = inverse_map(x, factor)
    out = apply_kernel_map(x.features, km, weight, bias)
    return SparseTensor(out, fine, x.manager), km


def dense_conv2d(x, weight, bias=None) -> np.ndarray:
    """Zero-padded 'same' dense conv of a ``(Cin, H, W)`` array.

    ``weight`` is ``(K, K, Cin, Cout)``; the reference the sparse engine is
    measured against.
    """
    ksize, _, cin, cout = weight.shape
    r = ksize // 2
    _, h, w = x.shape
    xp = np.zeros((h + 2 * r, w + 2 * r, cin), dtype=x.dtype)
    xp[r:r + h, r:r + w] = x.transpose(1, 2, 0)
    out = np.zeros((h * w, cout), dtype=np.result_type(x, weight))
    for dy in range(ksize):
        for dx in range(ksize):
            patch = np.ascontiguousarray(xp[dy:dy + h, dx:dx + w]).reshape(h * w, cin)
            out += patch @ weight[dy, dx]
    if bias is not None:
        out += bias
    return out.T.reshape(cout, h, w)
