"""Elementwise and row-wise sparse ops; coordinates always pass through unchanged."""

from __future__ import annotations

import numpy as np

from .tensor import AlignmentError, SparseTensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def relu(x: SparseTensor) -> SparseTensor:
    return x.replace(np.maximum(x.features, 0))


def linear(x: SparseTensor, weight, bias=None) -> SparseTensor:
    if weight.shape[0] != x.num_channels:
        raise ValueError(f"channel mismatch: {x.num_channels} vs {weight.shape[0]}")
    out = x.features @ weight
    if bias is not None:
        out += bias
    return x.replace(out)


def residual_add(a: SparseTensor, b: SparseTensor) -> SparseTensor:
    if not a.cset.same_sites(b.cset):
        raise AlignmentError(
            f"residual operands differ: {len(a)} sites at stride {a.stride} vs "
            f"{len(b)} sites at stride {b.stride}")
    return a.replace(a.features + b.features)


def concat_channels(a: SparseTensor, b: SparseTensor) -> SparseTensor:
    if not a.cset.same_sites(b.cset):
        raise AlignmentError("cannot concatenate tensors on different sites")
    return a.replace(np.concatenate([a.features, b.features], axis=1))


def batch_norm(x: SparseTensor, gamma, beta, running_mean, running_var, train: bool,
               eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
    """Normalize over all rows. Returns ``(out, (xhat, inv_std))``.

    In training mode the running statistics are updated in place.
    """
    f = x.features
    n = f.shape[0]
    if train and n > 0:
        mean = f.mean(axis=0)
        var = f.var(axis=0)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        unbiased = var * (n / (n - 1)) if n > 1 else var
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (f - mean) * inv_std
    return x.replace(xhat * gamma + beta), (xhat, inv_std)


def fold_batch_norm(weight, bias, gamma, beta, running_mean, running_var, eps: float = BN_EPS):
    """Fold an eval-mode batch norm into the preceding conv's ``(K*K, Cin, Cout)`` weight."""
    scale = gamma / np.sqrt(running_var + eps)
    b = np.zeros_like(beta) if bias is None else bias
    return weight * scale, (b - running_mean) * scale + beta
