from __future__ import annotations

import numpy as np

from ..tensor import IGNORE


def log_softmax_rows(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits, targets, ignore: int = IGNORE):
    """Mean cross entropy over non-ignored rows and its gradient w.r.t. ``logits``.

    With every row ignored the loss and gradient are both zero.
    """
    logits = np.asarray(logits)
    targets = np.asarray(targets).astype(np.int64)
    grad = np.zeros_like(logits)
    valid = targets != ignore
    n = int(valid.sum())
    if n == 0:
        return 0.0, grad
    t = targets[valid]
    if t.min() < 0 or t.max() >= logits.shape[1]:
        raise ValueError("target class out of range")
    logp = log_softmax_rows(logits[valid])
    rows = np.arange(n)
    loss = -logp[rows, t].sum() / n
    g = np.exp(logp)
    g[rows, t] -= 1
    grad[valid] = g / n
    return float(loss), grad
