"""Fusing initial predictions (y1) with sparse refinements (y2).

All strategies take and return ``(N, C)`` logit rows in selection-mask order.
"""

from __future__ import annotations

import numpy as np

from .nn.layers import Layer, Linear, ReLU
from .selector import SelectionMask, entropy_rows, entropy_rows_backward
from .tensor import argmax_channels

STRATEGIES = ("gated", "direct", "entropy", "oracle")


class AlignmentError(ValueError):
    pass


def _check_rows(y1, y2):
    if y1.shape != y2.shape:
        raise ValueError(f"row mismatch: {y1.shape} vs {y2.shape}")


def sigmoid(s):
    out = np.empty_like(s)
    pos = s >= 0
    out[pos] = 1 / (1 + np.exp(-s[pos]))
    e = np.exp(s[~pos])
    out[~pos] = e / (1 + e)
    # keep the gate strictly inside (0, 1) even when exp saturates
    lo = np.finfo(s.dtype).tiny
    hi = np.nextafter(s.dtype.type(1), s.dtype.type(0))
    return np.clip(out, lo, hi)


class GatedEnsembler(Layer):
    """``y = f(w * y1 + (1 - w) * y2)`` with ``w = sigmoid(g([y1; y2; e1; e2]))``.

    ``g`` is Linear(2C+2, H) -> ReLU -> Linear(H, 1). ``f`` is residual,
    ``z + Linear(H, C)(ReLU(Linear(C, H)(z)))``, with the last layer initialized
    small so that ``f`` starts close to the identity.
    """

    def __init__(self, num_classes: int, hidden: int = 64, seed: int = 0, dtype=np.float32,
                 fuse_init_scale: float = 0.01):
        rng = np.random.default_rng(seed)
        c = num_classes
        self.num_classes = c
        self.hidden = hidden
        self.gate_in = Linear(2 * c + 2, hidden, rng, dtype)
        self.gate_act = ReLU()
        self.gate_out = Linear(hidden, 1, rng, dtype, gain=1.0)
        self.fuse_in = Linear(c, hidden, rng, dtype)
        self.fuse_act = ReLU()
        self.fuse_out = Linear(hidden, c, rng, dtype, gain=1.0, scale=fuse_init_scale)
        self._cache = None
        self.last_gate = None

    def config(self):
        return {"num_classes": self.num_classes, "hidden": self.hidden}

    def gate(self, y1, y2):
        e1, p1, lp1 = entropy_rows(y1)
        e2, p2, lp2 = entropy_rows(y2)
        g_in = np.concatenate([y1, y2, e1[:, None], e2[:, None]], axis=1)
        s = self.gate_out.forward(self.gate_act.forward(self.gate_in.forward(g_in)))
        w = sigmoid(s[:, 0])
        return w, (e1, p1, lp1, e2, p2, lp2)

    def fuse(self, z):
        return z + self.fuse_out.forward(self.fuse_act.forward(self.fuse_in.forward(z)))

    def forward(self, y1, y2):
        _check_rows(y1, y2)
        w, ent = self.gate(y1, y2)
        z = w[:, None] * y1 + (1 - w[:, None]) * y2
        self._cache = (y1, y2, w, ent)
        self.last_gate = w
        return self.fuse(z)

    def backward(self, grad):
        y1, y2, w, (e1, p1, lp1, e2, p2, lp2) = self._need(self._cache)
        dz = grad + self.fuse_in.backward(self.fuse_act.backward(self.fuse_out.backward(grad)))
        wc = w[:, None]
        dy1 = wc * dz
        dy2 = (1 - wc) * dz
        dw = (dz * (y1 - y2)).sum(axis=1)
        ds = (dw * w * (1 - w))[:, None]
        dg = self.gate_in.backward(self.gate_act.backward(self.gate_out.backward(ds)))
        c = self.num_classes
        dy1 += dg[:, :c] + entropy_rows_backward(dg[:, 2 * c], p1, lp1, e1)
        dy2 += dg[:, c:2 * c] + entropy_rows_backward(dg[:, 2 * c + 1], p2, lp2, e2)
        return dy1, dy2

    def macs(self) -> int:
        n = 0 if self._cache is None else self._cache[0].shape[0]
        c, h = self.num_classes, self.hidden
        return n * ((2 * c + 2) * h + h + c * h + h * c)


def ensemble_gated(ens: GatedEnsembler, y1, y2):
    return ens.forward(y1, y2)


def ensemble_direct(y1, y2):
    _check_rows(y1, y2)
    return y2.copy()


def ensemble_entropy(y1, y2):
    """Per row, the logits with lower softmax entropy; ties go to ``y2``."""
    _check_rows(y1, y2)
    e1, _, _ = entropy_rows(y1)
    e2, _, _ = entropy_rows(y2)
    return np.where((e1 < e2)[:, None], y1, y2)


def ensemble_oracle(y1, y2, gt):
    """Take ``y2`` only where it is right and ``y1`` is wrong."""
    _check_rows(y1, y2)
    gt = np.asarray(gt)
    ok1 = argmax_channels(y1, axis=1) == gt
    ok2 = argmax_channels(y2, axis=1) == gt
    return np.where((ok2 & ~ok1)[:, None], y2, y1)


def scatter_refinements(initial, mask, fused) -> np.ndarray:
    """Final label map: argmax of ``fused`` at selected pixels, ``initial`` elsewhere.

    ``initial`` may be an ``(H, W)`` label map or ``(C, H, W)`` logits.
    """
    initial = np.asarray(initial)
    labels = argmax_channels(initial) if initial.ndim == 3 else initial.astype(np.uint8)
    m = mask.mask if isinstance(mask, SelectionMask) else np.asarray(mask, dtype=bool)
    if m.shape != labels.shape:
        raise AlignmentError(f"mask {m.shape} does not match prediction {labels.shape}")
    fused = np.asarray(fused)
    if fused.shape[0] != int(m.sum()):
        raise AlignmentError(f"{fused.shape[0]} fused rows for {int(m.sum())} selected pixels")
    out = labels.copy()
    if fused.shape[0]:
        out[m] = argmax_channels(fused, axis=1)
    return out
