"""Pixel selectors (entropy, random, magnitude) and their recall/precision."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import IGNORE, NumericError


@dataclass(frozen=True)
class SelectionMask:
    """Boolean pixel mask plus its row-major coordinate list."""

    mask: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool)
        if m.ndim != 2:
            raise ValueError("selection masks are 2-D")
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    @property
    def coords(self) -> np.ndarray:
        """``(N, 2)`` array of ``(y, x)`` in row-major order."""
        return np.argwhere(self.mask)

    @property
    def count(self) -> int:
        return int(self.mask.sum())

    @property
    def density(self) -> float:
        return self.count / self.mask.size


@dataclass(frozen=True)
class SelectorReport:
    density: float
    recall: float
    precision: float


def _log_softmax(logits, axis):
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def entropy_map(logits, axis: int = 0) -> np.ndarray:
    """Per-pixel natural-log entropy of the softmax over ``axis``.

    Computed as ``-sum p * log p`` with ``log p`` from a log-softmax, so a
    vanishing probability contributes exactly zero.
    """
    logits = np.asarray(logits)
    if logits.shape[axis] < 2:
        raise ValueError("entropy needs at least two classes")
    if np.isnan(logits).any():
        raise NumericError("NaN in logits")
    if not np.issubdtype(logits.dtype, np.floating):
        logits = logits.astype(np.float64)
    logp = _log_softmax(logits, axis)
    p = np.exp(logp)
    e = -(p * logp).sum(axis=axis)
    # rounding can land a hair outside [0, ln C]
    return np.clip(e, 0, np.log(logits.shape[axis]))


def entropy_rows(logits):
    """Entropy of each row of ``(N, C)`` logits and the softmax/log-softmax used."""
    logp = _log_softmax(logits, 1)
    p = np.exp(logp)
    return -(p * logp).sum(axis=1), p, logp


def entropy_rows_backward(grad_e, p, logp, e):
    # d e / d y_c = -p_c (log p_c + e)
    return -p * (logp + e[:, None]) * grad_e[:, None]


def select_entropy(entropy, alpha: float) -> SelectionMask:
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    return SelectionMask(np.asarray(entropy) > alpha)


def _budget(h, w, density):
    if not 0 <= density <= 1:
        raise ValueError("density must lie in [0, 1]")
    return int(np.floor(density * h * w + 1e-9))


def select_random(height: int, width: int, density: float, seed: int) -> SelectionMask:
    """Exactly ``floor(density * H * W)`` pixels, uniform without replacement."""
    k = _budget(height, width, density)
    rng = np.random.default_rng(seed)
    flat = np.zeros(height * width, dtype=bool)
    flat[rng.choice(height * width, size=k, replace=False)] = True
    return SelectionMask(flat.reshape(height, width))


def select_magnitude(features, density: float) -> SelectionMask:
    """The ``floor(density * H * W)`` pixels with the smallest L2 feature norm.

    Ties resolve in scan order.
    """
    features = np.asarray(features)
    _, h, w = features.shape
    k = _budget(h, w, density)
    norms = np.sqrt((features.astype(np.float64) ** 2).sum(axis=0)).reshape(-1)
    order = np.argsort(norms, kind="stable")
    flat = np.zeros(h * w, dtype=bool)
    flat[order[:k]] = True
    return SelectionMask(flat.reshape(h, w))


def error_map(pred, gt, ignore: int = IGNORE) -> np.ndarray:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return (pred != gt) & (gt != ignore)


def selector_counts(mask, pred, gt, ignore: int = IGNORE) -> tuple[int, int, int, int]:
    """``(selected, errors, selected & errors, total pixels)`` for accumulation."""
    m = mask.mask if isinstance(mask, SelectionMask) else np.asarray(mask, dtype=bool)
    err = error_map(pred, gt, ignore)
    if m.shape != err.shape:
        raise ValueError(f"mask {m.shape} does not match labels {err.shape}")
    return int(m.sum()), int(err.sum()), int((m & err).sum()), int(m.size)


def report_from_counts(selected, errors, hits, total) -> SelectorReport:
    return SelectorReport(
        density=selected / total if total else 0.0,
        recall=hits / errors if errors else 0.0,
        precision=hits / selected if selected else 0.0,
    )


def selector_metrics(mask, pred, gt, ignore: int = IGNORE) -> SelectorReport:
    return report_from_counts(*selector_counts(mask, pred, gt, ignore))
