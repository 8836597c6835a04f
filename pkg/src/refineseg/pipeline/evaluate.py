"""Inference through the full pipeline and split-level evaluation."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from ..ensembler import STRATEGIES, ensemble_direct, ensemble_entropy, ensemble_oracle, scatter_refinements
from ..selector import report_from_counts, selector_counts
from ..sparse.tensor import batch_dense_to_sparse
from ..tensor import IGNORE, argmax_channels, nearest_upsample
from .model import SegModel, check_divisible
from .synth import Dataset
from .train import cache_baseline_logits, gather_rows, select_from_logits

STAGES = ("baseline", "selector", "extractor", "ensembler")
MODES = ("baseline",) + STRATEGIES


# --- metrics -----------------------------------------------------------------

def confusion_matrix(pred, gt, num_classes: int, ignore: int = IGNORE) -> np.ndarray:
    """``conf[g, p]`` pixel counts; ``ignore`` pixels in ``gt`` are dropped."""
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    gt = np.asarray(gt).reshape(-1).astype(np.int64)
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground truth differ in size")
    keep = gt != ignore
    pred, gt = pred[keep], gt[keep]
    if gt.size and (max(gt.max(), pred.max()) >= num_classes or min(gt.min(), pred.min()) < 0):
        raise ValueError("label outside [0, num_classes)")
    return np.bincount(gt * num_classes + pred, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def per_class_iou(conf) -> dict[int, float]:
    """IoU of every class that occurs in ground truth or prediction."""
    conf = np.asarray(conf)
    tp = np.diag(conf)
    union = conf.sum(axis=0) + conf.sum(axis=1) - tp
    return {int(c): float(tp[c] / union[c]) for c in np.flatnonzero(union)}


def mean_iou(class_iou: dict[int, float]) -> float:
    if not class_iou:
        raise ValueError("mIoU undefined: no class present")
    return float(np.mean(list(class_iou.values())))


# --- reports -----------------------------------------------------------------

@dataclass
class EvalReport:
    mode: str
    alpha: float | None
    images: int
    class_iou: dict
    miou: float
    density: float
    recall: float
    precision: float
    macs: dict
    timings: dict = field(default_factory=dict)

    def to_dict(self, timings: bool = True) -> dict:
        d = asdict(self)
        d["class_iou"] = {str(k): v for k, v in self.class_iou.items()}
        if not timings:
            d.pop("timings")
        return d

    def canonical(self) -> str:
        """Deterministic JSON without wall-clock fields, for byte comparison."""
        return json.dumps(self.to_dict(timings=False), sort_keys=True, separators=(",", ":"))


@dataclass
class RefineResult:
    labels: np.ndarray
    mask: np.ndarray
    baseline_labels: np.ndarray
    macs: dict
    timings: dict


def _clock():
    return time.perf_counter()


def refine_from_logits(model: SegModel, image, low_logits, mode: str = "gated",
                       alpha: float | None = None, gt=None) -> RefineResult:
    """Selection, refinement and fusion given cached low-resolution baseline logits."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {MODES}")
    alpha = model.alpha if alpha is None else alpha
    times = dict.fromkeys(STAGES, 0.0)
    macs = dict.fromkeys(STAGES, 0)
    up = nearest_upsample(low_logits, model.factor)
    base = argmax_channels(up)
    if mode == "baseline":
        return RefineResult(base, np.zeros(base.shape, bool), base, macs, times)
    if model.refiner is None:
        raise ValueError("checkpoint has no refiner")
    if alpha is None:
        raise ValueError("no entropy threshold given or stored")
    t = _clock()
    mask = select_from_logits(low_logits, alpha, model.factor)
    times["selector"] = _clock() - t
    n = int(mask.sum())
    if n == 0:
        return RefineResult(base, mask, base, macs, times)
    t = _clock()
    y2 = model.refiner.forward(batch_dense_to_sparse([model.normalize(image)], [mask])).features
    times["extractor"] = _clock() - t
    macs["extractor"] = model.refiner.macs()
    y1 = gather_rows(low_logits, mask, model.factor)
    t = _clock()
    if mode == "gated":
        fused = model.ensembler.forward(y1, y2)
        macs["ensembler"] = model.ensembler.macs()
    elif mode == "direct":
        fused = ensemble_direct(y1, y2)
    elif mode == "entropy":
        fused = ensemble_entropy(y1, y2)
    else:
        if gt is None:
            raise ValueError("the oracle ensemble needs ground truth")
        fused = ensemble_oracle(y1, y2, np.asarray(gt)[mask])
    labels = scatter_refinements(base, mask, fused)
    times["ensembler"] = _clock() - t
    return RefineResult(labels, mask, base, macs, times)


def refine_image(model: SegModel, image, mode: str = "gated", alpha: float | None = None,
                 gt=None) -> RefineResult:
    """Full pipeline on one ``(H, W, 3)`` uint8 image."""
    check_divisible(np.shape(image), model.factor)
    t = _clock()
    low = model.baseline_logits([model.lowres_input(image)])[0]
    elapsed = _clock() - t
    res = refine_from_logits(model, image, low, mode, alpha, gt)
    res.timings["baseline"] = elapsed
    res.macs["baseline"] = model.baseline.macs()
    return res


def dense_macs(model: SegModel, height: int, width: int) -> int:
    """MACs of the baseline run densely at full resolution."""
    key = f"dense_macs_{height}x{width}"
    cached = model.cache.get(key)
    if cached is not None:
        return cached
    x = np.zeros((3, height, width), np.float32)
    model.baseline_logits([x])
    macs = model.baseline.macs()
    model.cache[key] = macs
    return macs


def baseline_macs(model: SegModel, height: int, width: int) -> int:
    return dense_macs(model, height // model.factor, width // model.factor)


def evaluate(data: Dataset, model: SegModel, mode: str = "gated", alpha: float | None = None,
             low_logits=None) -> EvalReport:
    """Accumulate one confusion matrix over the split and report IoU, selector stats and cost.

    ``low_logits`` may carry precomputed baseline logits (they depend only on
    the frozen baseline) to share them across several evaluations.
    """
    if len(data) == 0:
        raise ValueError("empty split")
    c = model.num_classes
    conf = np.zeros((c, c), np.int64)
    counts = np.zeros(4, np.int64)
    macs = dict.fromkeys(STAGES, 0)
    times = dict.fromkeys(STAGES, 0.0)
    if low_logits is None:
        t = _clock()
        low_logits = cache_baseline_logits(model, data.images, batch=1)
        times["baseline"] = _clock() - t
    dense_total = 0
    for image, label, low in zip(data.images, data.labels, low_logits):
        h, w = label.shape
        res = refine_from_logits(model, image, low, mode, alpha, label)
        conf += confusion_matrix(res.labels, label, c)
        counts += selector_counts(res.mask, res.baseline_labels, label)
        res.macs["baseline"] = baseline_macs(model, h, w)
        for k in STAGES:
            macs[k] += res.macs[k]
            times[k] += res.timings[k]
        dense_total += dense_macs(model, h, w)
    sel = report_from_counts(*counts)
    ious = per_class_iou(conf)
    n = len(data)
    macs_report = {f"{k}": int(v) for k, v in macs.items()}
    macs_report["selector"] = 0
    macs_report["total"] = int(sum(macs.values()))
    macs_report["dense_full"] = int(dense_total)
    return EvalReport(
        mode=mode, alpha=None if mode == "baseline" else float(model.alpha if alpha is None else alpha),
        images=n, class_iou=ious, miou=mean_iou(ious),
        density=sel.density, recall=sel.recall, precision=sel.precision,
        macs=macs_report, timings={k: v / n for k, v in times.items()},
    )
