"""Training loops for the low-resolution baseline and the sparse refiner."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..nn.loss import cross_entropy
from ..nn.optim import AdamW, TrainConfig
from ..refiner import RefinerConfig, build_refiner
from ..selector import entropy_map
from ..sparse.tensor import batch_dense_to_sparse
from ..tensor import nearest_upsample
from .model import FACTOR, SegModel, check_divisible, compute_normalization
from .synth import Dataset

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    skipped: int = 0

    def record(self, step, epoch, loss, lr, pixels):
        self.steps.append({"step": step, "epoch": epoch, "loss": loss, "lr": lr, "pixels": pixels})

    @property
    def losses(self) -> list[float]:
        return [s["loss"] for s in self.steps]

    def to_dict(self):
        return {"steps": self.steps, "skipped": self.skipped}


def _check_loss(loss, step):
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite loss at step {step}")


def lowres_labels(label, factor: int = FACTOR) -> np.ndarray:
    """Nearest subsampling: the label of the top-left pixel of each block."""
    return np.ascontiguousarray(label[::factor, ::factor])


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _crop_flip(x, y, crop, rng):
    """Random ``crop`` window and horizontal flip of ``(C, h, w)`` / ``(h, w)``."""
    h, w = y.shape
    ch, cw = crop if crop is not None else (h, w)
    if ch > h or cw > w:
        raise ValueError(f"crop {crop} larger than input {h}x{w}")
    oy = int(rng.integers(0, h - ch + 1))
    ox = int(rng.integers(0, w - cw + 1))
    x = x[:, oy:oy + ch, ox:ox + cw]
    y = y[oy:oy + ch, ox:ox + cw]
    if rng.random() < 0.5:
        x, y = x[:, :, ::-1], y[:, ::-1]
    return np.ascontiguousarray(x), np.ascontiguousarray(y)


def train_baseline(data: Dataset, arch: RefinerConfig, cfg: TrainConfig, crop=None,
                   model: SegModel | None = None) -> tuple[SegModel, TrainLog]:
    """Train the baseline on area-downsampled images with random crop + flip.

    ``crop`` is a low-resolution ``(h, w)`` window or ``None`` for full frames.
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    for im in data.images:
        check_divisible(im.shape)
    if model is None:
        mean, std = compute_normalization(data.images)
        model = SegModel(build_refiner(arch, cfg.seed), mean, std)
    net = model.baseline
    inputs = [model.lowres_input(im) for im in data.images]
    targets = [lowres_labels(lb, model.factor) for lb in data.labels]
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(len(data) / cfg.batch_size)
    total = cfg.total_steps or steps_per_epoch * cfg.epochs
    opt = AdamW(net.parameters(), cfg, total)
    net.train()
    tlog = TrainLog()
    step = 0
    for epoch in range(cfg.epochs):
        for idx in _batches(len(data), cfg.batch_size, rng):
            if step >= total:
                break
            xs, ys = zip(*(_crop_flip(inputs[i], targets[i], crop, rng) for i in idx))
            x = batch_dense_to_sparse(xs, [np.ones(y.shape, bool) for y in ys])
            out = net.forward(x)
            loss, grad = cross_entropy(out.features, np.concatenate([y.reshape(-1) for y in ys]))
            _check_loss(loss, step)
            net.backward(grad)
            lr = opt.step()
            tlog.record(step, epoch, loss, lr, len(x))
            step += 1
        log.info("baseline epoch %d loss %.4f", epoch, tlog.losses[-1] if tlog.steps else float("nan"))
    net.eval()
    model.meta["baseline_train"] = cfg.to_dict()
    return model, tlog


def flip_image(image):
    return np.ascontiguousarray(image[:, ::-1])


def cache_baseline_logits(model: SegModel, images, batch: int = 4) -> list[np.ndarray]:
    """Low-resolution baseline logits for each image, evaluated in small batches."""
    out = []
    for i in range(0, len(images), batch):
        out.extend(model.baseline_logits([model.lowres_input(im) for im in images[i:i + batch]]))
    return out


def select_from_logits(low_logits, alpha: float, factor: int = FACTOR) -> np.ndarray:
    """Full-resolution entropy selection from low-resolution logits.

    Nearest upsampling copies logit vectors, so upsampling the entropy is the
    same as taking the entropy of the upsampled logits.
    """
    return nearest_upsample(entropy_map(low_logits), factor) > alpha


def gather_rows(low_logits, mask, factor: int = FACTOR) -> np.ndarray:
    """Upsampled low-resolution logit vectors at the selected full-resolution pixels."""
    ys, xs = np.nonzero(mask)
    return np.ascontiguousarray(low_logits[:, ys // factor, xs // factor].T)


def train_refiner(data: Dataset, model: SegModel, alpha: float, arch: RefinerConfig,
                  cfg: TrainConfig, hidden: int = 64, strategy: str = "gated",
                  flip: bool = True) -> tuple[SegModel, TrainLog]:
    """Train refiner + ensembler on the pixels the frozen baseline is unsure about.

    Only refiner and ensembler parameters reach the optimizer; the baseline
    runs in eval mode and never sees a gradient. Batches with no selected
    pixel are skipped and counted.
    """
    if strategy not in ("gated", "direct"):
        raise ValueError(f"can only train with 'gated' or 'direct', got {strategy!r}")
    if len(data) == 0:
        raise ValueError("empty training set")
    model.with_refiner(arch, cfg.seed, hidden)
    model.alpha = float(alpha)
    refiner, ens = model.refiner, model.ensembler
    variants = [data.images] + ([[flip_image(im) for im in data.images]] if flip else [])
    label_variants = [data.labels] + ([[flip_image(lb) for lb in data.labels]] if flip else [])
    logits = [cache_baseline_logits(model, ims) for ims in variants]
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(len(data) / cfg.batch_size)
    total = cfg.total_steps or steps_per_epoch * cfg.epochs
    params = refiner.parameters() + (ens.parameters() if strategy == "gated" else [])
    opt = AdamW(params, cfg, total)
    refiner.train()
    ens.train()
    tlog = TrainLog()
    step = 0
    for epoch in range(cfg.epochs):
        for idx in _batches(len(data), cfg.batch_size, rng):
            if step >= total:
                break
            feats, masks, y1, gt = [], [], [], []
            for i in idx:
                v = int(rng.integers(len(variants)))
                low = logits[v][i]
                m = select_from_logits(low, alpha, model.factor)
                feats.append(model.normalize(variants[v][i]))
                masks.append(m)
                y1.append(gather_rows(low, m, model.factor))
                gt.append(label_variants[v][i][m])
            n = int(sum(m.sum() for m in masks))
            if n == 0:
                tlog.skipped += 1
                continue
            x = batch_dense_to_sparse(feats, masks)
            y2 = refiner.forward(x).features
            y1 = np.concatenate(y1)
            fused = ens.forward(y1, y2) if strategy == "gated" else y2
            loss, grad = cross_entropy(fused, np.concatenate(gt))
            _check_loss(loss, step)
            if strategy == "gated":
                _, grad = ens.backward(grad)
            refiner.backward(grad)
            lr = opt.step()
            tlog.record(step, epoch, loss, lr, n)
            step += 1
        log.info("refiner epoch %d loss %.4f skipped %d", epoch,
                 tlog.losses[-1] if tlog.steps else float("nan"), tlog.skipped)
    refiner.eval()
    ens.eval()
    model.meta["refiner_train"] = dict(cfg.to_dict(), strategy=strategy, flip=flip)
    return model, tlog
