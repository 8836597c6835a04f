"""The frozen low-resolution baseline plus the sparse refiner and ensembler."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..checkpoint import CheckpointError, load_checkpoint, load_layer, prefixed_state, save_checkpoint
from ..ensembler import GatedEnsembler
from ..refiner import RefinerConfig, SparseUNet, build_refiner
from ..sparse.tensor import batch_dense_to_sparse
from ..tensor import area_downsample, normalize_rgb

FACTOR = 2


def compute_normalization(images) -> tuple[tuple, tuple]:
    """Per-channel mean and std of ``u8 / 255`` over a list of HWC images."""
    total = np.zeros(3)
    sq = np.zeros(3)
    n = 0
    for im in images:
        x = np.asarray(im, dtype=np.float64).reshape(-1, 3) / 255.0
        total += x.sum(axis=0)
        sq += (x * x).sum(axis=0)
        n += x.shape[0]
    if n == 0:
        raise ValueError("no images to normalize over")
    mean = total / n
    std = np.sqrt(np.maximum(sq / n - mean * mean, 1e-12))
    return tuple(float(v) for v in mean), tuple(float(v) for v in std)


def check_divisible(shape, factor: int = FACTOR):
    h, w = shape[:2]
    if h % factor or w % factor:
        raise ValueError(f"image {h}x{w} not divisible by downsample factor {factor}")


@dataclass
class SegModel:
    baseline: SparseUNet
    mean: tuple = (0.5, 0.5, 0.5)
    std: tuple = (0.25, 0.25, 0.25)
    factor: int = FACTOR
    refiner: SparseUNet | None = None
    ensembler: GatedEnsembler | None = None
    alpha: float | None = None
    meta: dict = field(default_factory=dict)
    cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_classes(self) -> int:
        return self.baseline.cfg.num_classes

    def normalize(self, image) -> np.ndarray:
        return normalize_rgb(image, self.mean, self.std)

    def lowres_input(self, image) -> np.ndarray:
        check_divisible(np.shape(image), self.factor)
        return area_downsample(self.normalize(image), self.factor)

    def baseline_logits(self, lowres_inputs) -> list[np.ndarray]:
        """Eval-mode baseline on fully active ``(3, h, w)`` inputs; ``(C, h, w)`` logits each."""
        self.baseline.eval()
        shapes = [x.shape[1:] for x in lowres_inputs]
        x = batch_dense_to_sparse(lowres_inputs, [np.ones(s, bool) for s in shapes])
        rows = self.baseline.forward(x).features
        out, start = [], 0
        for h, w in shapes:
            out.append(np.ascontiguousarray(rows[start:start + h * w].T.reshape(-1, h, w)))
            start += h * w
        return out

    def with_refiner(self, cfg: RefinerConfig, seed: int, hidden: int = 64) -> "SegModel":
        if cfg.num_classes != self.num_classes:
            raise ValueError("refiner and baseline must agree on num_classes")
        self.refiner = build_refiner(cfg, seed)
        self.ensembler = GatedEnsembler(cfg.num_classes, hidden, seed=seed + 1)
        return self

    def config(self) -> dict:
        return {
            "baseline": self.baseline.cfg.to_dict(),
            "refiner": None if self.refiner is None else self.refiner.cfg.to_dict(),
            "ensembler": None if self.ensembler is None else self.ensembler.config(),
            "norm": {"mean": list(self.mean), "std": list(self.std)},
            "factor": self.factor,
            "alpha": self.alpha,
            "meta": self.meta,
        }

    def tensors(self) -> dict[str, np.ndarray]:
        t = prefixed_state(self.baseline, "baseline")
        if self.refiner is not None:
            t.update(prefixed_state(self.refiner, "refiner"))
        if self.ensembler is not None:
            t.update(prefixed_state(self.ensembler, "ensembler"))
        return t

    def save(self, path) -> None:
        save_checkpoint(path, self.config(), self.tensors())

    @classmethod
    def load(cls, path) -> "SegModel":
        cfg, tensors = load_checkpoint(path)
        try:
            baseline = build_refiner(RefinerConfig.from_dict(cfg["baseline"]))
            model = cls(baseline, tuple(cfg["norm"]["mean"]), tuple(cfg["norm"]["std"]),
                        int(cfg["factor"]), alpha=cfg.get("alpha"), meta=cfg.get("meta", {}))
            if cfg.get("refiner") is not None:
                model.refiner = build_refiner(RefinerConfig.from_dict(cfg["refiner"]))
            if cfg.get("ensembler") is not None:
                e = cfg["ensembler"]
                model.ensembler = GatedEnsembler(int(e["num_classes"]), int(e["hidden"]))
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"bad checkpoint config: {e}") from e
        load_layer(model.baseline, tensors, "baseline")
        if model.refiner is not None:
            load_layer(model.refiner, tensors, "refiner")
        if model.ensembler is not None:
            load_layer(model.ensembler, tensors, "ensembler")
        known = {"baseline", "refiner", "ensembler"}
        stray = sorted(k for k in tensors if k.split(".", 1)[0] not in known)
        if stray:
            raise CheckpointError(f"unexpected tensor {stray[0]!r}")
        if (model.refiner is None) != (model.ensembler is None):
            raise CheckpointError("refiner and ensembler must be saved together")
        for layer in (model.baseline, model.refiner, model.ensembler):
            if layer is not None:
                layer.eval()
        return model
