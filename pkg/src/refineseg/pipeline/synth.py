"""Synthetic street-scene-like segmentation data with thin structures.

Classes: 0 background, 1 and 2 large blobs, 3 and 4 thin lines (1-2 px),
5 small squares standing in for distant objects. Thin lines are what a
half-resolution model loses.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..tensor import read_pgm, read_ppm, write_pgm, write_ppm

CLASS_NAMES = ("background", "blob_a", "blob_b", "line_a", "line_b", "square")
CLASS_COLORS = np.array([
    [96, 110, 96],
    [180, 70, 60],
    [60, 90, 180],
    [230, 220, 60],
    [40, 200, 210],
    [220, 80, 210],
], dtype=np.float64)


@dataclass
class SynthSpec:
    height: int = 128
    width: int = 256
    num_classes: int = 6
    num_train: int = 200
    num_val: int = 50
    blobs: tuple = (2, 4)
    blob_radius: tuple = (10, 28)
    lines: tuple = (3, 6)
    line_width: tuple = (1, 2)
    squares: tuple = (3, 7)
    square_size: tuple = (2, 4)
    noise: float = 10.0
    seed: int = 0

    def __post_init__(self):
        for name in ("blobs", "blob_radius", "lines", "line_width", "squares", "square_size"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"bad range for {name}: {(lo, hi)}")
            setattr(self, name, (int(lo), int(hi)))
        if self.line_width[0] < 1 or self.square_size[0] < 1 or self.blob_radius[0] <= 0:
            raise ValueError("shape sizes must be positive")
        if self.num_classes != len(CLASS_NAMES):
            raise ValueError(f"the generator draws exactly {len(CLASS_NAMES)} classes")
        if self.height % 2 or self.width % 2:
            raise ValueError("image dims must be even")

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _segment_distance(yy, xx, y0, x0, y1, x1):
    dy, dx = y1 - y0, x1 - x0
    t = ((yy - y0) * dy + (xx - x0) * dx) / max(dy * dy + dx * dx, 1e-9)
    t = np.clip(t, 0, 1)
    return np.hypot(yy - (y0 + t * dy), xx - (x0 + t * dx))


def _line_mask(rng, h, w, width, yy, xx):
    # long lines spanning a good part of the frame, any orientation
    length = rng.uniform(0.4, 1.0) * max(h, w)
    theta = rng.uniform(0, np.pi)
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    dy, dx = np.sin(theta) * length / 2, np.cos(theta) * length / 2
    d = _segment_distance(yy, xx, cy - dy, cx - dx, cy + dy, cx + dx)
    return d <= width / 2


def render(spec: SynthSpec, rng) -> tuple[np.ndarray, np.ndarray]:
    """One ``(H, W, 3)`` uint8 image and its ``(H, W)`` uint8 label map."""
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    label = np.zeros((h, w), np.uint8)
    color = np.empty((h, w, 3))
    # smooth background shading
    gy, gx = rng.uniform(-20, 20, 3), rng.uniform(-20, 20, 3)
    color[:] = CLASS_COLORS[0] + (yy / h - 0.5)[..., None] * gy + (xx / w - 0.5)[..., None] * gx

    def paint(mask, cls):
        label[mask] = cls
        color[mask] = CLASS_COLORS[cls] + rng.uniform(-12, 12, 3)

    for _ in range(rng.integers(spec.blobs[0], spec.blobs[1] + 1)):
        ry = rng.uniform(*spec.blob_radius)
        rx = rng.uniform(*spec.blob_radius) * 1.5
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        paint(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1, int(rng.integers(1, 3)))
    for _ in range(rng.integers(spec.squares[0], spec.squares[1] + 1)):
        s = int(rng.integers(spec.square_size[0], spec.square_size[1] + 1))
        y0, x0 = int(rng.integers(0, h - s + 1)), int(rng.integers(0, w - s + 1))
        m = np.zeros((h, w), bool)
        m[y0:y0 + s, x0:x0 + s] = True
        paint(m, 5)
    n_lines = int(rng.integers(spec.lines[0], spec.lines[1] + 1))
    if spec.lines[1] > 0:
        # every image carries at least one thin structure
        n_lines = max(n_lines, 1)
    for _ in range(n_lines):
        width = int(rng.integers(spec.line_width[0], spec.line_width[1] + 1))
        for _ in range(100):
            m = _line_mask(rng, h, w, width, yy, xx)
            if m.any():
                break
        paint(m, int(rng.integers(3, 5)))
    if spec.noise > 0:
        color += rng.normal(0, spec.noise, color.shape)
    image = np.clip(np.rint(color), 0, 255).astype(np.uint8)
    return image, label


def _image_rng(seed, split_index):
    return np.random.default_rng(np.random.SeedSequence([seed, split_index]))


def synth_generate(spec: SynthSpec, out_dir) -> Path:
    """Write ``train/`` and ``val/`` PPM/PGM pairs plus ``synth.json``."""
    out = Path(out_dir)
    for split, count, base in (("train", spec.num_train, 0), ("val", spec.num_val, spec.num_train)):
        d = out / split
        d.mkdir(parents=True, exist_ok=True)
        for i in range(count):
            image, label = render(spec, _image_rng(spec.seed, base + i))
            write_ppm(d / f"{i:04d}.ppm", image)
            write_pgm(d / f"{i:04d}.pgm", label)
    (out / "synth.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    return out


@dataclass
class Dataset:
    images: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    names: list = field(default_factory=list)
    num_classes: int = 6

    def __len__(self):
        return len(self.images)


def load_split(data_dir, split: str) -> Dataset:
    d = Path(data_dir) / split
    meta = Path(data_dir) / "synth.json"
    num_classes = json.loads(meta.read_text())["num_classes"] if meta.exists() else len(CLASS_NAMES)
    ds = Dataset(num_classes=num_classes)
    for ppm in sorted(d.glob("*.ppm")):
        ds.images.append(read_ppm(ppm))
        ds.labels.append(read_pgm(ppm.with_suffix(".pgm")))
        ds.names.append(ppm.stem)
    return ds
