"""Latency and MAC benchmarks: warm-up discarded, one stream, BN folded."""

from __future__ import annotations

import copy
import gc
import time
from dataclasses import asdict, dataclass

import numpy as np

from ..nn.layers import fold_batch_norms
from ..selector import entropy_map, select_random
from ..sparse.conv import dense_conv2d, submanifold_conv
from ..sparse.coords import CoordSet
from ..sparse.macs import dense_conv_macs
from ..sparse.tensor import SparseTensor, dense_to_sparse
from .model import SegModel

STEPS = 500
WARMUP = 100


def time_steps(fn, steps: int = STEPS, warmup: int = WARMUP) -> np.ndarray:
    """Per-call wall-clock seconds of ``fn()`` after ``warmup`` discarded calls."""
    if steps < 1 or warmup < 0:
        raise ValueError("need steps >= 1 and warmup >= 0")
    for _ in range(warmup):
        fn()
    out = np.empty(steps)
    # collector pauses would land in random steps, as timeit also avoids
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        for i in range(steps):
            t = time.perf_counter()
            fn()
            out[i] = time.perf_counter() - t
    finally:
        if was_enabled:
            gc.enable()
    return out


@dataclass
class ConvBench:
    height: int
    width: int
    channels: int
    density: float
    sites: int
    sparse_ms: float
    dense_ms: float
    sparse_macs: int
    dense_macs: int

    @property
    def ratio(self) -> float:
        return self.sparse_ms / self.dense_ms

    def to_dict(self):
        return dict(asdict(self), ratio=self.ratio)


def bench_conv(height: int = 256, width: int = 512, channels: int = 32, density: float = 0.1,
               steps: int = STEPS, warmup: int = WARMUP, seed: int = 0,
               dense_steps: int | None = None) -> ConvBench:
    """One 3x3 submanifold conv on a random mask against the dense reference conv.

    The sparse timing includes building the kernel map on every call.
    """
    rng = np.random.default_rng(seed)
    mask = select_random(height, width, density, seed).mask
    x = rng.standard_normal((channels, height, width)).astype(np.float32)
    w = (rng.standard_normal((3, 3, channels, channels)) / np.sqrt(9 * channels)).astype(np.float32)
    b = np.zeros(channels, np.float32)
    w_sparse = np.ascontiguousarray(w.reshape(9, channels, channels))
    sparse = dense_to_sparse(x, mask)
    coords, keys = sparse.cset.coords, sparse.cset.keys

    def run_sparse():
        # a fresh coordinate set each call, so hashing and the kernel map are rebuilt
        return submanifold_conv(SparseTensor(sparse.features, CoordSet(coords, 1, keys=keys)),
                                w_sparse, b)

    _, kmap = submanifold_conv(sparse, w_sparse, b)
    t_sparse = time_steps(run_sparse, steps, warmup)
    t_dense = time_steps(lambda: dense_conv2d(x, w, b), dense_steps or steps, warmup)
    return ConvBench(height, width, channels, density, len(sparse),
                     float(t_sparse.mean() * 1e3), float(t_dense.mean() * 1e3),
                     kmap.total_pairs * channels * channels,
                     dense_conv_macs(3, channels, channels, height, width))


def bench_model(model: SegModel, height: int, width: int, densities, steps: int = STEPS,
                warmup: int = WARMUP, seed: int = 0) -> list[dict]:
    """Per-stage latency and MACs of the refinement path at several densities.

    The refiner runs with batch norm folded. Density 1.0 is the fully active
    dense reference for the same network.
    """
    if model.refiner is None:
        raise ValueError("checkpoint has no refiner")
    refiner = copy.deepcopy(model.refiner)
    fold_batch_norms(refiner)
    ens = model.ensembler
    ens.eval()
    rng = np.random.default_rng(seed)
    image = rng.integers(0, 256, (height, width, 3), dtype=np.uint8)
    logits = rng.standard_normal((model.num_classes, height, width)).astype(np.float32)
    feats = model.normalize(image)
    rows = []
    for d in densities:
        mask = select_random(height, width, float(d), seed).mask
        x = dense_to_sparse(feats, mask)
        y1 = np.ascontiguousarray(logits[:, mask].T)
        y2 = refiner.forward(x).features
        macs_ext = refiner.macs()
        ens.forward(y1, y2)
        t_sel = time_steps(lambda: entropy_map(logits) > 0.5, steps, warmup)
        # fresh tensors per call: gathering and kernel maps count toward latency
        t_ext = time_steps(lambda: refiner.forward(dense_to_sparse(feats, mask)), steps, warmup)
        t_ens = time_steps(lambda: ens.forward(y1, y2), steps, warmup)
        rows.append({
            "density": float(d), "sites": len(x),
            "selector_ms": float(t_sel.mean() * 1e3),
            "extractor_ms": float(t_ext.mean() * 1e3),
            "ensembler_ms": float(t_ens.mean() * 1e3),
            "extractor_macs": int(macs_ext), "ensembler_macs": int(ens.macs()),
        })
    ones = np.ones((height, width), bool)
    refiner.forward(dense_to_sparse(feats, ones))
    dense_macs = refiner.macs()
    t_dense = time_steps(lambda: refiner.forward(dense_to_sparse(feats, ones)), steps, warmup)
    for r in rows:
        r["dense_ms"] = float(t_dense.mean() * 1e3)
        r["dense_macs"] = int(dense_macs)
    return rows
