"""Self-checks behind ``verify --suite``: conv equivalence, gradients, coordinates."""

from __future__ import annotations

import numpy as np

from ..ensembler import GatedEnsembler
from ..nn.gradcheck import GradCheckReport, grad_check
from ..nn.layers import (BasicBlock, BatchNorm, ConvBN, InverseConv, Layer, Linear, ReLU,
                         StridedConv, SubmConv)
from ..refiner import RefinerConfig, build_refiner
from ..sparse.conv import dense_conv2d, strided_conv, submanifold_conv
from ..sparse.tensor import SparseTensor, dense_to_sparse

DENSITIES = (0.05, 0.1, 0.5, 1.0)
DESK6 = (8, 16, 32, 64, 128, 256)
GRAD_TOL = 1e-6


def random_mask(rng, height, width, density, min_sites=1):
    m = rng.random((height, width)) < density
    while m.sum() < min_sites:
        m[rng.integers(height), rng.integers(width)] = True
    return m


def conv_case(rng):
    """One randomized submanifold-vs-dense comparison; returns the max abs error."""
    h, w = (int(v) for v in rng.integers(1, 33, 2))
    cin, cout = (int(v) for v in rng.integers(1, 17, 2))
    k = int(rng.choice([1, 3]))
    mask = random_mask(rng, h, w, float(rng.choice(DENSITIES)))
    x = (rng.standard_normal((cin, h, w)) * mask).astype(np.float32)
    weight = rng.standard_normal((k, k, cin, cout)).astype(np.float32) / np.float32(k * np.sqrt(cin))
    bias = rng.standard_normal(cout).astype(np.float32)
    out, _ = submanifold_conv(dense_to_sparse(x, mask), weight.reshape(k * k, cin, cout), bias)
    ref = dense_conv2d(x, weight, bias)[:, mask].T
    return float(np.abs(out.features - ref).max())


def conv_suite(cases: int = 200, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    errs = [conv_case(rng) for _ in range(cases)]
    worst = max(errs)
    return {"suite": "conv", "cases": cases, "max_abs_error": worst, "passed": worst < 1e-4}


def _sparse_input(rng, cin, min_sites=16, size=12):
    mask = random_mask(rng, size, size, 0.4, min_sites)
    x = dense_to_sparse(rng.standard_normal((cin, size, size)), mask)
    return x


def _layer_check(layer: Layer, x: SparseTensor, seed, make_input=None):
    feats = x.features.copy()

    def forward():
        inp = x.replace(feats)
        out = layer.forward(inp)
        return out.features if isinstance(out, SparseTensor) else out

    return grad_check(layer, forward, lambda g: [layer.backward(g)], [feats], GRAD_TOL,
                      n_coords=30, h=1e-4, seed=seed, stencil=4)


def grad_cases(seed: int):
    """``(name, thunk)`` pairs; each thunk builds a fresh float64 instance and checks it."""
    f64 = np.float64

    def subm(k):
        def run():
            rng = np.random.default_rng(seed)
            return _layer_check(SubmConv(3, 4, k, rng, f64), _sparse_input(rng, 3), seed)
        return run

    def strided():
        rng = np.random.default_rng(seed)
        return _layer_check(StridedConv(3, 4, rng, f64), _sparse_input(rng, 3), seed)

    def inverse():
        rng = np.random.default_rng(seed)
        fine = _sparse_input(rng, 2)
        coarse, _ = strided_conv(fine, rng.standard_normal((4, 2, 3)))
        return _layer_check(InverseConv(3, 2, rng, f64), coarse, seed)

    def bn():
        rng = np.random.default_rng(seed)
        layer = BatchNorm(3, f64)
        layer.gamma.value[:] = rng.uniform(0.5, 1.5, 3)
        layer.beta.value[:] = rng.standard_normal(3)
        return _layer_check(layer, _sparse_input(rng, 3), seed)

    def relu():
        rng = np.random.default_rng(seed)
        return _layer_check(ReLU(), _sparse_input(rng, 3), seed)

    def linear():
        rng = np.random.default_rng(seed)
        return _layer_check(Linear(3, 5, rng, f64), _sparse_input(rng, 3), seed)

    def convbn():
        rng = np.random.default_rng(seed)
        return _layer_check(ConvBN(3, 4, 3, rng, True, f64), _sparse_input(rng, 3), seed)

    def block():
        rng = np.random.default_rng(seed)
        return _layer_check(BasicBlock(3, 4, rng, f64), _sparse_input(rng, 3), seed)

    def ensembler():
        rng = np.random.default_rng(seed)
        ens = GatedEnsembler(4, hidden=8, seed=seed, dtype=f64, fuse_init_scale=1.0)
        y1, y2 = rng.standard_normal((2, 20, 4)) * 2
        return grad_check(ens, lambda: ens.forward(y1, y2), lambda g: list(ens.backward(g)),
                          [y1, y2], GRAD_TOL, n_coords=40, h=1e-4, seed=seed, stencil=4)

    def pipeline():
        return refiner_ensembler_check(seed)

    return [("subm_conv_k1", subm(1)), ("subm_conv_k3", subm(3)), ("strided_conv", strided),
            ("inverse_conv", inverse), ("batch_norm", bn), ("relu", relu), ("linear", linear),
            ("conv_bn", convbn), ("basic_block", block), ("gated_ensembler", ensembler),
            ("refiner_ensembler", pipeline)]


def refiner_ensembler_check(seed: int, channels=(4, 8), classes: int = 3) -> GradCheckReport:
    """2-stage refiner feeding the gated ensembler, checked end to end."""
    rng = np.random.default_rng(seed)
    net = build_refiner(RefinerConfig(channels=channels, num_classes=classes), seed, np.float64)
    ens = GatedEnsembler(classes, hidden=8, seed=seed, dtype=np.float64, fuse_init_scale=1.0)
    x = _sparse_input(rng, 3, min_sites=16)
    feats = x.features.copy()
    y1 = rng.standard_normal((len(x), classes))

    class Joint(Layer):
        def __init__(self):
            self.net, self.ens = net, ens

    def forward():
        y2 = net.forward(x.replace(feats)).features
        return ens.forward(y1, y2)

    def backward(g):
        dy1, dy2 = ens.backward(g)
        return [net.backward(dy2), dy1]

    return grad_check(Joint(), forward, backward, [feats, y1], GRAD_TOL, n_coords=60, h=1e-4,
                      seed=seed, stencil=4)


def grad_suite(instances: int = 20, seed: int = 0) -> dict:
    results = {}
    for i in range(instances):
        for name, run in grad_cases(seed + i):
            r = run()
            prev = results.get(name)
            if prev is None or r.max_rel_error > prev["max_rel_error"] or not r.passed:
                results[name] = {"max_rel_error": r.max_rel_error, "passed": r.passed and
                                 (prev is None or prev["passed"]), "worst": r.worst}
    return {"suite": "grad", "instances": instances, "cases": results,
            "passed": all(v["passed"] for v in results.values())}


def coord_case(rng, channels=DESK6, size=48):
    """Encoder and decoder sites of every level must be the same objects/sets."""
    mask = random_mask(rng, size, size, float(rng.uniform(0.02, 0.6)))
    net = build_refiner(RefinerConfig(channels=channels, num_classes=3), int(rng.integers(1 << 30)))
    x = dense_to_sparse(rng.standard_normal((3, size, size)).astype(np.float32), mask)
    out = net.forward(x)
    ok = out.cset.same_sites(x.cset)
    for enc, dec in zip(net.stage_sites, net.decoder_sites):
        ok = ok and enc.same_sites(dec)
    return bool(ok)


def coords_suite(cases: int = 50, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    results = [coord_case(rng) for _ in range(cases)]
    return {"suite": "coords", "cases": cases, "failures": results.count(False),
            "passed": all(results)}


SUITES = {"conv": conv_suite, "grad": grad_suite, "coords": coords_suite}
