"""Central finite-difference verification of analytic gradients (float64)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor import NumericError
from .layers import Layer, ReLU


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped_kinks: int
    tolerance: float
    worst: str = ""

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error < self.tolerance


def _relu_pattern(module: Layer):
    return [m.mask.copy() for m in module.modules() if isinstance(m, ReLU) and m.mask is not None]


def _same_pattern(a, b):
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(module: Layer, forward, backward, inputs, tolerance: float, n_coords: int = 50,
               h: float = 1e-5, seed: int = 0, floor: float = 1e-3,
               stencil: int = 2) -> GradCheckReport:
    """Compare analytic and central-difference gradients of ``sum(R * forward())``.

    ``forward()`` evaluates the network on ``inputs`` (float64 arrays that are
    perturbed in place) and returns one output array. ``backward(grad)``
    returns the gradients of ``inputs`` in order; parameter gradients are read
    from ``module``. Every parameter tensor and input gets at least one sampled
    coordinate. Coordinates whose perturbation flips a ReLU are resampled,
    since the loss is not differentiable across that kink.

    ``stencil=2`` is the plain central difference; ``stencil=4`` the
    five-point central formula, whose smaller truncation error allows a larger
    ``h`` and so less rounding noise on deep networks.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``: below ``floor`` the
    check becomes absolute, since a true gradient of exactly zero (a bias ahead
    of batch norm) has no meaningful relative error.
    """
    if stencil not in (2, 4):
        raise ValueError("stencil must be 2 or 4")
    rng = np.random.default_rng(seed)
    params = [(name, p) for name, p in module.named_parameters()]
    for _, p in params:
        if p.value.dtype != np.float64:
            raise TypeError("gradient checks run in float64")
    module.zero_grad()
    out = forward()
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite forward output")
    proj = rng.standard_normal(out.shape)
    base_pattern = _relu_pattern(module)
    in_grads = backward(proj.copy())
    targets = [(name, p.value, p.grad.copy()) for name, p in params]
    targets += [(f"input{i}", x, g) for i, (x, g) in enumerate(zip(inputs, in_grads)) if x.size]
    targets = [t for t in targets if t[1].size]

    def loss():
        o = forward()
        if not np.all(np.isfinite(o)):
            raise NumericError("non-finite forward output")
        return o

    n = max(n_coords, len(targets))
    checked = skipped = 0
    worst, worst_name = 0.0, ""
    attempts = 0
    while checked < n and attempts < 20 * n:
        name, value, grad = targets[attempts % len(targets)]
        attempts += 1
        flat = value.reshape(-1)
        idx = int(rng.integers(flat.size))
        old = flat[idx]
        steps = (1, -1) if stencil == 2 else (1, -1, 2, -2)
        outs = {}
        kink = False
        for k in steps:
            flat[idx] = old + k * h
            outs[k] = loss()
            kink = kink or not _same_pattern(base_pattern, _relu_pattern(module))
        flat[idx] = old
        if kink:
            skipped += 1
            continue
        if stencil == 2:
            diff = (outs[1] - outs[-1]) / (2 * h)
        else:
            diff = (8 * (outs[1] - outs[-1]) - (outs[2] - outs[-2])) / (12 * h)
        numeric = float((diff * proj).sum())
        analytic = float(grad.reshape(-1)[idx])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        checked += 1
        if err > worst:
            worst, worst_name = err, f"{name}[{idx}] analytic={analytic:.6g} numeric={numeric:.6g}"
    # restore caches to the unperturbed state
    forward()
    return GradCheckReport(worst, checked, skipped, tolerance, worst_name)
