"""Kernel maps: per-offset (input row, output row) pair lists."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coords import _FIELD_BITS, CoordinateError, CoordSet, pack

# packed keys shift by a constant per offset while y and x stay inside their fields
_Y_SHIFT = _FIELD_BITS
_LIMIT = 1 << (_FIELD_BITS - 1)


class UnsupportedConfig(ValueError):
    pass


DENSE_FILL = 0.5


@dataclass(frozen=True, eq=False)
class KernelMap:
    """Pairs grouped by kernel offset, each group sorted by output row.

    ``in_rows[k] is None`` marks an identity group (submanifold centre offset),
    meaning row ``i`` maps to row ``i`` for every row.
    """

    offsets: tuple
    in_rows: tuple
    out_rows: tuple
    n_in: int
    n_out: int

    def pairs(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        if self.in_rows[k] is None:
            r = np.arange(self.n_in)
            return r, r
        return self.in_rows[k], self.out_rows[k]

    def pair_counts(self) -> list[int]:
        return [self.n_in if i is None else int(i.size) for i in self.in_rows]

    @property
    def total_pairs(self) -> int:
        return sum(self.pair_counts())

    @property
    def fill(self) -> float:
        """Fraction of (output row, offset) slots that carry a pair."""
        slots = self.n_out * len(self.offsets)
        return self.total_pairs / slots if slots else 0.0

    @property
    def dense(self) -> bool:
        return self.fill >= DENSE_FILL

    def neighbor_table(self) -> np.ndarray:
        """``(n_out, K)`` input row per slot; ``n_in`` marks an empty slot."""
        t = self.__dict__.get("_nt")
        if t is None:
            t = np.full((self.n_out, len(self.offsets)), self.n_in, dtype=np.int64)
            for k in range(len(self.offsets)):
                i, o = self.pairs(k)
                t[o, k] = i
            object.__setattr__(self, "_nt", t)
        return t

    def reverse_table(self) -> np.ndarray:
        """``(n_in, K)`` output row per slot; ``n_out`` marks an empty slot.

        Relies on every input row appearing at most once per offset, which
        holds for submanifold and strided maps.
        """
        t = self.__dict__.get("_rt")
        if t is None:
            t = np.full((self.n_in, len(self.offsets)), self.n_out, dtype=np.int64)
            for k in range(len(self.offsets)):
                i, o = self.pairs(k)
                t[i, k] = o
            object.__setattr__(self, "_rt", t)
        return t

    def transpose(self) -> "KernelMap":
        """Swap pair roles, re-sorting every group by its new output row."""
        ins, outs = [], []
        for k in range(len(self.offsets)):
            i, o = self.pairs(k)
            order = np.argsort(i, kind="stable")
            ins.append(o[order])
            outs.append(i[order])
        return KernelMap(self.offsets, tuple(ins), tuple(outs), self.n_out, self.n_in)


def kernel_offsets(kernel_size: int, stride: int) -> list[tuple[int, int]]:
    if stride == 1:
        r = kernel_size // 2
        rng = range(-r, r + 1)
    else:
        rng = range(kernel_size)
    return [(dy, dx) for dy in rng for dx in rng]


def build_kernel_map(in_set: CoordSet, out_set: CoordSet, kernel_size: int,
                     stride: int = 1, dilation: int = 1) -> KernelMap:
    """Pairs ``(i, j)`` with ``coord(i) = coord(j) + offset * dilation * in_stride``.

    Stride 1 is submanifold (odd kernel, output sites = input sites). For
    ``stride > 1`` the kernel spans ``[0, K)`` offsets from each output site,
    the usual downsampling correspondence.
    """
    if kernel_size < 1:
        raise UnsupportedConfig("kernel size must be >= 1")
    if stride == 1 and kernel_size % 2 == 0:
        raise UnsupportedConfig(f"even kernel {kernel_size} with stride 1")
    if stride > 1 and out_set.stride != in_set.stride * stride:
        raise UnsupportedConfig("output stride must equal input stride times conv stride")
    step = dilation * in_set.stride
    out_c = out_set.coords
    offsets = kernel_offsets(kernel_size, stride)
    identity_ok = stride == 1 and out_set is in_set
    # one batched hash lookup for every non-identity offset
    probe = [k for k, (dy, dx) in enumerate(offsets) if not (identity_ok and dy == 0 and dx == 0)]
    n = len(out_c)
    found = np.empty((0, n), np.int64)
    if probe and n:
        reach = max(abs(v) for k in probe for v in offsets[k]) * step
        if np.abs(out_c[:, 1:]).max() + reach >= _LIMIT:
            raise CoordinateError("coordinate outside the packable range")
        base = out_set.keys if out_set.keys is not None else pack(out_c)
        shift = np.array([(offsets[k][0] * step << _Y_SHIFT) + offsets[k][1] * step for k in probe],
                         dtype=np.int64)
        found = in_set.index.lookup((base[None, :] + shift[:, None]).reshape(-1)).reshape(len(probe), n)
    ins, outs = [None] * len(offsets), [None] * len(offsets)
    for j, k in enumerate(probe):
        rows = found[j] if n else np.empty(0, np.int64)
        hit = np.flatnonzero(rows >= 0)
        ins[k] = rows[hit]
        outs[k] = hit
    return KernelMap(tuple(offsets), tuple(ins), tuple(outs), len(in_set), len(out_set))


def submanifold_map(x_set: CoordSet, kernel_size: int, manager=None, dilation: int = 1) -> KernelMap:
    key = ("subm", x_set.stride, kernel_size, dilation)
    if manager is not None and manager.levels.get(x_set.stride) is x_set:
        km = manager.kernel_maps.get(key)
        if km is None:
            km = manager.kernel_maps[key] = build_kernel_map(x_set, x_set, kernel_size, 1, dilation)
        return km
    return build_kernel_map(x_set, x_set, kernel_size, 1, dilation)
