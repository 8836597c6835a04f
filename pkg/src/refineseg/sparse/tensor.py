from __future__ import annotations

import numpy as np

from .coords import CoordinateError, CoordinateManager, CoordSet, pack, unpack


class AlignmentError(ValueError):
    pass


class SparseTensor:
    """Feature rows attached to an ordered set of active ``(b, y, x)`` sites."""

    __slots__ = ("features", "cset", "manager")

    def __init__(self, features, cset: CoordSet, manager: CoordinateManager | None = None):
        features = np.asarray(features)
        if features.ndim != 2 or features.shape[0] != len(cset):
            raise ValueError(
                f"feature rows {features.shape} do not match {len(cset)} coordinates")
        self.features = features
        self.cset = cset
        if manager is None:
            manager = CoordinateManager()
            manager.register(cset)
        self.manager = manager

    @property
    def coords(self) -> np.ndarray:
        return self.cset.coords

    @property
    def stride(self) -> int:
        return self.cset.stride

    @property
    def dtype(self):
        return self.features.dtype

    def __len__(self):
        return len(self.cset)

    @property
    def num_channels(self) -> int:
        return self.features.shape[1]

    def replace(self, features) -> "SparseTensor":
        """Same sites, same manager, new feature rows."""
        return SparseTensor(features, self.cset, self.manager)

    def __repr__(self):
        return f"SparseTensor(N={len(self)}, C={self.num_channels}, stride={self.stride})"


def from_coords(coords, features, stride: int = 1) -> SparseTensor:
    return SparseTensor(features, CoordSet(coords, stride))


def mask_coords(mask, batch: int = 0) -> np.ndarray:
    """Row-major ``(b, y, x)`` coordinates of the true entries of a 2-D mask."""
    ys, xs = np.nonzero(np.asarray(mask, dtype=bool))
    out = np.empty((ys.size, 3), dtype=np.int64)
    out[:, 0] = batch
    out[:, 1] = ys
    out[:, 2] = xs
    return out


def dense_to_sparse(dense, mask, batch: int = 0) -> SparseTensor:
    """Gather the channel vectors of a ``(C, H, W)`` array at the selected pixels."""
    dense = np.asarray(dense)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != dense.shape[1:]:
        raise ValueError(f"mask {mask.shape} does not match spatial dims {dense.shape[1:]}")
    coords = mask_coords(mask, batch)
    feats = np.ascontiguousarray(dense[:, coords[:, 1], coords[:, 2]].T)
    return SparseTensor(feats, CoordSet(coords, 1))


def batch_dense_to_sparse(denses, masks) -> SparseTensor:
    """Stack several images into one stride-1 tensor using the batch coordinate."""
    coords, feats = [], []
    for b, (d, m) in enumerate(zip(denses, masks)):
        m = np.asarray(m, dtype=bool)
        c = mask_coords(m, b)
        coords.append(c)
        feats.append(np.asarray(d)[:, c[:, 1], c[:, 2]].T)
    c = np.concatenate(coords) if coords else np.zeros((0, 3), np.int64)
    f = np.concatenate(feats) if feats else np.zeros((0, 0))
    return SparseTensor(np.ascontiguousarray(f), CoordSet(c, 1))


def sparse_to_dense(x: SparseTensor, height: int, width: int, fill=0, batch: int = 0) -> np.ndarray:
    """Scatter the rows of batch element ``batch`` into a ``(C, H, W)`` array."""
    c = x.coords
    sel = c[:, 0] == batch
    ys, xs = c[sel, 1], c[sel, 2]
    if ys.size and (ys.min() < 0 or xs.min() < 0 or ys.max() >= height or xs.max() >= width):
        raise IndexError(f"coordinate outside {height}x{width}")
    out = np.full((x.num_channels, height, width), fill, dtype=x.dtype)
    out[:, ys, xs] = x.features[sel].T
    return out


def downsample_coords(cset: CoordSet, factor: int = 2) -> CoordSet:
    """Unique floor-quantized parents at ``factor`` times the stride, in key order."""
    s = cset.stride * factor
    c = cset.coords.copy()
    c[:, 1] = np.floor_divide(c[:, 1], s) * s
    c[:, 2] = np.floor_divide(c[:, 2], s) * s
    keys = np.unique(pack(c))
    return CoordSet(unpack(keys), s, keys=keys)


__all__ = [
    "AlignmentError", "CoordinateError", "SparseTensor", "from_coords", "mask_coords",
    "dense_to_sparse", "batch_dense_to_sparse", "sparse_to_dense", "downsample_coords",
]
