"""Coordinate packing and an open-addressing hash index over ``(b, y, x)`` rows."""

from __future__ import annotations

import numpy as np

_FIELD_BITS = 21
_OFFSET = 1 << (_FIELD_BITS - 1)
_FIELD_MASK = (1 << _FIELD_BITS) - 1
_EMPTY = -1


class CoordinateError(ValueError):
    pass


def pack(coords) -> np.ndarray:
    """Pack ``(N, 3)`` integer ``(b, y, x)`` rows into sortable int64 keys.

    Key order equals lexicographic ``(b, y, x)`` order.
    """
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    b, y, x = c[:, 0], c[:, 1] + _OFFSET, c[:, 2] + _OFFSET
    if c.size and (b.min() < 0 or b.max() > _FIELD_MASK or y.min() < 0
                   or y.max() > _FIELD_MASK or x.min() < 0 or x.max() > _FIELD_MASK):
        raise CoordinateError("coordinate outside the packable range")
    return (b << (2 * _FIELD_BITS)) | (y << _FIELD_BITS) | x


def unpack(keys) -> np.ndarray:
    k = np.asarray(keys, dtype=np.int64)
    out = np.empty((k.size, 3), dtype=np.int64)
    out[:, 0] = k >> (2 * _FIELD_BITS)
    out[:, 1] = ((k >> _FIELD_BITS) & _FIELD_MASK) - _OFFSET
    out[:, 2] = (k & _FIELD_MASK) - _OFFSET
    return out


def mix64(keys) -> np.ndarray:
    # splitmix64 finalizer; uint64 arithmetic wraps
    z = np.asarray(keys, dtype=np.int64).view(np.uint64).copy()
    z ^= z >> np.uint64(30)
    z *= np.uint64(0xBF58476D1CE4E5B9)
    z ^= z >> np.uint64(27)
    z *= np.uint64(0x94D049BB133111EB)
    z ^= z >> np.uint64(31)
    return z


class CoordIndex:
    """Maps packed coordinate keys to row numbers.

    Linear probing over a power-of-two table kept at most half full. Insertion
    and lookup are vectorized: each round resolves every pending key whose
    probe slot is decided, then advances the rest by one slot.
    """

    def __init__(self, keys):
        keys = np.asarray(keys, dtype=np.int64)
        self.size = int(keys.size)
        cap = 16
        while cap < 2 * self.size:
            cap *= 2
        self.mask = np.uint64(cap - 1)
        self.table_keys = np.full(cap, _EMPTY, dtype=np.int64)
        self.table_rows = np.full(cap, -1, dtype=np.int64)
        self._insert(keys)

    def _slots(self, keys):
        return (mix64(keys) & self.mask).astype(np.int64)

    def _insert(self, keys):
        uniq, counts = np.unique(keys, return_counts=True)
        if uniq.size != keys.size:
            dup = uniq[counts > 1][0]
            raise CoordinateError(f"duplicate coordinate {tuple(unpack([dup])[0])}")
        pending = np.arange(keys.size)
        slot = self._slots(keys)
        cap_mask = int(self.mask)
        while pending.size:
            s = slot[pending]
            free = self.table_keys[s] == _EMPTY
            cand, cs = pending[free], s[free]
            if cand.size:
                # lowest pending row claims a contested slot
                claimed, first = np.unique(cs, return_index=True)
                winners = cand[first]
                self.table_keys[claimed] = keys[winners]
                self.table_rows[claimed] = winners
                placed = np.zeros(keys.size, dtype=bool)
                placed[winners] = True
                pending = pending[~placed[pending]]
            # every remaining key now sees an occupied slot
            slot[pending] = (slot[pending] + 1) & cap_mask

    def lookup(self, keys) -> np.ndarray:
        """Row of each query key, or -1 where absent."""
        keys = np.asarray(keys, dtype=np.int64)
        out = np.full(keys.size, -1, dtype=np.int64)
        if self.size == 0 or keys.size == 0:
            return out
        slot = self._slots(keys)
        k = self.table_keys[slot]
        hit = k == keys
        out[hit] = self.table_rows[slot[hit]]
        active = np.flatnonzero(~hit & (k != _EMPTY))
        cap_mask = int(self.mask)
        slot[active] = (slot[active] + 1) & cap_mask
        while active.size:
            s = slot[active]
            k = self.table_keys[s]
            hit = k == keys[active]
            out[active[hit]] = self.table_rows[s[hit]]
            active = active[~hit & (k != _EMPTY)]
            slot[active] = (slot[active] + 1) & cap_mask
        return out


class CoordSet:
    """Immutable, ordered set of active sites at one tensor stride.

    Shared by identity between every sparse tensor living on the same sites.
    """

    __slots__ = ("coords", "keys", "stride", "_index")

    def __init__(self, coords, stride: int = 1, keys=None):
        coords = np.ascontiguousarray(coords, dtype=np.int64).reshape(-1, 3)
        if stride < 1:
            raise CoordinateError("stride must be >= 1")
        if coords.size and (np.any(coords[:, 1] % stride) or np.any(coords[:, 2] % stride)):
            raise CoordinateError(f"coordinates are not multiples of stride {stride}")
        coords.setflags(write=False)
        self.coords = coords
        self.keys = pack(coords) if keys is None else keys
        self.stride = stride
        self._index = None

    def __len__(self):
        return self.coords.shape[0]

    @property
    def index(self) -> CoordIndex:
        if self._index is None:
            self._index = CoordIndex(self.keys)
        return self._index

    def same_sites(self, other: "CoordSet") -> bool:
        return self is other or (self.stride == other.stride
                                 and np.array_equal(self.keys, other.keys))


class CoordinateManager:
    """Per-stride cache of coordinate sets and kernel maps for one pipeline run.

    Not safe for concurrent mutation.
    """

    def __init__(self):
        self.levels: dict[int, CoordSet] = {}
        self.kernel_maps: dict[tuple, object] = {}

    def register(self, cset: CoordSet) -> CoordSet:
        cached = self.levels.get(cset.stride)
        if cached is None:
            self.levels[cset.stride] = cset
            return cset
        if not cached.same_sites(cset):
            raise CoordinateError(f"stride {cset.stride} already holds a different coordinate set")
        return cached

    def get(self, stride: int) -> CoordSet:
        try:
            return self.levels[stride]
        except KeyError:
            raise CoordinateError(f"no coordinate set cached at stride {stride}") from None
