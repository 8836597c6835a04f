"""Dense tensors, label maps, the SRT1 binary format and PPM/PGM image I/O.

Dense tensors are plain numpy arrays restricted to four dtypes and one to four
dimensions. Label maps are ``uint8`` arrays of shape ``(H, W)`` where 255 marks
pixels to ignore.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

IGNORE = 255

MAGIC = b"SRT1"
DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i4"): 2,
    np.dtype("u1"): 3,
}
CODE_DTYPES = {code: dt for dt, code in DTYPE_CODES.items()}


class FormatError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def _check_dense(t):
    t = np.asarray(t)
    dt = t.dtype.newbyteorder("<") if t.dtype.byteorder == ">" else t.dtype
    if np.dtype(dt) not in DTYPE_CODES:
        raise TypeError(f"unsupported dtype {t.dtype}")
    if not 1 <= t.ndim <= 4:
        raise ValueError(f"tensors have 1 to 4 dims, got {t.ndim}")
    if 0 in t.shape:
        raise ValueError("every dim must be >= 1")
    return t


def encode_tensor(t) -> bytes:
    t = _check_dense(t)
    le = t.astype(t.dtype.newbyteorder("<"), copy=False)
    code = DTYPE_CODES[np.dtype(le.dtype)]
    header = MAGIC + struct.pack("<BBxx", code, t.ndim)
    dims = struct.pack(f"<{t.ndim}I", *t.shape)
    return header + dims + np.ascontiguousarray(le).tobytes()


def decode_tensor(buf, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one SRT1 record starting at ``offset``.

    Returns the array and the offset just past the record.
    """
    buf = memoryview(buf)
    if len(buf) - offset < 8:
        raise FormatError("truncated header")
    if bytes(buf[offset:offset + 4]) != MAGIC:
        raise FormatError("bad magic")
    code, ndim = struct.unpack_from("<BB", buf, offset + 4)
    if code not in CODE_DTYPES:
        raise FormatError(f"bad dtype code {code}")
    if not 1 <= ndim <= 4:
        raise FormatError(f"bad ndim {ndim}")
    pos = offset + 8
    if len(buf) - pos < 4 * ndim:
        raise FormatError("truncated dims")
    dims = struct.unpack_from(f"<{ndim}I", buf, pos)
    if any(d < 1 for d in dims):
        raise FormatError("zero extent")
    pos += 4 * ndim
    dtype = CODE_DTYPES[code]
    nbytes = int(np.prod(dims)) * dtype.itemsize
    if len(buf) - pos < nbytes:
        raise FormatError("truncated payload")
    arr = np.frombuffer(buf[pos:pos + nbytes], dtype=dtype).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=True), pos + nbytes


def tensor_write(t, path) -> None:
    Path(path).write_bytes(encode_tensor(t))


def tensor_read(path) -> np.ndarray:
    data = Path(path).read_bytes()
    arr, end = decode_tensor(data)
    if end != len(data):
        raise FormatError("trailing bytes after payload")
    return arr


# --- PPM / PGM -------------------------------------------------------------

def _read_netpbm(path, magic):
    data = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"truncated header in {path}")
        fields.append(data[start:pos])
    if fields[0] != magic:
        raise FormatError(f"{path}: expected {magic!r}, got {fields[0]!r}")
    width, height, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported")
    pos += 1
    return data[pos:], height, width


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 image as an ``(H, W, 3)`` uint8 array."""
    payload, h, w = _read_netpbm(path, b"P6")
    if len(payload) < h * w * 3:
        raise FormatError(f"{path}: truncated pixel data")
    return np.frombuffer(payload[:h * w * 3], np.uint8).reshape(h, w, 3).copy()


def read_pgm(path) -> np.ndarray:
    payload, h, w = _read_netpbm(path, b"P5")
    if len(payload) < h * w:
        raise FormatError(f"{path}: truncated pixel data")
    return np.frombuffer(payload[:h * w], np.uint8).reshape(h, w).copy()


def write_ppm(path, image) -> None:
    image = np.asarray(image, dtype=np.uint8)
    h, w, _ = image.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + image.tobytes())


def write_pgm(path, gray) -> None:
    gray = np.asarray(gray, dtype=np.uint8)
    h, w = gray.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + gray.tobytes())


# --- elementary dense ops ----------------------------------------------------

def nearest_upsample(t, factor: int) -> np.ndarray:
    """Repeat every element of the last two axes ``factor`` times."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    t = np.asarray(t)
    if factor == 1:
        return t.copy()
    return t.repeat(factor, axis=-2).repeat(factor, axis=-1)


def area_downsample(image, factor: int) -> np.ndarray:
    """Block-mean downsampling over the last two axes."""
    image = np.asarray(image)
    if factor < 1:
        raise ValueError("factor must be >= 1")
    h, w = image.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"spatial dims {h}x{w} not divisible by {factor}")
    if factor == 1:
        return image.copy()
    lead = image.shape[:-2]
    blocks = image.reshape(*lead, h // factor, factor, w // factor, factor)
    dt = image.dtype if np.issubdtype(image.dtype, np.floating) else np.float64
    return blocks.mean(axis=(-3, -1), dtype=dt).astype(dt, copy=False)


def softmax_channels(logits, axis: int = 0) -> np.ndarray:
    logits = np.asarray(logits)
    if np.isnan(logits).any():
        raise NumericError("NaN in logits")
    if not np.issubdtype(logits.dtype, np.floating):
        logits = logits.astype(np.float64)
    z = logits - logits.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    return z


def argmax_channels(logits, axis: int = 0) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. ties go to the lowest class
    return np.argmax(np.asarray(logits), axis=axis).astype(np.uint8)


def normalize_rgb(image, mean, std, dtype=np.float32) -> np.ndarray:
    """uint8 ``(H, W, 3)`` image to standardized ``(3, H, W)`` floats."""
    x = np.asarray(image, dtype=np.float64).transpose(2, 0, 1) / 255.0
    mean = np.asarray(mean, dtype=np.float64)[:, None, None]
    std = np.asarray(std, dtype=np.float64)[:, None, None]
    return ((x - mean) / std).astype(dtype)
