"""SRCK checkpoint container: JSON config plus named SRT1 tensor records.

Layout (little endian): magic ``SRCK``, u16 version, u32 JSON byte length,
UTF-8 JSON, u32 tensor count, then per tensor a u16 name length, the UTF-8
name and one SRT1 record.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .tensor import FormatError, decode_tensor, encode_tensor

MAGIC = b"SRCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_checkpoint(config: dict, tensors: dict[str, np.ndarray]) -> bytes:
    cfg = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(cfg)), cfg, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(encode_tensor(tensors[name]))
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    buf = memoryview(buf)
    if len(buf) < 10 or bytes(buf[:4]) != MAGIC:
        raise CheckpointError("not an SRCK checkpoint")
    version, n_cfg = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    pos = 10
    try:
        config = json.loads(bytes(buf[pos:pos + n_cfg]).decode("utf-8"))
        pos += n_cfg
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            name = bytes(buf[pos + 2:pos + 2 + n]).decode("utf-8")
            arr, pos = decode_tensor(buf, pos + 2 + n)
            if name in tensors:
                raise CheckpointError(f"duplicate tensor {name!r}")
            tensors[name] = arr
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, FormatError) as e:
        raise CheckpointError(f"corrupt checkpoint: {e}") from e
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes")
    return config, tensors


def save_checkpoint(path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_checkpoint(config, tensors))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode_checkpoint(Path(path).read_bytes())


def prefixed_state(layer, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in layer.state_dict().items()}


def load_layer(layer, tensors: dict[str, np.ndarray], prefix: str) -> None:
    """Copy ``prefix.*`` tensors into ``layer``, checking names and dims first."""
    expected = layer.state_dict()
    state = {}
    for name, cur in expected.items():
        key = f"{prefix}.{name}"
        if key not in tensors:
            raise CheckpointError(f"missing tensor {key!r}")
        t = tensors[key]
        if t.shape != cur.shape:
            raise CheckpointError(f"dim mismatch for {key!r}: checkpoint {t.shape}, model {cur.shape}")
        state[name] = t
    extra = sorted(k for k in tensors if k.startswith(prefix + ".") and k[len(prefix) + 1:] not in expected)
    if extra:
        raise CheckpointError(f"unexpected tensor {extra[0]!r}")
    layer.load_state_dict(state)
