"""Binary checkpoint container.

Layout (all integers u32 little-endian)::

    b"RFRI" | version | n_tensors
    n_tensors x (name_len | utf-8 name | rank | rank x extent | float32 LE data)
    n_scalars x ... preceded by n_scalars: (name_len | utf-8 name | float64 LE value)
    crc32 of every preceding byte

The scalar section carries optimizer/schedule state; plain model files have
zero scalars. Masks are stored as tensors named ``mask:<target>``.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"RFRI"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(tensors: dict[str, np.ndarray], scalars: dict[str, float] | None = None) -> bytes:
    scalars = scalars or {}
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    out.append(struct.pack("<I", len(scalars)))
    for name, value in scalars.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw + struct.pack("<d", float(value)))
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, float]]:
    if len(blob) < 16:
        raise CheckpointError("checkpoint truncated")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}")
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch (corrupt or truncated checkpoint)")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    pos = 12
    tensors = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, pos)
            name = body[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", body, pos)
            shape = struct.unpack_from(f"<{rank}I", body, pos + 4)
            pos += 4 + 4 * rank
            size = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(body, dtype="<f4", count=size, offset=pos)
            tensors[name] = data.astype(np.float32).reshape(shape)
            pos += 4 * size
        (ns,) = struct.unpack_from("<I", body, pos)
        pos += 4
        scalars = {}
        for _ in range(ns):
            (n,) = struct.unpack_from("<I", body, pos)
            name = body[pos + 4:pos + 4 + n].decode("utf-8")
            (scalars[name],) = struct.unpack_from("<d", body, pos + 4 + n)
            pos += 12 + n
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"malformed checkpoint: {e}") from e
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes in checkpoint")
    return tensors, scalars


def write(path, tensors, scalars=None) -> None:
    Path(path).write_bytes(encode(tensors, scalars))


def read(path) -> tuple[dict[str, np.ndarray], dict[str, float]]:
    return decode(Path(path).read_bytes())


def save_model(model, path) -> None:
    tensors = dict(model.state_dict())
    tensors.update({f"mask:{k}": v for k, v in model.masks.items()})
    write(path, tensors)


def load_model(model, path):
    tensors, _ = read(path)
    restore_model(model, tensors)
    return model


def restore_model(model, tensors: dict[str, np.ndarray]) -> None:
    state = {k: v for k, v in tensors.items() if ":" not in k}
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"checkpoint does not fit model: {e}") from e
    model.masks = {k[5:]: v.astype(model.dtype) for k, v in tensors.items() if k.startswith("mask:")}
