"""Binary named-tensor checkpoints.

Layout (all integers little-endian)::

    b"SBRS" | version u32 | count u32 |
    count x ( name_len u16 | name utf-8 | dtype u8 (0=f32, 1=f64) | ndim u8 |
              dims u32[ndim] | raw little-endian values )

Optimizer and RNG state ride in the same table under the reserved prefixes
``opt/`` and ``rng/``; ``cfg/`` holds a UTF-8 JSON config echo stored as
float64 byte values.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"SBRS"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def decode(raw: bytes) -> dict[str, np.ndarray]:
    if raw[:4] != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    if len(raw) < 12:
        raise CheckpointError("truncated checkpoint header")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos : pos + nlen].decode("utf-8")
            pos += nlen
            code, ndim = struct.unpack_from("<BB", raw, pos)
            pos += 2
            dims = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            dt = _DTYPES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(raw):
                raise CheckpointError(f"truncated tensor {name!r}")
            out[name] = np.frombuffer(raw, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims).copy()
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    return out


def save_tensors(tensors: Mapping[str, np.ndarray], path) -> None:
    Path(path).write_bytes(encode(tensors))


def load_tensors(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


# -- RNG and config helpers ---------------------------------------------------

_CHUNK = 1 << 32


def _split128(v: int) -> list[float]:
    return [float((v >> (32 * k)) & (_CHUNK - 1)) for k in range(4)]


def _join128(chunks) -> int:
    return sum(int(c) << (32 * k) for k, c in enumerate(chunks))


def rng_to_array(rng: np.random.Generator) -> np.ndarray:
    """PCG64 state as exact float64 32-bit chunks."""
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise CheckpointError("only PCG64 generators can be checkpointed")
    inner = st["state"]
    vals = _split128(inner["state"]) + _split128(inner["inc"])
    vals += [float(st["has_uint32"]), float(st["uinteger"])]
    return np.array(vals, dtype=np.float64)


def rng_from_array(arr: np.ndarray) -> np.random.Generator:
    arr = np.asarray(arr)
    bg = np.random.PCG64()
    bg.state = {
        "bit_generator": "PCG64",
        "state": {"state": _join128(arr[:4]), "inc": _join128(arr[4:8])},
        "has_uint32": int(arr[8]),
        "uinteger": int(arr[9]),
    }
    return np.random.Generator(bg)


def text_to_array(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def array_to_text(arr: np.ndarray) -> str:
    return np.asarray(arr).astype(np.uint8).tobytes().decode("utf-8")


def config_to_array(cfg: dict) -> np.ndarray:
    return text_to_array(json.dumps(cfg, sort_keys=True))


def config_from_array(arr: np.ndarray) -> dict:
    return json.loads(array_to_text(arr))
