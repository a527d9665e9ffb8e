"""Minimal NIfTI-1 reader (single-file .nii, header/image pairs, optional gzip)."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# datatype code -> numpy base type
DTYPES = {2: "u1", 4: "i2", 16: "f4"}
HEADER_SIZE = 348


class NiftiError(ValueError):
    pass


@dataclass
class VolumeMeta:
    dims: tuple[int, ...]
    datatype: int
    spacing: tuple[float, ...]
    scl_slope: float
    scl_inter: float
    vox_offset: float
    endian: str  # "<" or ">"
    magic: bytes


def _read_bytes(path: Path, gz: bool) -> bytes:
    if path.suffix == ".gz":
        if not gz:
            raise NiftiError(f"{path}: gzip input disabled (pass gzip=True)")
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def parse_header(raw: bytes) -> VolumeMeta:
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"truncated header: {len(raw)} bytes")
    for endian in "<>":
        if struct.unpack(endian + "i", raw[:4])[0] == HEADER_SIZE:
            break
    else:
        raise NiftiError("sizeof_hdr is not 348 in either byte order")
    magic = raw[344:348]
    if magic not in (b"n+1\0", b"ni1\0"):
        raise NiftiError(f"bad magic {magic!r}")
    dim = struct.unpack(endian + "8h", raw[40:56])
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise NiftiError(f"invalid dim[0] = {ndim}")
    dims = tuple(int(d) for d in dim[1 : ndim + 1])
    if min(dims) < 1:
        raise NiftiError(f"non-positive dimension in {dims}")
    datatype = struct.unpack(endian + "h", raw[70:72])[0]
    if datatype not in DTYPES:
        raise NiftiError(f"unsupported datatype code {datatype}")
    pixdim = struct.unpack(endian + "8f", raw[76:108])
    vox_offset, slope, inter = struct.unpack(endian + "3f", raw[108:120])
    return VolumeMeta(
        dims=dims,
        datatype=datatype,
        spacing=tuple(float(p) for p in pixdim[1 : ndim + 1]),
        scl_slope=float(slope),
        scl_inter=float(inter),
        vox_offset=float(vox_offset),
        endian=endian,
        magic=magic,
    )


def read_volume(path, gzip: bool = True) -> tuple[VolumeMeta, np.ndarray]:
    """Raw (scaled) voxel array with axes reversed to (..., z, y, x)."""
    path = Path(path)
    raw = _read_bytes(path, gzip)
    meta = parse_header(raw)
    if meta.magic == b"ni1\0":
        img = path.with_suffix(".img")
        if not img.exists() and path.suffix == ".gz":
            img = Path(str(path)[: -len(".hdr.gz")] + ".img.gz")
        body = _read_bytes(img, gzip)
        offset = int(meta.vox_offset)
    else:
        body = raw
        # single-file data starts at vox_offset; tolerate headers written without the 4-byte extension flag
        offset = max(HEADER_SIZE, int(meta.vox_offset))
    dtype = np.dtype(meta.endian + DTYPES[meta.datatype])
    count = int(np.prod(meta.dims))
    need = offset + count * dtype.itemsize
    if len(body) < need:
        raise NiftiError(f"truncated image data: need {need} bytes, file has {len(body)}")
    vox = np.frombuffer(body, dtype=dtype, count=count, offset=offset).astype(np.float64)
    if meta.scl_slope != 0:
        vox = vox * meta.scl_slope + meta.scl_inter
    # NIfTI stores x fastest: C-order reshape over reversed dims gives (..., z, y, x)
    return meta, vox.reshape(meta.dims[::-1])


def read_nifti(path, gzip: bool = True) -> tuple[VolumeMeta, np.ndarray]:
    """Slices of a volume as an (S, 1, Y, X) array min-max normalised to [0, 1].

    Every axis beyond the first two is folded into the slice axis.
    """
    meta, vol = read_volume(path, gzip=gzip)
    if len(meta.dims) == 1:
        vol = vol.reshape(1, 1, -1)
    elif len(meta.dims) == 2:
        vol = vol.reshape((1,) + vol.shape)
    ny, nx = vol.shape[-2:]
    slices = vol.reshape(-1, ny, nx)
    lo, hi = slices.min(), slices.max()
    norm = (slices - lo) / (hi - lo) if hi > lo else np.zeros_like(slices)
    return meta, norm[:, None]


def write_nifti(path, data: np.ndarray, datatype: int = 4, endian: str = "<", spacing=None,
                scl_slope: float = 0.0, scl_inter: float = 0.0, vox_offset: float = 352.0,
                magic: bytes = b"n+1\0") -> None:
    """Write ``data`` given in (x, y, z, ...) order as a single-file NIfTI-1."""
    data = np.asarray(data)
    dims = data.shape
    dim = [len(dims)] + list(dims) + [1] * (7 - len(dims))
    pixdim = [1.0] + list(spacing or [1.0] * len(dims)) + [1.0] * (7 - len(dims))
    dtype = np.dtype(endian + DTYPES[datatype])
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into(endian + "i", hdr, 0, HEADER_SIZE)
    struct.pack_into(endian + "8h", hdr, 40, *dim)
    struct.pack_into(endian + "hh", hdr, 70, datatype, dtype.itemsize * 8)
    struct.pack_into(endian + "8f", hdr, 76, *pixdim)
    struct.pack_into(endian + "3f", hdr, 108, vox_offset, scl_slope, scl_inter)
    hdr[344:348] = magic
    pad = b"\0" * max(0, int(vox_offset) - HEADER_SIZE)
    body = np.asarray(data, dtype=dtype).tobytes(order="F")
    Path(path).write_bytes(bytes(hdr) + pad + body)
