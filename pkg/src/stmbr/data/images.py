"""Binary PGM/PPM output (and PGM input for on-disk datasets)."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def write_mask_pgm(mask: np.ndarray, path) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2 or not np.isin(mask, (0, 1)).all():
        raise ValueError("mask must be a 2-D binary array")
    h, w = mask.shape
    body = (mask.astype(np.uint8) * 255).tobytes()
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + body)


def write_image_pgm(image: np.ndarray, path) -> None:
    """Grayscale image in [0, 1] as 8-bit PGM."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    body = np.rint(np.clip(image, 0, 1) * 255).astype(np.uint8).tobytes()
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + body)


def overlay_rgb(image: np.ndarray, mask: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Gray image with red blended at ``alpha`` over foreground; uint8 (H, W, 3)."""
    gray = np.clip(np.asarray(image, dtype=np.float64), 0, 1)
    rgb = np.repeat(gray[..., None], 3, axis=-1)
    red = np.array([1.0, 0.0, 0.0])
    fg = np.asarray(mask).astype(bool)
    rgb[fg] = (1 - alpha) * rgb[fg] + alpha * red
    return np.rint(rgb * 255).astype(np.uint8)


def write_overlay_ppm(image: np.ndarray, mask: np.ndarray, path) -> None:
    image = np.asarray(image)
    if image.min() < 0 or image.max() > 1:
        raise ValueError("image must lie in [0, 1]")
    rgb = overlay_rgb(image, mask)
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes())


def _tokens(raw: bytes, count: int) -> tuple[list[bytes], int]:
    out, i = [], 0
    while len(out) < count:
        while raw[i : i + 1].isspace():
            i += 1
        if raw[i : i + 1] == b"#":
            while raw[i : i + 1] not in (b"\n", b""):
                i += 1
            continue
        j = i
        while not raw[j : j + 1].isspace():
            j += 1
        out.append(raw[i:j])
        i = j
    return out, i + 1  # single whitespace byte precedes the raster


def read_pgm(path) -> np.ndarray:
    """Binary (P5) 8-bit PGM as a float array in [0, 1]."""
    raw = Path(path).read_bytes()
    (magic, w, h, maxval), start = _tokens(raw, 4)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval > 255:
        raise ValueError(f"{path}: 16-bit PGM not supported")
    body = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=start)
    return body.reshape(h, w).astype(np.float64) / maxval
