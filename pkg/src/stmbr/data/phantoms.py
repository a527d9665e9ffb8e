"""Synthetic CT-like lung slices with exact lesion masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    count: int = 200
    size: int = 64
    infected_fraction: float = 0.5
    lesion_count: tuple[int, int] = (1, 4)
    lesion_intensity: tuple[float, float] = (0.45, 0.75)
    lung_intensity: tuple[float, float] = (0.05, 0.25)
    noise_sigma: float = 0.03
    min_foreground: float = 0.01
    max_foreground: float = 0.40


@dataclass
class Sample:
    id: str
    image: np.ndarray  # (H, W) in [0, 1]
    label: int  # 1 infected, 0 healthy
    mask: np.ndarray  # (H, W) uint8 {0, 1}


class SampleSet(list):
    """List of :class:`Sample` with stacking helpers."""

    def images(self, dtype=np.float32) -> np.ndarray:
        return np.stack([s.image for s in self]).astype(dtype)[:, None]

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self], dtype=np.int64)

    def masks(self) -> np.ndarray:
        return np.stack([s.mask for s in self]).astype(np.int64)

    def infected(self) -> "SampleSet":
        return SampleSet(s for s in self if s.label == 1)


def _ellipse_radius(yy, xx, cy, cx, ry, rx, angle):
    """Normalised elliptical radius (1 on the boundary)."""
    ca, sa = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = (dx * ca + dy * sa) / rx
    v = (-dx * sa + dy * ca) / ry
    return np.sqrt(u * u + v * v)


def _lungs(rng, size, yy, xx):
    s = size
    lung = np.zeros((s, s), dtype=bool)
    for side in (-1, 1):
        cx = s / 2 + side * s * rng.uniform(0.19, 0.23)
        cy = s / 2 + s * rng.uniform(-0.03, 0.03)
        rx = s * rng.uniform(0.14, 0.18)
        ry = s * rng.uniform(0.30, 0.36)
        lung |= _ellipse_radius(yy, xx, cy, cx, ry, rx, side * rng.uniform(0.0, 0.15)) <= 1.0
    return lung


def _lesions(rng, spec: PhantomSpec, yy, xx, lung):
    """Soft lesion profile and binary mask; the mask is the half-intensity contour."""
    s = spec.size
    k = rng.integers(spec.lesion_count[0], spec.lesion_count[1] + 1)
    profile = np.zeros((s, s))
    ly, lx = np.nonzero(lung)
    for _ in range(k):
        at = rng.integers(len(ly))
        r = _ellipse_radius(
            yy, xx, ly[at], lx[at], s * rng.uniform(0.05, 0.13), s * rng.uniform(0.05, 0.13), rng.uniform(0, np.pi)
        )
        # 1 inside, 0.5 exactly on the boundary, smooth decay outside
        soft = np.where(r <= 1.0, 0.5 + 0.5 * np.clip((1.0 - r) / 0.25, 0.0, 1.0), 0.5 * np.exp(-(r - 1.0) / 0.06))
        profile = np.maximum(profile, soft)
    profile *= lung
    mask = (profile >= 0.5).astype(np.uint8)
    return profile, mask


def make_phantom(rng: np.random.Generator, spec: PhantomSpec, infected: bool):
    s = spec.size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    yy += 0.5
    xx += 0.5
    lung = _lungs(rng, s, yy, xx)
    lung_level = rng.uniform(*spec.lung_intensity)
    img = np.where(lung, lung_level, 0.0)
    mask = np.zeros((s, s), dtype=np.uint8)
    if infected:
        lo, hi = spec.min_foreground * s * s, spec.max_foreground * s * s
        while True:
            profile, mask = _lesions(rng, spec, yy, xx, lung)
            if lo <= mask.sum() <= hi:
                break
        lesion_level = rng.uniform(*spec.lesion_intensity)
        img = img + profile * (lesion_level - lung_level)
    img = img + rng.normal(0.0, spec.noise_sigma, size=(s, s))
    return np.clip(img, 0.0, 1.0), mask


def gen_phantoms(spec: PhantomSpec) -> SampleSet:
    """Deterministic set of ``spec.count`` phantoms; ``round(count * infected_fraction)`` infected."""
    if spec.size < 32:
        raise ValueError("phantom size must be at least 32 to hold two lungs")
    if not 0 <= spec.infected_fraction <= 1:
        raise ValueError("infected_fraction must lie in [0, 1]")
    rng = np.random.default_rng(spec.seed)
    n_inf = int(round(spec.count * spec.infected_fraction))
    flags = np.zeros(spec.count, dtype=bool)
    flags[:n_inf] = True
    rng.shuffle(flags)
    out = SampleSet()
    for i, inf in enumerate(flags):
        img, mask = make_phantom(rng, spec, bool(inf))
        out.append(Sample(id=f"p{spec.seed}_{i:05d}", image=img, label=int(inf), mask=mask))
    return out
