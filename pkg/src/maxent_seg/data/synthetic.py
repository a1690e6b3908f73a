"""Seeded synthetic lesion images and a parametric intensity domain shift.

Randomness comes from numpy's PCG64 generator. Sample ``i`` of a dataset with
root seed ``s`` draws from its own substream ``SeedSequence([s, i])``, so
samples can be generated in any order (or in parallel) with identical results.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from maxent_seg.volume import BinaryMask, Volume


def substream(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in key])))


@dataclass(frozen=True)
class SynthConfig:
    dims: tuple[int, int, int] = (64, 64, 1)
    spacing: tuple[float, float, float] = (2.0, 2.0, 6.0)
    lesion_count: tuple[int, int] = (1, 6)
    lesion_radius: tuple[float, float] = (2.0, 8.0)
    radius_jitter: float = 0.2
    bg_mean: float = 0.25
    fg_mean: float = 0.75
    fg_jitter: float = 0.1
    noise_sigma: float = 0.08
    blur_sigma: float = 1.0
    seed: int = 0
    max_attempts: int = 500

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "lesion_count", tuple(int(c) for c in self.lesion_count))
        object.__setattr__(self, "lesion_radius", tuple(float(r) for r in self.lesion_radius))
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError("dims must be three positive integers")
        lo, hi = self.lesion_count
        if lo < 0 or hi < lo:
            raise ValueError("lesion_count must be a non-decreasing pair of non-negative integers")
        rlo, rhi = self.lesion_radius
        if rlo <= 0 or rhi < rlo:
            raise ValueError("lesion_radius must be a non-decreasing pair of positive reals")
        if not 0 <= self.radius_jitter < 1:
            raise ValueError("radius_jitter must lie in [0, 1)")
        if self.noise_sigma < 0 or self.blur_sigma < 0:
            raise ValueError("noise_sigma and blur_sigma must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class ShiftParams:
    gain: float = 1.0
    offset: float = 0.0
    gamma: float = 1.0
    noise_sigma: float = 0.0
    blur_sigma: float = 0.0

    def __post_init__(self):
        if not self.gain > 0 or not self.gamma > 0:
            raise ValueError("gain and gamma must be positive")
        if self.noise_sigma < 0 or self.blur_sigma < 0:
            raise ValueError("noise and blur must be non-negative")

    @property
    def is_identity(self) -> bool:
        return self == ShiftParams()

    def to_dict(self) -> dict:
        return asdict(self)


# The shipped out-of-distribution recipe; values are arbitrary but frozen.
OOD_PRESET = ShiftParams(gain=1.3, offset=0.1, gamma=0.8, noise_sigma=0.05, blur_sigma=0.0)


def _blur(arr: np.ndarray, sigma: float) -> np.ndarray:
    # single-voxel axes are left alone so 2D grids blur in-plane only
    sig = [sigma if n > 1 else 0.0 for n in arr.shape]
    return ndimage.gaussian_filter(arr, sigma=sig, mode="nearest")


def _lesion(dims, center, radii):
    grids = np.ogrid[tuple(slice(0, n) for n in dims)]
    r2 = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return r2 <= 1.0


def _place_lesions(cfg: SynthConfig, rng: np.random.Generator):
    """Non-touching ellipsoids (separate under 26-connectivity).

    Each scan draws one lesion scale from ``lesion_radius``; individual semi-axes
    vary around it by ``radius_jitter``, so lesion load tracks lesion size. A
    lesion that finds no free spot within ``max_attempts`` draws is dropped.
    """
    dims = cfg.dims
    rlo, rhi = cfg.lesion_radius
    active = [n > 1 for n in dims]
    for n, on in zip(dims, active):
        if on and 2 * rlo * (1 - cfg.radius_jitter) + 1 > n:
            raise ValueError(f"lesion radius {rlo} does not fit in a grid of extent {n}")
    count = int(rng.integers(cfg.lesion_count[0], cfg.lesion_count[1] + 1))
    scale = rng.uniform(rlo, rhi)
    mask = np.zeros(dims, dtype=bool)
    intensities = np.zeros(dims)
    halo = np.ones((3, 3, 3), dtype=bool)
    for _ in range(count):
        for _attempt in range(cfg.max_attempts):
            radii, center = [], []
            for n, on in zip(dims, active):
                if not on:
                    radii.append(0.5)
                    center.append(0.0)
                    continue
                r = scale * rng.uniform(1 - cfg.radius_jitter, 1 + cfg.radius_jitter)
                r = float(min(r, (n - 1) / 2.0))
                radii.append(r)
                center.append(rng.uniform(r, n - 1 - r))
            shape = _lesion(dims, center, radii)
            if shape.any() and not (ndimage.binary_dilation(shape, halo) & mask).any():
                break
        else:
            continue
        mask |= shape
        intensities[shape] = cfg.fg_mean + rng.uniform(-cfg.fg_jitter, cfg.fg_jitter)
    return mask, intensities


def synth_sample(cfg: SynthConfig, index: int) -> tuple[Volume, BinaryMask]:
    rng = substream(cfg.seed, index)
    mask, lesion_level = _place_lesions(cfg, rng)
    img = np.where(mask, lesion_level, cfg.bg_mean)
    if cfg.blur_sigma > 0:
        img = _blur(img, cfg.blur_sigma)
    if cfg.noise_sigma > 0:
        img = img + rng.normal(0.0, cfg.noise_sigma, size=img.shape)
    return Volume(img, cfg.spacing), BinaryMask(mask, cfg.spacing)


def synth_generate(cfg: SynthConfig, n: int, start: int = 0) -> list[tuple[Volume, BinaryMask]]:
    """``n`` samples with indices ``start .. start + n - 1``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return [synth_sample(cfg, start + i) for i in range(n)]


def apply_domain_shift(v: Volume, s: ShiftParams, seed=0) -> Volume:
    """``gain * clip(v, 0, 1) ** gamma + offset`` plus optional blur and noise.

    Clipping only happens when ``gamma != 1`` so the identity shift returns
    the input unchanged. ``seed`` is an int or a tuple of ints naming the
    noise substream.
    """
    if s.is_identity:
        return v
    out = v.data
    if s.blur_sigma > 0:
        out = _blur(out, s.blur_sigma)
    if s.gamma != 1.0:
        out = np.clip(out, 0.0, 1.0) ** s.gamma
    out = s.gain * out + s.offset
    if s.noise_sigma > 0:
        key = seed if isinstance(seed, (tuple, list)) else (seed,)
        out = out + substream(*key).normal(0.0, s.noise_sigma, size=out.shape)
    return Volume(out, v.spacing)
