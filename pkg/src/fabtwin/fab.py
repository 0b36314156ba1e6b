"""Stochastic level-set fabrication simulator.

A layout is blurred (corner rounding), perturbed by spatially correlated
noise (line-edge roughness) and re-thresholded at ``0.5 + bias`` where the
bias is a per-sample global etch offset. Placement jitter shifts the whole
layout by an integer offset before blurring.
"""

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import child_seed, make_rng
from .exceptions import InvalidConfigError
from .validation import check_mask


@dataclass(frozen=True)
class FabParams:
    """Process parameters; positive ``etch_bias_mean`` shrinks features."""

    etch_bias_mean: float = 0.02
    etch_bias_sd: float = 0.02
    blur_sigma_px: float = 1.5
    roughness_amp: float = 0.06
    roughness_corr_len_px: float = 4.0
    jitter_sd_px: float = 0.5

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not math.isfinite(value):
                raise InvalidConfigError(f"{name} must be finite")
        for name in ("etch_bias_sd", "roughness_amp", "jitter_sd_px"):
            if getattr(self, name) < 0:
                raise InvalidConfigError(f"{name} must be non-negative")
        if self.blur_sigma_px <= 0:
            raise InvalidConfigError("blur_sigma_px must be positive")
        if self.roughness_corr_len_px <= 0:
            raise InvalidConfigError("roughness_corr_len_px must be positive")

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise InvalidConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return asdict(self)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def smooth_field(mask, sigma_px):
    """Gaussian blur of a 0/1 mask (kernel truncated at 3 sigma, reflect borders)."""
    if not sigma_px > 0:
        raise InvalidConfigError("sigma_px must be positive")
    mask = check_mask(mask).astype(np.float64)
    out = ndimage.gaussian_filter(mask, sigma=sigma_px, mode="reflect", truncate=3.0)
    return np.clip(out, 0.0, 1.0)


def roughness_field(width, height, corr_len_px, amp, seed):
    """Zero-mean correlated Gaussian noise with empirical standard deviation ``amp``."""
    if not corr_len_px > 0:
        raise InvalidConfigError("corr_len_px must be positive")
    if amp == 0:
        return np.zeros((height, width))
    rng = make_rng(seed, "roughness", 0)
    white = rng.standard_normal((height, width))
    field = ndimage.gaussian_filter(white, sigma=corr_len_px, mode="wrap", truncate=3.0)
    field -= field.mean()
    sd = field.std()
    if sd == 0:
        return np.zeros((height, width))
    return field * (amp / sd)


def shift_mask(mask, dy, dx):
    """Integer translation with zero fill."""
    h, w = mask.shape
    out = np.zeros_like(mask)
    if abs(dy) >= h or abs(dx) >= w:
        return out
    src_y = slice(max(0, -dy), h - max(0, dy))
    dst_y = slice(max(0, dy), h - max(0, -dy))
    src_x = slice(max(0, -dx), w - max(0, dx))
    dst_x = slice(max(0, dx), w - max(0, -dx))
    out[dst_y, dst_x] = mask[src_y, src_x]
    return out


def fab_sample(mask, params, seed):
    """Draw one fabricated outcome of ``mask``; a pure function of its arguments."""
    mask = check_mask(mask)
    rng = make_rng(seed, "fab_sample", 0)
    dy, dx = (int(np.rint(v)) for v in rng.normal(0.0, params.jitter_sd_px, size=2))
    bias = rng.normal(params.etch_bias_mean, params.etch_bias_sd)
    shifted = shift_mask(mask, dy, dx)
    level = smooth_field(shifted, params.blur_sigma_px)
    h, w = mask.shape
    rough = roughness_field(w, h, params.roughness_corr_len_px, params.roughness_amp,
                            child_seed(seed, "roughness", 0))
    return (level + rough >= 0.5 + bias).astype(np.uint8)


def _worker_count(n_jobs):
    if n_jobs is None:
        n_jobs = int(os.environ.get("FABTWIN_THREADS", "0") or 0)
    if n_jobs <= 0:
        n_jobs = os.cpu_count() or 1
    return n_jobs


def fab_batch(mask, n, params, seed, n_jobs=None):
    """``n`` independent draws, draw ``i`` using child seed ``(seed, "fab", i)``."""
    if n < 1:
        raise InvalidConfigError("n must be >= 1")
    mask = check_mask(mask)
    seeds = [child_seed(seed, "fab", i) for i in range(n)]
    workers = min(_worker_count(n_jobs), n)
    if workers == 1:
        return [fab_sample(mask, params, s) for s in seeds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: fab_sample(mask, params, s), seeds))
