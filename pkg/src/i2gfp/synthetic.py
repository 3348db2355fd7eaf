"""Procedural foreground/alpha/background triples for demos and tests."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .matting_core import MattingSample, composite, generate_trimap


def smooth_field(rng: np.random.Generator, size: int, channels: int = 3, sigma: float = 6.0) -> np.ndarray:
    noise = rng.random((size, size, channels))
    field = ndimage.gaussian_filter(noise, sigma=(sigma, sigma, 0), mode="wrap")
    lo, hi = field.min(axis=(0, 1)), field.max(axis=(0, 1))
    return ((field - lo) / np.maximum(hi - lo, 1e-8)).astype(np.float32)


def soft_blob_alpha(rng: np.random.Generator, size: int, softness: float | None = None) -> np.ndarray:
    """Opaque ellipse with a soft rim and a few semi-transparent strands."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(0.35, 0.65, 2) * size
    ry, rx = rng.uniform(0.18, 0.3, 2) * size
    theta = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = (dx * np.cos(theta) + dy * np.sin(theta)) / rx
    v = (-dx * np.sin(theta) + dy * np.cos(theta)) / ry
    r = np.sqrt(u ** 2 + v ** 2)
    softness = rng.uniform(0.15, 0.3) if softness is None else softness
    alpha = np.clip((1.0 + softness - r) / (2 * softness), 0.0, 1.0)
    for _ in range(3):
        angle = rng.uniform(0, 2 * np.pi)
        dist = np.abs((xx - cx) * np.sin(angle) - (yy - cy) * np.cos(angle))
        along = (xx - cx) * np.cos(angle) + (yy - cy) * np.sin(angle)
        strand = np.exp(-dist ** 2 / 2.0) * (along > 0) * (r < 1.8)
        alpha = np.maximum(alpha, 0.6 * strand)
    alpha[alpha < 0.01] = 0.0
    alpha[alpha > 0.99] = 1.0
    return alpha.astype(np.float32)


def make_sample(seed: int, size: int = 64, radius: int = 3) -> MattingSample:
    rng = np.random.default_rng(seed)
    alpha = soft_blob_alpha(rng, size)
    fg = smooth_field(rng, size)
    bg = smooth_field(rng, size, sigma=3.0)
    trimap = generate_trimap(alpha, radius)
    return MattingSample(composite(fg, bg, alpha), trimap, alpha, fg, bg, name=f"synthetic{seed:04d}")


def make_samples(n: int, size: int = 64, seed: int = 0, radius: int = 3) -> list[MattingSample]:
    return [make_sample(seed * 10_007 + i, size, radius) for i in range(n)]
