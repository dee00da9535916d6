"""Synthetic phantoms for probes and tests."""

from __future__ import annotations

import numpy as np

from axialinterp.volio import VolumeStack


def translating_blob_stack(
    depth: int = 9,
    size: int = 64,
    n_blobs: int = 3,
    step: float = 2.0,
    sigma: float = 4.0,
    seed: int = 0,
    bit_depth: int = 8,
) -> VolumeStack:
    """Gaussian blobs that move by ``step`` pixels per slice, each in its own direction."""
    rng = np.random.default_rng(seed)
    margin = sigma * 2
    start = rng.uniform(margin, size - margin, size=(n_blobs, 2))
    angle = rng.uniform(0, 2 * np.pi, size=n_blobs)
    velocity = step * np.stack([np.sin(angle), np.cos(angle)], axis=1)
    amp = rng.uniform(0.6, 1.0, size=n_blobs)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    top = 2**bit_depth - 1
    vol = np.zeros((depth, size, size))
    for k in range(depth):
        centre = start + (k - depth / 2) * velocity
        for (cy, cx), a in zip(centre, amp):
            vol[k] += a * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    vol = np.clip(vol, 0, 1) * 0.9 + 0.05
    dtype = np.uint8 if bit_depth == 8 else np.uint16
    return VolumeStack(np.rint(vol * top).astype(dtype), bit_depth, (1.0, 1.0, 1.0))


def labeled_ball(shape, centre, radius, label: int = 1, out: np.ndarray | None = None) -> np.ndarray:
    zz, yy, xx = np.indices(shape)
    d2 = (zz - centre[0]) ** 2 + (yy - centre[1]) ** 2 + (xx - centre[2]) ** 2
    out = np.zeros(shape, dtype=np.int32) if out is None else out
    out[d2 <= radius**2] = label
    return out


def fibonacci_sphere(n: int) -> np.ndarray:
    """Quasi-uniform unit vectors (golden-angle spiral)."""
    k = np.arange(n) + 0.5
    polar = np.arccos(1 - 2 * k / n)
    azimuth = np.pi * (1 + 5**0.5) * k
    return np.stack([np.sin(polar) * np.cos(azimuth), np.sin(polar) * np.sin(azimuth), np.cos(polar)], axis=1)
