"""Self-supervised training triplets, relative-position planes (DPM), and joint augmentation.

Slice indices are 0-based throughout.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, replace
from itertools import combinations
from pathlib import Path

import numpy as np

from axialinterp.volio import MODEL_SIZE, VolumeStack, normalize_stack, to_model_frames

DEFAULT_WINDOW = 7


@dataclass(frozen=True)
class TripletSample:
    """Two outer slices, the held-out middle slice, and its relative position ``z``."""

    i0: np.ndarray
    ig: np.ndarray
    i1: np.ndarray
    z: float
    source: tuple[str, int, int, int]

    def __post_init__(self):
        _, n1, n2, n3 = self.source
        if not n1 < n2 < n3:
            raise ValueError(f"triplet indices must increase, got {(n1, n2, n3)}")
        if not 0.0 < self.z < 1.0:
            raise ValueError(f"z must lie in (0, 1), got {self.z}")

    @property
    def key(self) -> tuple[str, int, int, int]:
        return self.source


def relative_position(n1: int, n2: int, n3: int) -> float:
    return (n2 - n1) / (n3 - n1)


def fixed_index_triplets(depth: int) -> list[tuple[int, int, int]]:
    return [(i, i + 1, i + 2) for i in range(depth - 2)]


def windowed_index_triplets(depth: int, window: int = DEFAULT_WINDOW) -> list[tuple[int, int, int]]:
    """Union over windows ``[t - window, t]`` (1-based t from ``window`` to ``depth``) of increasing triplets.

    Returned 0-based and sorted; indices below the first slice are clamped away.
    """
    seen: set[tuple[int, int, int]] = set()
    for t in range(window, max(window, depth) + 1):
        lo = max(1, t - window)
        hi = min(t, depth)
        for n in combinations(range(lo, hi + 1), 3):
            seen.add(n)
    return sorted(tuple(i - 1 for i in n) for n in seen)


def _frame(norm: VolumeStack, k: int, policy: str, size: int) -> np.ndarray:
    frames = to_model_frames(norm.voxels[k], policy, size)
    if len(frames) != 1:
        raise ValueError(f"slice is {norm.height}x{norm.width}; training frames need the resize policy or {size}x{size} slices")
    return frames[0].data


def _build(stack: VolumeStack, idx: list[tuple[int, int, int]], stack_id: str, policy: str, size: int) -> list[TripletSample]:
    norm = normalize_stack(stack)
    cache: dict[int, np.ndarray] = {}

    def frame(k):
        if k not in cache:
            cache[k] = _frame(norm, k, policy, size)
        return cache[k]

    return [TripletSample(frame(a), frame(b), frame(c), relative_position(a, b, c), (stack_id, a, b, c)) for a, b, c in idx]


def extract_fixed_triplets(stack: VolumeStack, stack_id: str = "stack", policy: str = "resize", size: int = MODEL_SIZE) -> list[TripletSample]:
    """Consecutive (i, i+1, i+2) triplets at z = 0.5; ``depth - 2`` of them."""
    if stack.depth < 3:
        warnings.warn(f"stack {stack_id!r} has {stack.depth} slices; no interior slice to hold out", RuntimeWarning, stacklevel=2)
        return []
    return _build(stack, fixed_index_triplets(stack.depth), stack_id, policy, size)


def extract_windowed_triplets(
    stack: VolumeStack, window: int = DEFAULT_WINDOW, stack_id: str = "stack", policy: str = "resize", size: int = MODEL_SIZE
) -> list[TripletSample]:
    if stack.depth < 3:
        raise ValueError(f"windowed extraction needs at least 3 slices, got {stack.depth}")
    return _build(stack, windowed_index_triplets(stack.depth, window), stack_id, policy, size)


@dataclass(frozen=True)
class DPM:
    data: np.ndarray
    z: float


def make_dpm(z: float, size: tuple[int, int] = (MODEL_SIZE, MODEL_SIZE)) -> DPM:
    """Constant plane filled with the relative position ``z``."""
    if not 0.0 <= z <= 1.0:
        raise ValueError(f"relative position must be in [0, 1], got {z}")
    return DPM(np.full(size, z, dtype=np.float32), float(z))


@dataclass(frozen=True)
class Transform:
    """Clockwise quarter turns, optional horizontal flip, then ``clip(gain * x + offset)``."""

    quarter_turns: int = 0
    flip: bool = False
    gain: float = 1.0
    offset: float = 0.0

    @property
    def is_geometric_identity(self) -> bool:
        return self.quarter_turns % 4 == 0 and not self.flip

    def apply(self, frame: np.ndarray) -> np.ndarray:
        out = np.rot90(frame, k=-(self.quarter_turns % 4))
        if self.flip:
            out = out[:, ::-1]
        if self.gain != 1.0 or self.offset != 0.0:
            out = np.clip(self.gain * out + self.offset, 0.0, 1.0)
        return np.ascontiguousarray(out, dtype=np.float32)

    def undo(self, frame: np.ndarray) -> np.ndarray:
        """Invert the geometric part (flip, then turn back)."""
        out = frame[:, ::-1] if self.flip else frame
        return np.ascontiguousarray(np.rot90(out, k=self.quarter_turns % 4), dtype=np.float32)


def sample_transform(rng: np.random.Generator) -> Transform:
    return Transform(
        quarter_turns=int(rng.integers(0, 4)),
        flip=bool(rng.integers(0, 2)),
        gain=float(rng.uniform(0.9, 1.1)),
        offset=float(rng.uniform(-0.05, 0.05)),
    )


def apply_transform(t: TripletSample, tf: Transform) -> TripletSample:
    return replace(t, i0=tf.apply(t.i0), ig=tf.apply(t.ig), i1=tf.apply(t.i1))


def augment(t: TripletSample, seed: int | np.random.Generator) -> TripletSample:
    """Apply one randomly drawn transform jointly to all three frames; ``z`` is untouched."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return apply_transform(t, sample_transform(rng))


def read_dataset_manifest(path: str | Path) -> list[dict]:
    """JSON list of ``{"path": ..., "mode": "fixed" | "windowed"}`` entries; paths are manifest-relative."""
    path = Path(path)
    entries = json.loads(path.read_text())
    if isinstance(entries, dict):
        entries = entries.get("stacks", [])
    out = []
    for e in entries:
        mode = e.get("mode", "fixed")
        if mode not in ("fixed", "windowed"):
            raise ValueError(f"unknown triplet mode {mode!r} for {e.get('path')}")
        p = Path(e["path"])
        if not p.is_absolute():
            p = path.parent / p
        out.append({"path": p, "mode": mode, "window": int(e.get("window", DEFAULT_WINDOW))})
    return out


def triplet_count(depth: int, mode: str, window: int = DEFAULT_WINDOW) -> int:
    if mode == "fixed":
        return max(0, depth - 2)
    return len(windowed_index_triplets(depth, window))
