"""Stack I/O, per-stack min-max normalization, and 256x256 model framing."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import tifffile

log = logging.getLogger(__name__)

MODEL_SIZE = 256
MIN_SLICE_SIDE = 32
_DTYPES = {8: np.uint8, 16: np.uint16}


class StackFormatError(ValueError):
    """Raised when a file cannot be read as a grayscale z-stack."""


@dataclass(frozen=True)
class VolumeStack:
    """A z-ordered series of equally sized 2D slices, indexed (z, y, x).

    Raw stacks hold integer voxels of ``bit_depth`` bits. Normalized stacks
    hold floats in [0, 1] and remember the ``(min, max)`` they came from in
    ``norm_range``.
    """

    voxels: np.ndarray
    bit_depth: int = 8
    spacing: tuple[float, float, float] | None = None  # (dx, dy, dz)
    metadata: dict = field(default_factory=dict)
    norm_range: tuple[float, float] | None = None

    def __post_init__(self):
        if self.voxels.ndim != 3 or self.voxels.shape[0] < 1:
            raise ValueError(f"stack voxels must be (z, y, x) with z >= 1, got shape {self.voxels.shape}")
        if self.bit_depth not in _DTYPES:
            raise ValueError(f"bit_depth must be 8 or 16, got {self.bit_depth}")
        if self.norm_range is None:
            if not np.issubdtype(self.voxels.dtype, np.integer):
                raise ValueError("raw stacks need integer voxels; pass norm_range for normalized data")
            if self.voxels.size and (self.voxels.min() < 0 or self.voxels.max() > 2**self.bit_depth - 1):
                raise ValueError(f"voxels exceed the {self.bit_depth}-bit range")

    @property
    def depth(self) -> int:
        return self.voxels.shape[0]

    @property
    def height(self) -> int:
        return self.voxels.shape[1]

    @property
    def width(self) -> int:
        return self.voxels.shape[2]

    @property
    def normalized(self) -> bool:
        return self.norm_range is not None


def load_stack(path: str | Path) -> VolumeStack:
    """Read a multi-page grayscale TIFF, one page per z-slice."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such stack file: {path}")
    slices = []
    with tifffile.TiffFile(path) as tif:
        meta = _read_metadata(tif)
        for i, page in enumerate(tif.pages, start=1):
            arr = page.asarray()
            if arr.ndim != 2:
                raise StackFormatError(f"page {i} is not grayscale (shape {arr.shape})")
            if slices and arr.shape != slices[0].shape:
                raise StackFormatError(f"page {i} has size {arr.shape}, expected {slices[0].shape} like page 1")
            slices.append(arr)
    if not slices:
        raise StackFormatError(f"{path} contains no pages")
    voxels = np.stack(slices)
    if voxels.dtype == np.uint8:
        bit_depth = 8
    elif voxels.dtype == np.uint16:
        bit_depth = 16
    else:
        raise StackFormatError(f"unsupported pixel type {voxels.dtype}; expected 8- or 16-bit unsigned")
    spacing = meta.pop("spacing", None)
    return VolumeStack(voxels, bit_depth, tuple(spacing) if spacing else None, meta)


def _read_metadata(tif: tifffile.TiffFile) -> dict:
    meta: dict = {}
    shaped = tif.shaped_metadata
    if shaped:
        meta.update({k: v for k, v in shaped[0].items() if k != "shape"})
    elif tif.imagej_metadata:
        ij = tif.imagej_metadata
        page = tif.pages[0]
        if "spacing" in ij:
            dx = dy = 1.0
            tag = page.tags.get("XResolution")
            if tag is not None and tag.value[0]:
                dx = dy = tag.value[1] / tag.value[0]
            meta["spacing"] = [dx, dy, float(ij["spacing"])]
    return meta


def save_stack(stack: VolumeStack, path: str | Path, extra: dict | None = None) -> Path:
    """Write a raw stack as a multi-page TIFF with JSON metadata in the description."""
    if stack.normalized:
        stack = denormalize_stack(stack)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = dict(stack.metadata)
    if extra:
        meta.update(extra)
    if stack.spacing is not None:
        meta["spacing"] = list(stack.spacing)
    voxels = stack.voxels.astype(_DTYPES[stack.bit_depth], copy=False)
    tifffile.imwrite(path, voxels, photometric="minisblack", metadata=meta)
    return path


def normalize_stack(stack: VolumeStack) -> VolumeStack:
    """Min-max scale the whole stack to [0, 1]; a constant stack maps to zeros with a warning."""
    if stack.normalized:
        return stack
    v = stack.voxels.astype(np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        warnings.warn(f"constant stack (all voxels = {lo}); normalized to zeros", RuntimeWarning, stacklevel=2)
        data = np.zeros_like(v, dtype=np.float32)
    else:
        data = ((v - lo) / (hi - lo)).astype(np.float32)
    return replace(stack, voxels=data, norm_range=(lo, hi))


def denormalize_stack(stack: VolumeStack) -> VolumeStack:
    """Map normalized voxels back to the recorded range and requantize to ``bit_depth``."""
    if not stack.normalized:
        return stack
    lo, hi = stack.norm_range
    v = np.clip(stack.voxels.astype(np.float64), 0.0, 1.0) * (hi - lo) + lo
    top = 2**stack.bit_depth - 1
    data = np.clip(np.rint(v), 0, top).astype(_DTYPES[stack.bit_depth])
    return replace(stack, voxels=data, norm_range=None)


@dataclass(frozen=True)
class ModelFrame:
    """A 256x256 float patch in [0, 1] cut from (or resized from) a native slice."""

    data: np.ndarray
    native_size: tuple[int, int]  # (height, width) of the source slice
    offset: tuple[int, int] = (0, 0)
    policy: str = "tile"
    model_size: tuple[int, int] = (MODEL_SIZE, MODEL_SIZE)


def _tile_offsets(length: int, tile: int) -> list[int]:
    if length <= tile:
        return [0]
    n = math.ceil(length / tile)
    return [int(round(o)) for o in np.linspace(0, length - tile, n)]


def to_model_frames(slice2d: np.ndarray, policy: str = "tile", size: int = MODEL_SIZE) -> list[ModelFrame]:
    """Cut (``tile``) or resample (``resize``) a normalized slice into model-sized frames.

    Tiles overlap evenly when the side is not a multiple of ``size``; sides
    shorter than ``size`` are reflect-padded and cropped again on reassembly.
    """
    slice2d = np.asarray(slice2d, dtype=np.float32)
    if slice2d.ndim != 2:
        raise ValueError(f"expected a 2D slice, got shape {slice2d.shape}")
    h, w = slice2d.shape
    if h < MIN_SLICE_SIDE or w < MIN_SLICE_SIDE:
        raise ValueError(f"slice {h}x{w} is smaller than the {MIN_SLICE_SIDE}x{MIN_SLICE_SIDE} minimum")
    if policy == "resize":
        return [ModelFrame(_resize(slice2d, size, size), (h, w), (0, 0), "resize", (size, size))]
    if policy != "tile":
        raise ValueError(f"unknown framing policy {policy!r}")
    padded = slice2d
    if h < size or w < size:
        padded = np.pad(slice2d, ((0, max(0, size - h)), (0, max(0, size - w))), mode="reflect")
    frames = []
    for oy in _tile_offsets(h, size):
        for ox in _tile_offsets(w, size):
            patch = padded[oy : oy + size, ox : ox + size].copy()
            frames.append(ModelFrame(patch, (h, w), (oy, ox), "tile", (size, size)))
    return frames


def to_model_frame(slice2d: np.ndarray, policy: str = "tile", size: int = MODEL_SIZE) -> list[ModelFrame]:
    return to_model_frames(slice2d, policy, size)


def from_model_frames(frames: list[ModelFrame], data: list[np.ndarray] | None = None) -> np.ndarray:
    """Reassemble a native-size slice; overlapping tiles are averaged.

    ``data`` optionally replaces the frames' pixels (e.g. model predictions
    for the same tiling).
    """
    if not frames:
        raise ValueError("no frames to reassemble")
    arrays = [f.data for f in frames] if data is None else list(data)
    h, w = frames[0].native_size
    if frames[0].policy == "resize":
        return _resize(np.asarray(arrays[0], dtype=np.float32), h, w)
    acc = np.zeros((h, w), dtype=np.float64)
    count = np.zeros((h, w), dtype=np.float64)
    for f, arr in zip(frames, arrays):
        oy, ox = f.offset
        th = min(f.model_size[0], h - oy)
        tw = min(f.model_size[1], w - ox)
        acc[oy : oy + th, ox : ox + tw] += np.asarray(arr, dtype=np.float64)[:th, :tw]
        count[oy : oy + th, ox : ox + tw] += 1
    if (count == 0).any():
        raise ValueError("frames do not cover the native slice")
    return (acc / count).astype(np.float32)


def _resize(a: np.ndarray, h: int, w: int) -> np.ndarray:
    if a.shape == (h, w):
        return a.copy()
    import torch
    import torch.nn.functional as F

    t = torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))[None, None]
    return F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)[0, 0].numpy()


def write_tile_manifest(path: str | Path, frames: list[ModelFrame], source: str | None = None) -> Path:
    """Sidecar JSON recording how a slice was framed."""
    path = Path(path)
    doc = {
        "source": source,
        "policy": frames[0].policy,
        "native_size": list(frames[0].native_size),
        "model_size": list(frames[0].model_size),
        "offsets": [list(f.offset) for f in frames],
    }
    path.write_text(json.dumps(doc, indent=2))
    return path


def read_tile_manifest(path: str | Path) -> dict:
    doc = json.loads(Path(path).read_text())
    doc["native_size"] = tuple(doc["native_size"])
    doc["model_size"] = tuple(doc["model_size"])
    doc["offsets"] = [tuple(o) for o in doc["offsets"]]
    return doc
