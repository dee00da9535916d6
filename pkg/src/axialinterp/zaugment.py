"""Whole-stack inference: iterative z-doubling and continuous (DPM-driven) insertion."""

from __future__ import annotations

import logging
from dataclasses import replace

import numpy as np
import torch

from axialinterp import __version__
from axialinterp.checkpoint import weights_hash
from axialinterp.flownet import SliceGenerator
from axialinterp.volio import MODEL_SIZE, VolumeStack, denormalize_stack, from_model_frames, normalize_stack, to_model_frames

log = logging.getLogger(__name__)


def _device(model: torch.nn.Module) -> torch.device:
    return next(model.parameters()).device


def predict_frames(model: SliceGenerator, frames0: np.ndarray, frames1: np.ndarray, z: float, batch_size: int = 8) -> np.ndarray:
    """Student predictions for a batch of (N, H, W) frame pairs, in eval mode."""
    frames0 = np.asarray(frames0, dtype=np.float32)
    frames1 = np.asarray(frames1, dtype=np.float32)
    dev = _device(model)
    was_training = model.training
    model.eval()
    out = []
    try:
        with torch.no_grad():
            for i in range(0, len(frames0), batch_size):
                a = torch.from_numpy(frames0[i : i + batch_size])[:, None].to(dev)
                b = torch.from_numpy(frames1[i : i + batch_size])[:, None].to(dev)
                dpm = torch.full_like(a, z) if model.mode == "plus" else None
                out.append(model.student_forward(a, b, dpm).student[:, 0].clamp(0, 1).cpu().numpy())
    finally:
        model.train(was_training)
    return np.concatenate(out) if out else np.empty((0, *frames0.shape[1:]), np.float32)


def _check_z(model: SliceGenerator, z: float) -> None:
    if not 0.0 < z < 1.0:
        raise ValueError(f"relative position must lie strictly between 0 and 1, got {z}")
    if model.mode == "fixed" and z != 0.5:
        raise ValueError(f"a fixed-mode model only predicts the midpoint (z = 0.5), got z = {z}")


def interpolate_pair(model: SliceGenerator, i0: np.ndarray, i1: np.ndarray, z: float = 0.5) -> np.ndarray:
    """Predict the slice at relative position ``z`` between two model-sized frames."""
    _check_z(model, z)
    return predict_frames(model, np.asarray(i0)[None], np.asarray(i1)[None], z)[0]


def _predict_gaps(model, norm: VolumeStack, z: float, policy: str, size: int, batch_size: int) -> np.ndarray:
    """One predicted slice per consecutive pair, at native size."""
    tilings = [to_model_frames(s, policy, size) for s in norm.voxels]
    per_slice = len(tilings[0])
    a = np.stack([f.data for t in tilings[:-1] for f in t])
    b = np.stack([f.data for t in tilings[1:] for f in t])
    pred = predict_frames(model, a, b, z, batch_size)
    out = np.empty((norm.depth - 1, norm.height, norm.width), dtype=np.float32)
    for g in range(norm.depth - 1):
        out[g] = from_model_frames(tilings[g], list(pred[g * per_slice : (g + 1) * per_slice]))
    return out


def _provenance(model, **kw) -> dict:
    model_hash = getattr(model, "model_hash", None) or weights_hash(model)
    manifest = getattr(model, "checkpoint_manifest", None) or {}
    prov = {
        "model_hash": model_hash,
        "model_mode": model.mode,
        "config_hash": manifest.get("config_hash"),
        "toolkit_version": __version__,
    }
    prov.update(kw)
    return prov


def _insert(model, stack: VolumeStack, zs: list[float], policy: str, size: int, batch_size: int) -> VolumeStack:
    if stack.depth < 2:
        raise ValueError(f"need at least two slices to interpolate, got {stack.depth}")
    norm = normalize_stack(stack)
    k = len(zs)
    preds = [_predict_gaps(model, norm, z, policy, size, batch_size) for z in zs]
    n = stack.depth
    data = np.empty(((n - 1) * (k + 1) + 1, stack.height, stack.width), dtype=np.float32)
    data[:: k + 1] = norm.voxels
    for j, p in enumerate(preds, start=1):
        data[j :: k + 1] = p
    if stack.normalized:
        out = replace(norm, voxels=data)
    else:
        out = denormalize_stack(replace(norm, voxels=data))
        # originals are copied back so they survive the float round trip bit-exactly
        out.voxels[:: k + 1] = stack.voxels
    spacing = stack.spacing
    if spacing is not None:
        spacing = (spacing[0], spacing[1], spacing[2] / (k + 1))
    return replace(out, spacing=spacing)


def double_stack(model: SliceGenerator, stack: VolumeStack, policy: str = "tile", size: int = MODEL_SIZE, batch_size: int = 8) -> VolumeStack:
    """Insert the midpoint prediction into every gap: ``n`` slices become ``2n - 1``."""
    out = _insert(model, stack, [0.5], policy, size, batch_size)
    meta = dict(stack.metadata)
    passes = int(meta.get("provenance", {}).get("passes", 0)) + 1
    meta["provenance"] = _provenance(model, passes=passes, framing=policy)
    return replace(out, metadata=meta)


def upsample_continuous(
    model: SliceGenerator, stack: VolumeStack, zs, policy: str = "tile", size: int = MODEL_SIZE, batch_size: int = 8
) -> VolumeStack:
    """Insert predictions at every relative position in ``zs`` into each gap, in z order."""
    if model.mode != "plus":
        raise ValueError("continuous insertion needs a plus-mode (DPM) model")
    zs = [float(z) for z in zs]
    if not zs:
        raise ValueError("no relative positions given")
    if any(not 0.0 < z < 1.0 for z in zs):
        raise ValueError(f"relative positions must lie in (0, 1), got {zs}")
    if any(b <= a for a, b in zip(zs, zs[1:])):
        raise ValueError(f"relative positions must be strictly ascending, got {zs}")
    out = _insert(model, stack, zs, policy, size, batch_size)
    meta = dict(stack.metadata)
    meta["provenance"] = _provenance(model, zs=zs, framing=policy)
    return replace(out, metadata=meta)


def augment_volume(
    model: SliceGenerator,
    stack: VolumeStack,
    passes: int | None = None,
    zs=None,
    policy: str = "tile",
    size: int = MODEL_SIZE,
    batch_size: int = 8,
) -> VolumeStack:
    """``passes`` rounds of doubling, or one continuous insertion at ``zs``."""
    if zs is not None:
        if passes not in (None, 1):
            raise ValueError("give either passes or zs, not both")
        return upsample_continuous(model, stack, zs, policy, size, batch_size)
    if passes is None or passes < 1:
        raise ValueError(f"passes must be >= 1, got {passes}")
    out = stack
    for k in range(passes):
        out = double_stack(model, out, policy, size, batch_size)
        log.info("pass %d: %d slices", k + 1, out.depth)
    return out


def expected_depth(n: int, passes: int) -> int:
    return 2**passes * (n - 1) + 1
