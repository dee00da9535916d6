"""Versioned checkpoint container: generator weights, optional critic weights, and a manifest."""

from __future__ import annotations

import hashlib
import io
from pathlib import Path

import torch

from axialinterp import __version__
from axialinterp.critic import Critic
from axialinterp.flownet import SliceGenerator

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def weights_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path, generator: SliceGenerator, critic: Critic | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = generator.manifest()
    manifest.update({"format_version": FORMAT_VERSION, "toolkit_version": __version__})
    if critic is not None:
        manifest["critic"] = {"frame_size": critic.frame_size, "parameters": critic.parameter_count()}
    if extra:
        manifest.update(extra)
    doc = {
        "manifest": manifest,
        "generator": generator.state_dict(),
        "critic": critic.state_dict() if critic is not None else None,
    }
    buf = io.BytesIO()
    torch.save(doc, buf)
    # write-then-rename so an interrupted save never clobbers the last good file
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)
    return path


def load_checkpoint(path, expect_mode: str | None = None, with_critic: bool = False):
    """Rebuild the generator (and optionally the critic) described by the manifest.

    Rejects unknown format versions, mode mismatches, and weights that do not
    fit the manifest's architecture.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such checkpoint: {path}")
    raw = path.read_bytes()
    doc = torch.load(io.BytesIO(raw), map_location="cpu", weights_only=False)
    manifest = doc.get("manifest") or {}
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format {manifest.get('format_version')!r} is not {FORMAT_VERSION}")
    if expect_mode is not None and manifest["mode"] != expect_mode:
        raise CheckpointError(f"checkpoint is a {manifest['mode']!r} model, expected {expect_mode!r}")
    gen = SliceGenerator(
        mode=manifest["mode"],
        widths=tuple(manifest["widths"]),
        teacher_width=manifest["teacher_width"],
        teacher_grad_to_student=manifest.get("teacher_grad_to_student", True),
    )
    if gen.parameter_count() != manifest["parameters"]:
        raise CheckpointError("manifest parameter count does not match the rebuilt generator")
    try:
        gen.load_state_dict(doc["generator"])
    except RuntimeError as exc:
        raise CheckpointError(f"generator weights do not match the manifest: {exc}") from None
    gen.eval()
    gen.model_hash = hashlib.sha256(raw).hexdigest()
    gen.checkpoint_manifest = manifest
    critic = None
    if with_critic:
        if doc.get("critic") is None:
            raise CheckpointError("checkpoint carries no critic section")
        critic = Critic(frame_size=manifest["critic"]["frame_size"])
        critic.load_state_dict(doc["critic"])
    return (gen, critic) if with_critic else gen
