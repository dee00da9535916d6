"""Reconstruction, distillation and adversarial objectives."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from axialinterp.flownet import GeneratorOutput

PYRAMID_LEVELS = 5
_GAUSS_1D = torch.tensor([1.0, 4.0, 6.0, 4.0, 1.0]) / 16


@dataclass(frozen=True)
class LossWeights:
    distill: float = 0.01
    adv: float = 0.001
    gp: float = 10.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {value}")


@dataclass
class LossReport:
    rec_student: float = 0.0
    rec_teacher: float = 0.0
    distill: float = 0.0
    adv_gen: float = 0.0
    critic_wass: float = 0.0
    critic_gp: float = 0.0
    total_G: float = 0.0
    total_D: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def _reflect_index(n: int, total: int) -> torch.Tensor:
    pad = total - n
    return torch.from_numpy(np.pad(np.arange(n), (pad // 2, pad - pad // 2), mode="reflect"))


def _reflect_pad_to(x: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Mirror-pad the last two dims to (h, w), split evenly; pads may exceed the input size."""
    if x.shape[-2:] == (h, w):
        return x
    rows = _reflect_index(x.shape[-2], h).to(x.device)
    cols = _reflect_index(x.shape[-1], w).to(x.device)
    return x.index_select(-2, rows).index_select(-1, cols)


def _blur(x: torch.Tensor, gain: float = 1.0) -> torch.Tensor:
    c = x.shape[1]
    k = (_GAUSS_1D * gain).to(x)
    x = F.pad(x, (2, 2, 2, 2), mode="reflect")
    x = F.conv2d(x, k.view(1, 1, 1, 5).expand(c, 1, 1, 5), groups=c)
    return F.conv2d(x, k.view(1, 1, 5, 1).expand(c, 1, 5, 1), groups=c)


def _upsample(x: torch.Tensor) -> torch.Tensor:
    b, c, h, w = x.shape
    up = x.new_zeros(b, c, 2 * h, 2 * w)
    up[..., ::2, ::2] = x
    return _blur(up, gain=2.0)


def laplacian_pyramid(x: torch.Tensor, levels: int = PYRAMID_LEVELS) -> list[torch.Tensor]:
    """Band-pass levels finest first, with the low-pass residual as the last entry."""
    pyramid = []
    current = x
    for _ in range(levels - 1):
        down = _blur(current)[..., ::2, ::2]
        pyramid.append(current - _upsample(down))
        current = down
    pyramid.append(current)
    return pyramid


def lap_loss(a: torch.Tensor, b: torch.Tensor, levels: int = PYRAMID_LEVELS) -> torch.Tensor:
    """Sum over pyramid levels of ``2**k * mean|A_k - B_k|`` (k = 0 finest).

    Inputs are (B, C, H, W); sizes are reflect-padded up to a multiple of
    ``2**levels`` first.
    """
    if a.shape != b.shape:
        raise ValueError(f"lap_loss operands differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    m = 2**levels
    h = math.ceil(a.shape[-2] / m) * m
    w = math.ceil(a.shape[-1] / m) * m
    a = _reflect_pad_to(a, h, w)
    b = _reflect_pad_to(b, h, w)
    total = a.new_zeros(())
    for k, (pa, pb) in enumerate(zip(laplacian_pyramid(a, levels), laplacian_pyramid(b, levels))):
        total = total + (2.0**k) * (pa - pb).abs().mean()
    return total


def _safe_sqrt(x: torch.Tensor) -> torch.Tensor:
    # zero-valued at 0 with a zero (not NaN) gradient
    positive = x > 0
    return torch.where(positive, torch.sqrt(torch.where(positive, x, torch.ones_like(x))), torch.zeros_like(x))


def _field_norm(d: torch.Tensor) -> torch.Tensor:
    return _safe_sqrt((d * d).flatten(1).sum(1))


def distill_loss(student_flows: list[torch.Tensor], teacher_flow: torch.Tensor) -> torch.Tensor:
    """``sqrt(sum_i ||F^i_0 - F^T_0|| + ||F^i_1 - F^T_1||)`` per sample, averaged over the batch.

    Flows are (B, 4, H, W): channels 0:2 point to I0, 2:4 to I1. The teacher
    flow is treated as a constant.
    """
    teacher_flow = teacher_flow.detach()
    inner = teacher_flow.new_zeros(teacher_flow.shape[0])
    for flow in student_flows:
        if flow.shape[-2:] != teacher_flow.shape[-2:]:
            flow = F.interpolate(flow, size=teacher_flow.shape[-2:], mode="bilinear", align_corners=False)
        if flow.shape != teacher_flow.shape:
            raise ValueError(f"student flow {tuple(flow.shape)} vs teacher flow {tuple(teacher_flow.shape)}")
        d = flow - teacher_flow
        inner = inner + _field_norm(d[:, :2]) + _field_norm(d[:, 2:4])
    return _safe_sqrt(inner).mean()


def generator_loss(
    out: GeneratorOutput,
    target: torch.Tensor,
    weights: LossWeights,
    critic_scores: torch.Tensor | None = None,
) -> tuple[torch.Tensor, LossReport]:
    """Student + teacher reconstruction, weighted distillation, minus weighted critic score."""
    if out.teacher is None or out.teacher_flow is None:
        raise ValueError("generator loss needs the teacher outputs (training pass)")
    if weights.adv > 0 and critic_scores is None:
        raise ValueError("adversarial weight > 0 but no critic scores supplied")
    rec_s = lap_loss(out.student, target)
    rec_t = lap_loss(out.teacher, target)
    dis = distill_loss(out.flows, out.teacher_flow)
    total = rec_s + rec_t + weights.distill * dis
    adv = target.new_zeros(())
    if critic_scores is not None:
        adv = critic_scores.mean()
        if weights.adv > 0:
            total = total - weights.adv * adv
    report = LossReport(
        rec_student=rec_s.item(),
        rec_teacher=rec_t.item(),
        distill=dis.item(),
        adv_gen=adv.item(),
        total_G=total.item(),
    )
    return total, report


def assemble_generator_total(rec_student, rec_teacher, distill, adv_gen, weights: LossWeights):
    """Scalar form of the generator objective, for logs and arithmetic checks."""
    return rec_student + rec_teacher + weights.distill * distill - weights.adv * adv_gen


def critic_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor, gp, weights: LossWeights):
    """``mean(fake) - mean(real) + gp_weight * gp``."""
    if real_scores.shape != fake_scores.shape:
        raise ValueError("real and fake score batches are not aligned")
    return fake_scores.mean() - real_scores.mean() + weights.gp * gp
