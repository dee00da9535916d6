"""Flow-based slice generator: three-block student plus a ground-truth-aware teacher block.

Each block sees the input pair at a reduced scale, predicts a residual update
to two intermediate flows (target slice -> I0, target slice -> I1) and to a
fusion-mask logit, and hands the refined state to the next block. The target
slice is synthesized by backward-warping both inputs and blending them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

MODES = ("fixed", "plus")

# Widths land the student at ~10.67M and the teacher block at ~3.34M parameters.
STUDENT_WIDTHS = (300, 192, 108)
TEACHER_WIDTH = 208
BLOCK_SCALES = (4, 2, 1)
CONVS_PER_BLOCK = 8


def backward_warp(image: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Bilinearly sample ``image`` at ``p + flow(p)`` with border replication.

    ``image`` is (B, C, H, W), ``flow`` is (B, 2, H, W) holding (dx, dy) in pixels.
    A zero flow reproduces the input bit-exactly.
    """
    if image.dim() != 4 or flow.dim() != 4 or flow.shape[1] != 2:
        raise ValueError(f"expected (B,C,H,W) image and (B,2,H,W) flow, got {tuple(image.shape)} and {tuple(flow.shape)}")
    if image.shape[0] != flow.shape[0] or image.shape[-2:] != flow.shape[-2:]:
        raise ValueError(f"image {tuple(image.shape)} and flow {tuple(flow.shape)} do not match")

    b, c, h, w = image.shape
    ys = torch.arange(h, dtype=flow.dtype, device=flow.device).view(1, h, 1)
    xs = torch.arange(w, dtype=flow.dtype, device=flow.device).view(1, 1, w)
    x = (xs + flow[:, 0]).clamp(0, w - 1)
    y = (ys + flow[:, 1]).clamp(0, h - 1)

    # non-finite coordinates index pixel 0; the NaN weights still poison the output
    x0 = torch.nan_to_num(x.detach().floor(), nan=0.0)
    y0 = torch.nan_to_num(y.detach().floor(), nan=0.0)
    wx = x - x0
    wy = y - y0
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    flat = image.reshape(b, c, h * w)

    def gather(yi: torch.Tensor, xi: torch.Tensor) -> torch.Tensor:
        idx = (yi * w + xi).reshape(b, 1, h * w).expand(b, c, h * w)
        return flat.gather(2, idx).reshape(b, c, h, w)

    wx = wx.unsqueeze(1)
    wy = wy.unsqueeze(1)
    top = gather(y0, x0) * (1 - wx) + gather(y0, x1) * wx
    bottom = gather(y1, x0) * (1 - wx) + gather(y1, x1) * wx
    return top * (1 - wy) + bottom * wy


def fuse(warped0: torch.Tensor, warped1: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Convex per-pixel blend: ``mask * warped0 + (1 - mask) * warped1``."""
    if warped0.shape != warped1.shape or mask.shape[-2:] != warped0.shape[-2:]:
        raise ValueError("fuse operands must share spatial shape")
    return mask * warped0 + (1 - mask) * warped1


def _conv(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), nn.PReLU(cout))


class FlowBlock(nn.Module):
    """Strided conv encoder, residual conv stack, one transposed conv head.

    Outputs 4 flow channels and 1 mask-logit channel at full input resolution.
    """

    def __init__(self, in_channels: int, width: int, scale: int):
        super().__init__()
        self.in_channels = in_channels
        self.width = width
        self.scale = scale
        self.encode = nn.Sequential(_conv(in_channels, width // 2, 2), _conv(width // 2, width, 2))
        self.body = nn.Sequential(*[_conv(width, width) for _ in range(CONVS_PER_BLOCK)])
        self.head = nn.ConvTranspose2d(width, 5, 4, 2, 1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h, w = x.shape[-2:]
        s = self.scale
        if s != 1:
            x = F.interpolate(x, scale_factor=1.0 / s, mode="bilinear", align_corners=False)
        feat = self.encode(x)
        feat = self.body(feat) + feat
        out = self.head(feat)
        out = F.interpolate(out, size=(h, w), mode="bilinear", align_corners=False)
        # flow was predicted in units of the half-resolution head grid
        flow = out[:, :4] * (2 * s)
        return flow, out[:, 4:5]


@dataclass
class GeneratorOutput:
    """Per-block products of a generator pass. Lists are indexed by block (0 -> F^1)."""

    flows: list[torch.Tensor] = field(default_factory=list)
    masks: list[torch.Tensor] = field(default_factory=list)
    warped: list[tuple[torch.Tensor, torch.Tensor]] = field(default_factory=list)
    student: torch.Tensor | None = None
    teacher_flow: torch.Tensor | None = None
    teacher_mask: torch.Tensor | None = None
    teacher: torch.Tensor | None = None
    # carried so the teacher block can extend the student state
    _logit: torch.Tensor | None = None

    @property
    def student_flows(self) -> list[torch.Tensor]:
        return self.flows


def _state_input(i0, i1, flow, logit):
    w0 = backward_warp(i0, flow[:, :2])
    w1 = backward_warp(i1, flow[:, 2:4])
    mask = torch.sigmoid(logit)
    return w0, w1, mask, torch.cat((i0, i1, w0, w1, mask, flow), 1)


class SliceGenerator(nn.Module):
    """Student (blocks S0..S2) and training-only teacher block T3.

    ``mode="plus"`` adds a constant relative-position plane (DPM) as a third
    input channel of the first block; every other layer is shared with the
    fixed-midpoint architecture.
    """

    def __init__(
        self,
        mode: str = "fixed",
        widths: tuple[int, int, int] = STUDENT_WIDTHS,
        teacher_width: int = TEACHER_WIDTH,
        teacher_grad_to_student: bool = True,
    ):
        super().__init__()
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        if len(widths) != 3:
            raise ValueError("student needs exactly three block widths")
        self.mode = mode
        self.widths = tuple(int(w) for w in widths)
        self.teacher_width = int(teacher_width)
        self.teacher_grad_to_student = teacher_grad_to_student
        first_in = 3 if mode == "plus" else 2
        # later blocks: I0, I1, two warped frames, mask, 4 flow channels
        self.blocks = nn.ModuleList(
            [
                FlowBlock(first_in, self.widths[0], BLOCK_SCALES[0]),
                FlowBlock(9, self.widths[1], BLOCK_SCALES[1]),
                FlowBlock(9, self.widths[2], BLOCK_SCALES[2]),
            ]
        )
        self.teacher_block = FlowBlock(10, self.teacher_width, 1)

    @property
    def student_blocks(self) -> nn.ModuleList:
        return self.blocks

    def student_parameters(self):
        return self.blocks.parameters()

    def student_parameter_count(self) -> int:
        return sum(p.numel() for p in self.blocks.parameters())

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _check_inputs(self, i0, i1, dpm):
        if i0.shape != i1.shape or i0.dim() != 4 or i0.shape[1] != 1:
            raise ValueError(f"expected matching (B,1,H,W) frames, got {tuple(i0.shape)} and {tuple(i1.shape)}")
        if self.mode == "plus" and dpm is None:
            raise ValueError("plus-mode generator requires a DPM input")
        if self.mode == "fixed" and dpm is not None:
            raise ValueError("fixed-mode generator does not take a DPM input")
        if dpm is not None and dpm.shape != i0.shape:
            raise ValueError(f"DPM shape {tuple(dpm.shape)} does not match frames {tuple(i0.shape)}")

    def student_forward(self, i0: torch.Tensor, i1: torch.Tensor, dpm: torch.Tensor | None = None) -> GeneratorOutput:
        self._check_inputs(i0, i1, dpm)
        out = GeneratorOutput()
        x = torch.cat((i0, i1) if dpm is None else (i0, i1, dpm), 1)
        flow, logit = self.blocks[0](x)
        for k in range(3):
            w0, w1, mask, state = _state_input(i0, i1, flow, logit)
            out.flows.append(flow)
            out.masks.append(mask)
            out.warped.append((w0, w1))
            if k < 2:
                d_flow, d_logit = self.blocks[k + 1](state)
                flow = flow + d_flow
                logit = logit + d_logit
        out._logit = logit
        w0, w1 = out.warped[-1]
        out.student = fuse(w0, w1, out.masks[-1])
        return out

    def teacher_forward(self, state: GeneratorOutput, i0: torch.Tensor, i1: torch.Tensor, ig: torch.Tensor | None) -> GeneratorOutput:
        """Refine the block-3 state with the ground-truth slice; fills the teacher fields of ``state``."""
        if ig is None:
            raise ValueError("teacher pass requires the ground-truth slice")
        if not state.flows or state._logit is None:
            raise ValueError("teacher pass needs a completed student state")
        if ig.shape != i0.shape:
            raise ValueError(f"ground truth shape {tuple(ig.shape)} does not match frames {tuple(i0.shape)}")
        flow, logit = state.flows[-1], state._logit
        w0, w1 = state.warped[-1]
        mask = state.masks[-1]
        if not self.teacher_grad_to_student:
            flow, logit, w0, w1, mask = (t.detach() for t in (flow, logit, w0, w1, mask))
        x = torch.cat((i0, i1, w0, w1, mask, flow, ig), 1)
        d_flow, d_logit = self.teacher_block(x)
        t_flow = flow + d_flow
        t_mask = torch.sigmoid(logit + d_logit)
        tw0 = backward_warp(i0, t_flow[:, :2])
        tw1 = backward_warp(i1, t_flow[:, 2:4])
        state.teacher_flow = t_flow
        state.teacher_mask = t_mask
        state.teacher = fuse(tw0, tw1, t_mask)
        return state

    def forward(self, i0, i1, dpm=None, ig=None) -> GeneratorOutput:
        out = self.student_forward(i0, i1, dpm)
        if ig is not None:
            self.teacher_forward(out, i0, i1, ig)
        return out

    def manifest(self) -> dict:
        return {
            "mode": self.mode,
            "widths": list(self.widths),
            "teacher_width": self.teacher_width,
            "block_scales": list(BLOCK_SCALES),
            "student_parameters": self.student_parameter_count(),
            "parameters": self.parameter_count(),
            "teacher_grad_to_student": self.teacher_grad_to_student,
        }
