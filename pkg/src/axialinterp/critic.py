"""WGAN-GP critic that scores single middle slices, and the gradient-penalty estimator."""

from __future__ import annotations

from typing import Callable

import torch
from torch import nn

CRITIC_CHANNELS = (64, 128, 256, 512, 512, 512)


class Critic(nn.Module):
    """Plain strided convolutions with LeakyReLU(0.2) and a linear read-out.

    No normalization layers: the gradient penalty is taken per sample and
    batch-coupled statistics would break that. About 11.15M parameters at
    the default 256x256 input.
    """

    def __init__(self, frame_size: int = 256, channels: tuple[int, ...] = CRITIC_CHANNELS, slope: float = 0.2):
        super().__init__()
        reduction = 2 ** len(channels)
        if frame_size % reduction:
            raise ValueError(f"frame_size must be a multiple of {reduction}")
        self.frame_size = frame_size
        layers: list[nn.Module] = []
        cin = 1
        for cout in channels:
            layers += [nn.Conv2d(cin, cout, 4, 2, 1), nn.LeakyReLU(slope)]
            cin = cout
        self.features = nn.Sequential(*layers)
        side = frame_size // reduction
        self.readout = nn.Linear(cin * side * side, 1)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        if frames.dim() != 4 or frames.shape[1] != 1 or frames.shape[-2:] != (self.frame_size, self.frame_size):
            raise ValueError(f"critic expects (B,1,{self.frame_size},{self.frame_size}) frames, got {tuple(frames.shape)}")
        feat = self.features(frames)
        return self.readout(feat.flatten(1)).squeeze(1)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def critic_score(critic: nn.Module, frames: torch.Tensor) -> torch.Tensor:
    """One unbounded score per frame, shape (B,)."""
    return critic(frames)


def interpolate_samples(real: torch.Tensor, fake: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    """``alpha * real + (1 - alpha) * fake`` with one alpha per sample."""
    alpha = alpha.reshape(-1, *([1] * (real.dim() - 1))).to(real)
    return alpha * real + (1 - alpha) * fake


def sample_alpha(batch: int, seed: int | None = None, generator: torch.Generator | None = None, device=None) -> torch.Tensor:
    if generator is None:
        generator = torch.Generator()
        generator.manual_seed(0 if seed is None else seed)
    return torch.rand(batch, generator=generator).to(device)


def gradient_penalty(
    critic: Callable[[torch.Tensor], torch.Tensor],
    real: torch.Tensor,
    fake: torch.Tensor,
    seed: int | None = None,
    alpha: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean over samples of ``(||grad_x D(x)||_2 - 1)^2`` on random real/fake mixes.

    ``alpha`` overrides the seeded U[0,1] draws. The graph is kept so the
    result can be backpropagated into the critic's weights.
    """
    if real.shape != fake.shape:
        raise ValueError(f"real {tuple(real.shape)} and fake {tuple(fake.shape)} differ in shape")
    if alpha is None:
        alpha = sample_alpha(real.shape[0], seed=seed, device=real.device)
    mixed = interpolate_samples(real.detach(), fake.detach(), alpha).requires_grad_(True)
    scores = critic(mixed)
    (grads,) = torch.autograd.grad(scores.sum(), mixed, create_graph=True)
    norms = grads.flatten(1).norm(2, dim=1)
    return ((norms - 1) ** 2).mean()
