"""WGAN-GP critic and its losses.

Sign convention follows the original WGAN-GP formulation: the critic
minimises ``D(fake) - D(real) + eta * GP`` and the generator minimises
``-D(fake)``.
"""
from __future__ import annotations

from typing import Callable

import torch
import torch.nn as nn

from .config import ModelConfig

ETA = 0.1


class Critic(nn.Module):
    """Stack of stride-2 convs with leaky ReLU and no normalisation, then a linear score."""

    def __init__(self, hr_size: int = 128, base: int = 64, depth: int = 5, max_width: int = 512):
        super().__init__()
        self.hr_size = hr_size
        layers, c_in = [], 3
        for i in range(depth):
            c_out = min(base * 2 ** i, max_width)
            layers += [nn.Conv2d(c_in, c_out, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            c_in = c_out
        self.features = nn.Sequential(*layers)
        side = hr_size // 2 ** depth
        self.score = nn.Linear(c_in * side * side, 1)

    @classmethod
    def from_config(cls, cfg: ModelConfig) -> "Critic":
        return cls(cfg.hr_size, cfg.critic_base, cfg.critic_depth)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        if img.dim() != 4 or img.shape[1:] != (3, self.hr_size, self.hr_size):
            raise ValueError(f"critic expects (N, 3, {self.hr_size}, {self.hr_size}), got {tuple(img.shape)}")
        return self.score(self.features(img).flatten(1)).squeeze(1)


def interpolate(real: torch.Tensor, fake: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    eps = torch.as_tensor(eps, dtype=real.dtype, device=real.device)
    if eps.dim() == 1:
        eps = eps.view(-1, *[1] * (real.dim() - 1))
    return eps * real + (1 - eps) * fake


def gradient_penalty(critic: Callable, real: torch.Tensor, fake: torch.Tensor,
                     eps: torch.Tensor | float | None = None, generator: torch.Generator | None = None,
                     create_graph: bool = True) -> torch.Tensor:
    """Mean over the batch of ``(||grad_x D(x_hat)||_2 - 1)^2``; the caller applies eta."""
    if real.shape != fake.shape:
        raise ValueError(f"real {tuple(real.shape)} and fake {tuple(fake.shape)} differ in shape")
    if eps is None:
        eps = torch.rand(real.shape[0], generator=generator, dtype=real.dtype, device=real.device)
    x_hat = interpolate(real, fake.detach(), eps).detach().requires_grad_(True)
    scores = critic(x_hat)
    grad = None
    if scores.requires_grad:
        (grad,) = torch.autograd.grad(scores.sum(), x_hat, create_graph=create_graph, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(x_hat)
    norms = grad.flatten(1).norm(dim=1)
    return ((norms - 1.0) ** 2).mean()


def critic_loss(critic: Callable, real: torch.Tensor, fake: torch.Tensor, eta: float = ETA,
                eps=None, generator: torch.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Returns (total critic loss, gradient penalty). ``fake`` is detached here."""
    fake = fake.detach()
    gp = gradient_penalty(critic, real, fake, eps, generator)
    loss = critic(fake).mean() - critic(real).mean() + eta * gp
    return loss, gp


def adversarial_generator_loss(critic: Callable, fake: torch.Tensor) -> torch.Tensor:
    return -critic(fake).mean()
