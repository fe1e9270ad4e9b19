"""Denoising half of the generator: noise-level estimator and non-blind denoiser."""
from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn as nn

from .blocks import ConvBlock, UpsampleBlock, strided_conv, zero_init_
from .config import ModelConfig


class DenoiserOutput(NamedTuple):
    gamma: torch.Tensor          # estimated noise-level map, >= 0
    lr_denoised: torch.Tensor    # input + residual
    residual: torch.Tensor


def _check_image(x: torch.Tensor, channels: int = 3) -> None:
    if x.dim() != 4 or x.shape[1] != channels:
        raise ValueError(f"expected a (N, {channels}, H, W) batch, got {tuple(x.shape)}")


class NoiseEstimator(nn.Module):
    """Fully convolutional gamma estimator; a final ReLU keeps the map nonnegative."""

    def __init__(self, channels: int = 32, depth: int = 5, attention: bool = True, reduction: int = 16):
        super().__init__()
        blocks = [ConvBlock(3, channels, attention, reduction)]
        blocks += [ConvBlock(channels, channels, attention, reduction) for _ in range(depth - 2)]
        self.body = nn.Sequential(*blocks)
        self.out = nn.Conv2d(channels, 3, 3, padding=1)

    def forward(self, lr_masked: torch.Tensor) -> torch.Tensor:
        _check_image(lr_masked)
        return torch.relu(self.out(self.body(lr_masked)))


class NonBlindDenoiser(nn.Module):
    """Two-level encoder-decoder over ``[gamma, image]``, returning the residual."""

    def __init__(self, channels: int = 64, attention: bool = True, reduction: int = 16):
        super().__init__()
        c = channels
        self.head = ConvBlock(6, c, attention, reduction)
        self.down1 = strided_conv(c, c, attention, reduction)
        self.enc2 = ConvBlock(c, c, attention, reduction)
        self.down2 = strided_conv(c, c, attention, reduction)
        self.mid = ConvBlock(c, c, attention, reduction)
        self.up2 = UpsampleBlock(c, c, 2)
        self.dec2 = ConvBlock(c, c, attention, reduction)
        self.up1 = UpsampleBlock(c, c, 2)
        self.dec1 = ConvBlock(c, c, attention, reduction)
        self.out = nn.Conv2d(c, 3, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] % 4 or x.shape[-2] % 4:
            raise ValueError(f"spatial dims must be divisible by 4, got {tuple(x.shape[-2:])}")
        e1 = self.head(x)
        e2 = self.enc2(self.down1(e1))
        m = self.mid(self.down2(e2))
        d2 = self.dec2(self.up2(m) + e2)
        d1 = self.dec1(self.up1(d2) + e1)
        return self.out(d1)


class Denoiser(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        cfg = config or ModelConfig()
        self.estimator = NoiseEstimator(cfg.est_channels, cfg.est_depth, cfg.attention, cfg.reduction)
        self.residual = NonBlindDenoiser(cfg.den_channels, cfg.attention, cfg.reduction)
        # start as the identity map: the residual branch learns corrections
        zero_init_(self.residual.out)

    def estimate_noise(self, lr_masked: torch.Tensor) -> torch.Tensor:
        return self.estimator(lr_masked)

    def denoise(self, lr_masked: torch.Tensor, gamma: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        _check_image(lr_masked)
        if gamma.shape != lr_masked.shape:
            raise ValueError(f"gamma {tuple(gamma.shape)} misaligned with image {tuple(lr_masked.shape)}")
        res = self.residual(torch.cat([gamma, lr_masked], dim=1))
        return res + lr_masked, res

    def forward(self, lr_masked: torch.Tensor) -> DenoiserOutput:
        gamma = self.estimate_noise(lr_masked)
        out, res = self.denoise(lr_masked, gamma)
        return DenoiserOutput(gamma, out, res)
