"""Super-resolution half of the generator and the full generator pipeline.

coarse = up(lr_denoised) + Coarse(lr_denoised); prior = Prior(coarse);
fused = [Encoder(coarse), prior]; sr = coarse + Decoder(fused)

``up`` is the fixed Catmull-Rom interpolator used by the data pipeline, so a
freshly built generator starts from plain bicubic upsampling and learns residuals.
"""
from __future__ import annotations

import math
from typing import NamedTuple

import torch
import torch.nn as nn

from .blocks import ConvBlock, ResidualBlockCA, UpsampleBlock, strided_conv, zero_init_
from .config import ModelConfig
from .dataset import bicubic_matrix
from .denoiser import Denoiser, DenoiserOutput


class PriorTensor(NamedTuple):
    parsing: torch.Tensor      # (N, C_p, h, w), sums to 1 over classes
    landmarks: torch.Tensor    # (N, K, h, w), values in [0, 1]

    @property
    def stacked(self) -> torch.Tensor:
        return torch.cat([self.parsing, self.landmarks], dim=1)


class SRForwardTrace(NamedTuple):
    coarse: torch.Tensor
    prior: PriorTensor
    fused: torch.Tensor
    sr: torch.Tensor


def _n_halvings(src: int, dst: int) -> int:
    n = int(round(math.log2(src / dst)))
    if dst * 2 ** n != src:
        raise ValueError(f"{src} is not a power-of-two multiple of {dst}")
    return n


class BicubicUpsample(nn.Module):
    """Fixed separable Catmull-Rom upsampling from ``lr_size`` to ``lr_size * scale``."""

    def __init__(self, lr_size: int, scale: int):
        super().__init__()
        mat = torch.from_numpy(bicubic_matrix(lr_size, lr_size * scale)).float()
        self.register_buffer("matrix", mat, persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        m = self.matrix.to(x.dtype)
        return torch.einsum("oh,nchw,pw->ncop", m, x, m)


class CoarseSR(nn.Module):
    def __init__(self, scale: int = 4, channels: int = 64, blocks: int = 3,
                 attention: bool = True, reduction: int = 16, hr_size: int = 128):
        super().__init__()
        if scale not in (4, 8):
            raise ValueError(f"unsupported scale {scale}")
        self.scale = scale
        self.interp = BicubicUpsample(hr_size // scale, scale)
        self.head = nn.Sequential(nn.Conv2d(3, channels, 3, padding=1), nn.ReLU())
        self.body = nn.Sequential(*[ResidualBlockCA(channels, attention, reduction) for _ in range(blocks)])
        self.up = UpsampleBlock(channels, 3, scale, activation=False)
        zero_init_(self.up.conv)

    def forward(self, lr: torch.Tensor) -> torch.Tensor:
        return self.interp(lr) + self.up(self.body(self.head(lr)))


class PriorEstimator(nn.Module):
    """Strided stem down to the prior grid, residual trunk, parsing and landmark heads."""

    def __init__(self, hr_size: int = 128, prior_size: int = 32, channels: int = 64,
                 parsing_classes: int = 4, num_landmarks: int = 81, blocks: int = 2,
                 attention: bool = True, reduction: int = 16):
        super().__init__()
        self.hr_size = hr_size
        n = _n_halvings(hr_size, prior_size)
        widths = [3] + [max(channels >> (n - i - 1), 4) for i in range(n)]
        widths[-1] = channels
        self.stem = nn.Sequential(*[strided_conv(widths[i], widths[i + 1], attention, reduction) for i in range(n)])
        self.trunk = nn.Sequential(*[ResidualBlockCA(channels, attention, reduction) for _ in range(blocks)])
        self.parsing_head = nn.Conv2d(channels, parsing_classes, 3, padding=1)
        self.landmark_head = nn.Conv2d(channels, num_landmarks, 3, padding=1)

    def forward(self, coarse: torch.Tensor) -> PriorTensor:
        if coarse.shape[-2:] != (self.hr_size, self.hr_size):
            raise ValueError(f"prior estimator expects {self.hr_size}x{self.hr_size} input, "
                             f"got {tuple(coarse.shape[-2:])}")
        f = self.trunk(self.stem(coarse))
        return PriorTensor(torch.softmax(self.parsing_head(f), dim=1), torch.sigmoid(self.landmark_head(f)))


class Encoder(nn.Module):
    def __init__(self, hr_size: int = 128, prior_size: int = 32, channels: int = 64,
                 attention: bool = True, reduction: int = 16):
        super().__init__()
        n = _n_halvings(hr_size, prior_size)
        widths = [3] + [max(channels >> (n - i - 1), 4) for i in range(n)]
        widths[-1] = channels
        layers = [strided_conv(widths[i], widths[i + 1], attention, reduction) for i in range(n)]
        layers.append(ConvBlock(channels, channels, attention, reduction))
        self.body = nn.Sequential(*layers)
        self.out_channels = channels

    def forward(self, coarse):
        return self.body(coarse)


class Decoder(nn.Module):
    """Fused features on the prior grid -> HR image; width halves at each x2 stage."""

    def __init__(self, in_channels: int, hr_size: int = 128, prior_size: int = 32, channels: int = 64,
                 attention: bool = True, reduction: int = 16):
        super().__init__()
        self.in_channels = in_channels
        n = _n_halvings(hr_size, prior_size)
        layers = [ConvBlock(in_channels, channels, attention, reduction),
                  ResidualBlockCA(channels, attention, reduction)]
        c = channels
        for _ in range(n):
            nxt = max(c // 2, 4)
            layers.append(UpsampleBlock(c, nxt, 2))
            c = nxt
        self.body = nn.Sequential(*layers)
        self.out = zero_init_(nn.Conv2d(c, 3, 3, padding=1))

    def forward(self, fused):
        if fused.shape[1] != self.in_channels:
            raise ValueError(f"decoder expects {self.in_channels} channels, got {fused.shape[1]}")
        return self.out(self.body(fused))


class SuperResolver(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        cfg = config or ModelConfig()
        a, r = cfg.attention, cfg.reduction
        self.scale = cfg.scale
        self.coarse = CoarseSR(cfg.scale, cfg.sr_channels, cfg.coarse_blocks, a, r, cfg.hr_size)
        self.prior = PriorEstimator(cfg.hr_size, cfg.prior_size, cfg.sr_channels, cfg.parsing_classes,
                                    cfg.num_landmarks, cfg.prior_blocks, a, r)
        self.encoder = Encoder(cfg.hr_size, cfg.prior_size, cfg.sr_channels, a, r)
        self.decoder = Decoder(cfg.sr_channels + cfg.parsing_classes + cfg.num_landmarks,
                               cfg.hr_size, cfg.prior_size, cfg.sr_channels, a, r)

    def coarse_sr(self, lr_denoised):
        return self.coarse(lr_denoised)

    def estimate_prior(self, coarse) -> PriorTensor:
        return self.prior(coarse)

    def encode(self, coarse):
        return self.encoder(coarse)

    def fuse(self, encoded, prior: PriorTensor):
        if encoded.shape[-2:] != prior.parsing.shape[-2:]:
            raise ValueError(f"encoder grid {tuple(encoded.shape[-2:])} != prior grid "
                             f"{tuple(prior.parsing.shape[-2:])}")
        return torch.cat([encoded, prior.stacked], dim=1)

    def fuse_and_decode(self, encoded, prior: PriorTensor, coarse=None):
        """Decoder output; pass ``coarse`` to add the skip that forms I_SR."""
        out = self.decoder(self.fuse(encoded, prior))
        return out if coarse is None else coarse + out

    def forward(self, lr_denoised) -> SRForwardTrace:
        expected = self.prior.hr_size // self.scale
        if lr_denoised.shape[-2:] != (expected, expected):
            raise ValueError(f"expected {expected}x{expected} LR input for x{self.scale}, "
                             f"got {tuple(lr_denoised.shape[-2:])}")
        coarse = self.coarse_sr(lr_denoised)
        prior = self.estimate_prior(coarse)
        fused = self.fuse(self.encode(coarse), prior)
        return SRForwardTrace(coarse, prior, fused, coarse + self.decoder(fused))


class Generator(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        self.denoiser = Denoiser(self.config)
        self.superres = SuperResolver(self.config)

    def forward(self, lr_masked) -> tuple[DenoiserOutput, SRForwardTrace]:
        den = self.denoiser(lr_masked)
        return den, self.superres(den.lr_denoised)
