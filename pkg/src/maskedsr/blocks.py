"""Shared building blocks for the denoising and super-resolution streams."""
from __future__ import annotations

import torch
import torch.nn as nn


def effective_reduction(channels: int, reduction: int) -> int:
    # bottleneck keeps at least 4 channels (or all of them for tiny layers)
    return max(1, min(reduction, channels // 4))


class ChannelAttention(nn.Module):
    """Squeeze-excitation gating: pooled stats -> bottleneck MLP -> sigmoid weights."""

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        r = effective_reduction(channels, reduction)
        if channels % r:
            raise ValueError(f"channels ({channels}) not divisible by reduction ({r})")
        hidden = channels // r
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def weights(self, f: torch.Tensor) -> torch.Tensor:
        pooled = f.mean(dim=(2, 3))
        return torch.sigmoid(self.fc2(torch.relu(self.fc1(pooled))))

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return f * self.weights(f)[:, :, None, None]


def _attention(channels: int, attention: bool, reduction: int) -> nn.Module:
    return ChannelAttention(channels, reduction) if attention else nn.Identity()


class ConvBlock(nn.Module):
    """3x3 conv + batch norm + ReLU, optionally followed by channel attention."""

    def __init__(self, in_ch: int, out_ch: int, attention: bool = True, reduction: int = 16, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.norm = nn.BatchNorm2d(out_ch)
        self.act = nn.ReLU(inplace=False)
        self.ca = _attention(out_ch, attention, reduction)

    def forward(self, x):
        return self.ca(self.act(self.norm(self.conv(x))))


def strided_conv(in_ch: int, out_ch: int, attention: bool = True, reduction: int = 16) -> ConvBlock:
    """3x3 stride-2 conv block; halves spatial dims."""
    return ConvBlock(in_ch, out_ch, attention, reduction, stride=2)


class ResidualBlockCA(nn.Module):
    """conv-BN-ReLU-conv, channel attention, identity skip.

    With the second convolution zero-initialised the block is the identity.
    """

    def __init__(self, channels: int, attention: bool = True, reduction: int = 16, zero_init: bool = False):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm = nn.BatchNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.ca = _attention(channels, attention, reduction)
        if zero_init:
            nn.init.zeros_(self.conv2.weight)
            nn.init.zeros_(self.conv2.bias)

    def forward(self, x):
        r = self.conv2(torch.relu(self.norm(self.conv1(x))))
        return x + self.ca(r)


class UpsampleBlock(nn.Module):
    """Channel-expanding conv followed by pixel shuffle (sub-pixel upsampling)."""

    def __init__(self, in_ch: int, out_ch: int, factor: int, activation: bool = True):
        super().__init__()
        self.factor = factor
        self.conv = nn.Conv2d(in_ch, out_ch * factor * factor, 3, padding=1)
        self.shuffle = nn.PixelShuffle(factor)
        self.act = nn.ReLU() if activation else nn.Identity()

    def forward(self, x):
        return self.act(self.shuffle(self.conv(x)))


def zero_init_(layer: nn.Module) -> nn.Module:
    for p in layer.parameters():
        nn.init.zeros_(p)
    return layer
