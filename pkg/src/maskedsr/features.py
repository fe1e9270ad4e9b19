"""Frozen feature extractors used by the perceptual, style and identity losses.

Pretrained ImageNet / face-recognition backbones are not shipped. The VGG-style
stack is seeded-random by default and can load real weights from a bundle
file; the identity embedder is pretrained briefly on procedural identities.
"""
from __future__ import annotations

import functools
import logging

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import rawio
from .blocks import ResidualBlockCA
from .config import ModelConfig

log = logging.getLogger(__name__)

PERCEPTUAL_LAYER = "conv2"
STYLE_LAYERS = ("conv1", "conv2", "conv3", "conv4")


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


class FeatureExtractor(nn.Module):
    """conv1 | pool | conv2 | pool | conv3 | conv4, each conv followed by ReLU."""

    layer_ids = ("conv1", "conv2", "conv3", "conv4")

    def __init__(self, widths=(16, 32, 64, 64), seed: int = 1234, weight_file=None):
        super().__init__()
        w = list(widths)
        self.convs = nn.ModuleList([
            nn.Conv2d(3, w[0], 3, padding=1),
            nn.Conv2d(w[0], w[1], 3, padding=1),
            nn.Conv2d(w[1], w[2], 3, padding=1),
            nn.Conv2d(w[2], w[3], 3, padding=1),
        ])
        self._pool_after = {0, 1}
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for conv in self.convs:
                fan_in = conv.in_channels * 9
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                conv.bias.zero_()
        if weight_file is not None:
            self.load_weights(weight_file)
        freeze(self)

    @classmethod
    def from_config(cls, cfg: ModelConfig, weight_file=None) -> "FeatureExtractor":
        return cls(cfg.feature_widths, cfg.feature_seed, weight_file)

    def load_weights(self, path) -> None:
        arrays = rawio.load_bundle(path)
        state = {k: torch.from_numpy(np.asarray(v, dtype=np.float32)) for k, v in arrays.items()}
        self.load_state_dict(state)

    def save_weights(self, path) -> None:
        rawio.save_bundle(path, {k: v.detach().cpu().numpy() for k, v in self.state_dict().items()})

    def extract(self, img: torch.Tensor, layer_ids=(PERCEPTUAL_LAYER,)) -> dict[str, torch.Tensor]:
        wanted = list(layer_ids)
        unknown = [l for l in wanted if l not in self.layer_ids]
        if unknown:
            raise KeyError(f"unknown feature layer(s) {unknown}; available {self.layer_ids}")
        last = max(self.layer_ids.index(l) for l in wanted)
        out = {}
        x = img - 0.5
        for i in range(last + 1):
            x = F.relu(self.convs[i](x))
            if self.layer_ids[i] in wanted:
                out[self.layer_ids[i]] = x
            if i in self._pool_after:
                x = F.max_pool2d(x, 2)
        return out

    def pooled(self, img: torch.Tensor, layer: str = "conv4") -> torch.Tensor:
        """Global-average-pooled features, used as FID embeddings."""
        return self.extract(img, (layer,))[layer].mean(dim=(2, 3))


class IdentityEmbedder(nn.Module):
    """Residual conv trunk, global average pooling and a linear map to ``dim``."""

    def __init__(self, channels: int = 32, dim: int = 512, hr_size: int = 128):
        super().__init__()
        self.hr_size = hr_size
        c = channels
        self.trunk = nn.Sequential(
            nn.Conv2d(3, c, 3, stride=2, padding=1), nn.ReLU(),
            ResidualBlockCA(c, attention=False),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1), nn.ReLU(),
            ResidualBlockCA(2 * c, attention=False),
            nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1), nn.ReLU(),
            ResidualBlockCA(4 * c, attention=False),
        )
        self.fc = nn.Linear(4 * c, dim)
        self.dim = dim

    @classmethod
    def from_config(cls, cfg: ModelConfig) -> "IdentityEmbedder":
        return cls(cfg.embed_channels, cfg.embed_dim, cfg.hr_size)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        if img.dim() != 4 or img.shape[1:] != (3, self.hr_size, self.hr_size):
            raise ValueError(f"embedder expects (N, 3, {self.hr_size}, {self.hr_size}), got {tuple(img.shape)}")
        return self.fc(self.trunk(img - 0.5).mean(dim=(2, 3)))


def toy_identity_batch(identities, views_per_identity: int, seed: int, hr_size: int = 128):
    from .dataset import make_toy_face

    imgs, labels = [], []
    rng = np.random.default_rng(seed)
    for label, ident in enumerate(identities):
        for _ in range(views_per_identity):
            view_seed = int(rng.integers(0, 2**31 - 1))
            face = make_toy_face(view_seed, 5, 2, identity=int(ident), size=hr_size)
            imgs.append(face.image)
            labels.append(label)
    return torch.from_numpy(np.stack(imgs)), torch.tensor(labels)


def pretrain_identity(embedder: IdentityEmbedder, num_identities: int = 16, views: int = 4,
                      steps: int = 60, lr: float = 1e-3, seed: int = 0) -> IdentityEmbedder:
    """Short classification run on procedural identities, then freeze."""
    torch.manual_seed(seed)
    idents = np.arange(num_identities) + 10_000 * (seed + 1)
    x, y = toy_identity_batch(idents, views, seed, embedder.hr_size)
    head = nn.Linear(embedder.dim, num_identities)
    opt = torch.optim.Adam(list(embedder.parameters()) + list(head.parameters()), lr=lr)
    embedder.train()
    for step in range(steps):
        loss = F.cross_entropy(head(embedder(x)), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 20 == 0:
            log.debug("identity pretrain step %d loss %.4f", step, loss.item())
    return freeze(embedder)


@functools.lru_cache(maxsize=8)
def _pretrained_state(channels, dim, hr_size, steps, seed):
    emb = IdentityEmbedder(channels, dim, hr_size)
    pretrain_identity(emb, steps=steps, seed=seed)
    return {k: v.clone() for k, v in emb.state_dict().items()}


def pretrained_embedder(cfg: ModelConfig, steps: int = 60, seed: int = 0) -> IdentityEmbedder:
    """Pretrained, frozen embedder; memoised per process so ablation runs share one."""
    rng_state = torch.get_rng_state()
    emb = IdentityEmbedder.from_config(cfg)
    if steps > 0:
        emb.load_state_dict(_pretrained_state(cfg.embed_channels, cfg.embed_dim, cfg.hr_size, steps, seed))
    torch.set_rng_state(rng_state)
    return freeze(emb)
