"""Loss terms of the denoising and super-resolution stages and their composites.

Batch convention: a 4-D input is a batch; per-image values are averaged over
it. Lower-rank inputs are a single image. Reductions per term:

=========  ======================================================
asym       mean over pixels
tv         sum of squared horizontal + vertical differences
pixel      mean absolute difference
perceptual sum of |feature difference| / (W * H) of the feature map
smooth     sum of absolute horizontal + vertical differences
style      sum over layers of ||Gram diff||_1 / (C * W * H)
face prior mu * ||landmark diff||_2 + nu * ||parsing diff||_2
identity   Euclidean distance between embeddings
=========  ======================================================
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .features import PERCEPTUAL_LAYER, STYLE_LAYERS

DE_TERMS = ("asym", "tv", "style", "per_lr", "pixel_lr", "smooth_lr")
FSR_TERMS = ("fp", "per_hr", "pixel_hr", "smooth_hr", "identity", "adv")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.3
    lambda1: tuple = (0.5, 0.05, 10.0, 0.1, 1.0, 1.0)
    lambda2: tuple = (1.0, 0.1, 1.0, 0.01, 1.0, 1e-3)
    eta: float = 0.1
    mu: float = 1.0
    nu: float = 0.1

    def __post_init__(self):
        if len(self.lambda1) != 6 or len(self.lambda2) != 6:
            raise ValueError("lambda1 and lambda2 need six entries each")
        if any(w < 0 for w in (*self.lambda1, *self.lambda2, self.eta, self.mu, self.nu)):
            raise ValueError("loss weights must be nonnegative")
        if not 0 < self.alpha < 0.5:
            raise ValueError(f"alpha must lie in (0, 0.5), got {self.alpha}")

    def denoise_weights(self) -> dict:
        return dict(zip(DE_TERMS, self.lambda1))

    def fsr_weights(self) -> dict:
        return dict(zip(FSR_TERMS, self.lambda2))

    def without(self, *terms: str) -> "LossWeights":
        """Copy with the named terms' weights set to zero."""
        l1 = tuple(0.0 if n in terms else w for n, w in zip(DE_TERMS, self.lambda1))
        l2 = tuple(0.0 if n in terms else w for n, w in zip(FSR_TERMS, self.lambda2))
        return LossWeights(self.alpha, l1, l2, self.eta, self.mu, self.nu)


def _check_same(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _per_image(x: torch.Tensor) -> torch.Tensor:
    """Sum everything but the batch axis (if any), then average over the batch."""
    if x.dim() == 4:
        return x.flatten(1).sum(dim=1).mean()
    return x.sum()


def _check_spatial(x: torch.Tensor) -> None:
    if x.shape[-1] < 2 or x.shape[-2] < 2:
        raise ValueError(f"need H, W >= 2, got {tuple(x.shape[-2:])}")


def asym_loss(gamma_hat: torch.Tensor, gamma_gt: torch.Tensor, alpha: float = 0.3) -> torch.Tensor:
    _check_same(gamma_hat, gamma_gt)
    if not 0 < alpha < 0.5:
        raise ValueError(f"alpha must lie in (0, 0.5), got {alpha}")
    d = gamma_hat - gamma_gt
    under = (d < 0).to(d.dtype)
    return (torch.abs(alpha - under) * d * d).mean()


def tv_loss(gamma_hat: torch.Tensor) -> torch.Tensor:
    _check_spatial(gamma_hat)
    dh = gamma_hat[..., :, 1:] - gamma_hat[..., :, :-1]
    dv = gamma_hat[..., 1:, :] - gamma_hat[..., :-1, :]
    return _per_image(dh * dh) + _per_image(dv * dv)


PIXEL_REDUCTIONS = ("mean", "sum")


def pixel_loss(pred: torch.Tensor, gt: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """L1 distance. ``mean`` averages over every element; ``sum`` is the unreduced
    per-image norm (averaged over the batch), on the same scale as the smooth term."""
    _check_same(pred, gt)
    diff = (pred - gt).abs()
    if reduction == "mean":
        return diff.mean()
    if reduction == "sum":
        return _per_image(diff)
    raise ValueError(f"reduction must be one of {PIXEL_REDUCTIONS}, got {reduction!r}")


def smooth_loss(img: torch.Tensor) -> torch.Tensor:
    _check_spatial(img)
    dh = img[..., :, 1:] - img[..., :, :-1]
    dv = img[..., 1:, :] - img[..., :-1, :]
    return _per_image(dh.abs()) + _per_image(dv.abs())


def _batched(x: torch.Tensor) -> torch.Tensor:
    return x if x.dim() == 4 else x.unsqueeze(0)


def perceptual_loss(pred, gt, extractor, layer: str = PERCEPTUAL_LAYER) -> torch.Tensor:
    _check_same(pred, gt)
    fp = extractor.extract(_batched(pred), (layer,))[layer]
    fg = extractor.extract(_batched(gt), (layer,))[layer]
    h, w = fp.shape[-2:]
    return (fg - fp).abs().flatten(1).sum(dim=1).mean() / (w * h)


def gram(features: torch.Tensor) -> torch.Tensor:
    """(C, H, W) -> (C, C) or (N, C, H, W) -> (N, C, C); unnormalised inner products."""
    f = features.flatten(-2)
    return f @ f.transpose(-1, -2)


def style_loss(pred, gt, extractor, layers=STYLE_LAYERS) -> torch.Tensor:
    _check_same(pred, gt)
    layers = tuple(layers)
    fp = extractor.extract(_batched(pred), layers)
    fg = extractor.extract(_batched(gt), layers)
    total = 0.0
    for name in layers:
        c, h, w = fp[name].shape[1:]
        diff = (gram(fg[name]) - gram(fp[name])).abs().flatten(1).sum(dim=1)
        total = total + diff.mean() / (c * w * h)
    return total


def _l2_per_image(x: torch.Tensor) -> torch.Tensor:
    x = _batched(x).flatten(1)
    # hand-rolled so the gradient at an exact zero difference is 0, not NaN
    sq = (x * x).sum(dim=1)
    safe = torch.where(sq > 0, sq, torch.ones_like(sq))
    return torch.where(sq > 0, safe.sqrt(), torch.zeros_like(sq))


def face_prior_loss(prior_pred, prior_gt, mu: float = 1.0, nu: float = 0.1) -> torch.Tensor:
    """Accepts PriorTensor-likes exposing ``landmarks`` and ``parsing``."""
    _check_same(prior_pred.landmarks, prior_gt.landmarks)
    _check_same(prior_pred.parsing, prior_gt.parsing)
    lm = _l2_per_image(prior_pred.landmarks - prior_gt.landmarks)
    ps = _l2_per_image(prior_pred.parsing - prior_gt.parsing)
    return (mu * lm + nu * ps).mean()


def identity_loss(sr: torch.Tensor, hr_gt: torch.Tensor, embedder) -> torch.Tensor:
    _check_same(sr, hr_gt)
    return _l2_per_image(embedder(_batched(sr)) - embedder(_batched(hr_gt))).mean()


def _weighted_sum(terms: dict, weights: dict):
    parts = []
    for name, w in weights.items():
        if name not in terms:
            if w != 0:
                raise KeyError(f"missing loss term {name!r}")
            continue
        parts.append((w, terms[name]))
    if parts and all(isinstance(t, (int, float)) for _, t in parts):
        return math.fsum(w * t for w, t in parts)
    total = 0.0
    for w, t in parts:
        total = total + w * t
    return total


def total_denoise_loss(terms: dict, weights: LossWeights = LossWeights()):
    return _weighted_sum(terms, weights.denoise_weights())


def total_fsr_loss(terms: dict, weights: LossWeights = LossWeights()):
    return _weighted_sum(terms, weights.fsr_weights())


def total_loss(terms: dict, weights: LossWeights = LossWeights()):
    return total_denoise_loss(terms, weights) + total_fsr_loss(terms, weights)


@dataclass
class LossReport:
    step: int
    terms: dict                     # name -> float, disabled terms absent
    l_de: float
    l_fsr: float
    l_total: float
    extras: dict = field(default_factory=dict)

    @classmethod
    def from_terms(cls, step: int, terms: dict, weights: LossWeights, **extras) -> "LossReport":
        terms = {k: float(v) for k, v in terms.items()}
        l_de = total_denoise_loss(terms, weights)
        l_fsr = total_fsr_loss(terms, weights)
        return cls(step, terms, l_de, l_fsr, l_de + l_fsr, dict(extras))

    def to_record(self) -> dict:
        return {"step": self.step, "terms": self.terms, "l_de": self.l_de,
                "l_fsr": self.l_fsr, "l_total": self.l_total, **self.extras}
