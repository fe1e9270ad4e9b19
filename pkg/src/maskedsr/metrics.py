"""PSNR / SSIM on the luma channel and Frechet distance between feature sets."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

log = logging.getLogger(__name__)

LUMA = np.array([0.299, 0.587, 0.114])
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def rgb_to_y(img) -> np.ndarray:
    """Full-range BT.601 luma of a (3, H, W) image in [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {img.shape}")
    return np.tensordot(LUMA, img, axes=1)


def _as_y(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return rgb_to_y(img) if img.ndim == 3 and img.shape[0] == 3 else img


def psnr(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    r = len(g) // 2
    out = correlate1d(correlate1d(x, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    return out[r:-r, r:-r]


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean local SSIM over fully-covered 11x11 Gaussian windows."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"ssim needs 2-D images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    g = _gaussian_window()
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def psnr_y(a, b) -> float:
    return psnr(_as_y(a), _as_y(b))


def ssim_y(a, b) -> float:
    return ssim(_as_y(a), _as_y(b))


# ---------------------------------------------------------------------------
# Frechet distance

@dataclass
class FeatureStats:
    """Running sums for mean/covariance; ``merge`` combines shards from workers."""
    dim: int
    n: int = 0
    total: np.ndarray = None
    outer: np.ndarray = None

    def __post_init__(self):
        if self.total is None:
            self.total = np.zeros(self.dim)
            self.outer = np.zeros((self.dim, self.dim))

    def update(self, feats) -> "FeatureStats":
        feats = np.asarray(feats, dtype=np.float64).reshape(-1, self.dim)
        self.n += len(feats)
        self.total += feats.sum(axis=0)
        self.outer += feats.T @ feats
        return self

    def merge(self, other: "FeatureStats") -> "FeatureStats":
        if other.dim != self.dim:
            raise ValueError("dimension mismatch")
        return FeatureStats(self.dim, self.n + other.n, self.total + other.total, self.outer + other.outer)

    def mean_cov(self) -> tuple[np.ndarray, np.ndarray]:
        if self.n < 2:
            raise ValueError("need at least 2 samples")
        mu = self.total / self.n
        cov = (self.outer - self.n * np.outer(mu, mu)) / (self.n - 1)
        return mu, (cov + cov.T) / 2


def _psd_sqrt(mat: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    floor = -tol * max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < floor:
        log.warning("clamping eigenvalue %.3g below tolerance", vals.min())
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)), via the symmetric form sqrt(S1) S2 sqrt(S1)."""
    mu1, mu2 = np.asarray(mu1, float), np.asarray(mu2, float)
    cov1, cov2 = np.asarray(cov1, float), np.asarray(cov2, float)
    if mu1.shape != mu2.shape or cov1.shape != cov2.shape:
        raise ValueError("dimension mismatch")
    root1 = _psd_sqrt(cov1)
    cross = _psd_sqrt(root1 @ cov2 @ root1)
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * np.trace(cross))


def fid(features_real, features_gen) -> float:
    a = np.asarray(features_real, dtype=np.float64)
    b = np.asarray(features_gen, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dimension mismatch: {a.shape} vs {b.shape}")
    if len(a) < 2 or len(b) < 2:
        raise ValueError("fid needs at least 2 samples per set")
    s1 = FeatureStats(a.shape[1]).update(a)
    s2 = FeatureStats(b.shape[1]).update(b)
    return frechet_distance(*s1.mean_cov(), *s2.mean_cov())


# ---------------------------------------------------------------------------
# reports

@dataclass
class MetricsReport:
    sample_ids: list = field(default_factory=list)
    psnr_db: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    fid: float | None = None
    config_hash: str = ""
    notes: str = "FID uses the built-in feature extractor; values are only comparable within this package."

    def add(self, sample_id, psnr_value: float, ssim_value: float) -> None:
        self.sample_ids.append(sample_id)
        self.psnr_db.append(psnr_value)
        self.ssim.append(ssim_value)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_db)) if self.psnr_db else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "psnr_db", "ssim"])
            for sid, p, s in zip(self.sample_ids, self.psnr_db, self.ssim):
                w.writerow([sid, _fmt(p), _fmt(s)])
            w.writerow([f"# mean_psnr={_fmt(self.mean_psnr)} mean_ssim={_fmt(self.mean_ssim)} "
                        f"fid={_fmt(self.fid)} config_hash={self.config_hash}"])

    def to_dict(self) -> dict:
        return {
            "samples": [{"sample_id": i, "psnr_db": _num(p), "ssim": _num(s)}
                        for i, p, s in zip(self.sample_ids, self.psnr_db, self.ssim)],
            "mean_psnr": _num(self.mean_psnr),
            "mean_ssim": _num(self.mean_ssim),
            "fid": _num(self.fid),
            "count": len(self.sample_ids),
            "config_hash": self.config_hash,
            "notes": self.notes,
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def _fmt(v):
    if v is None:
        return "none"
    if isinstance(v, float) and np.isinf(v):
        return "inf"
    return f"{v:.6f}" if isinstance(v, float) else v


def _num(v):
    # JSON has no infinity literal
    if v is None:
        return None
    v = float(v)
    return "inf" if np.isinf(v) else v
