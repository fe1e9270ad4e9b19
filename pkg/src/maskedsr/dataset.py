"""Synthetic paired data: procedural faces, mask fusion and bicubic degradation.

Everything here is a pure function of its arguments (seeds included), so
samples can be produced by independent workers keyed on their seed.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import rawio

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
HR_SIZE = 128
PRIOR_SIZE = 32
DEFAULT_LANDMARKS = 81
TOY_PARSING_CLASSES = 4
HELEN_PARSING_CLASSES = 11
HEATMAP_SIGMA = 1.5

# Named landmarks always occupy the first indices of a toy landmark list.
NAMED_LANDMARKS = (
    "nose_tip",
    "left_cheek",
    "right_cheek",
    "jaw_center",
    "mouth_center",
    "left_eye",
    "right_eye",
    "mouth_left",
    "mouth_right",
)
ANCHOR_NAMES = ("left_cheek", "right_cheek", "jaw_center")

# Toy regions in paint order. A region whose id is not below the requested
# class count folds into its fallback region.
REGIONS = ("background", "skin", "eye", "mouth", "nose", "brow", "hair")
_FALLBACK = {"skin": "background", "eye": "skin", "mouth": "skin",
             "nose": "skin", "brow": "skin", "hair": "background"}


class DatasetError(RuntimeError):
    pass


class DegenerateAnchorsError(ValueError):
    """The three anchor correspondences do not define an invertible affine map."""


def region_class(region: str, num_classes: int) -> int:
    while REGIONS.index(region) >= num_classes:
        region = _FALLBACK[region]
    return REGIONS.index(region)


@dataclass
class FaceRecord:
    image: np.ndarray          # (3, H, W) float32 in [0, 1]
    landmarks: np.ndarray      # (K, 2) float64 pixel coordinates (x, y)
    parsing: np.ndarray        # (H, W) int64 labels
    num_parsing_classes: int = TOY_PARSING_CLASSES
    anchors: dict = field(default_factory=lambda: {n: i for i, n in enumerate(NAMED_LANDMARKS)})

    def landmark(self, name: str) -> np.ndarray:
        return self.landmarks[self.anchors[name]]


@dataclass
class MaskTemplate:
    rgba: np.ndarray           # (4, h, w) float32, channel 3 is alpha
    anchors: dict              # name -> (x, y) in template pixels
    name: str = "custom"

    def anchor_array(self) -> np.ndarray:
        return np.array([self.anchors[n] for n in ANCHOR_NAMES], dtype=np.float64)


@dataclass
class PairedSample:
    lr_masked: np.ndarray
    lr_clean: np.ndarray
    hr_clean: np.ndarray
    gamma_gt: np.ndarray
    landmarks_gt: np.ndarray   # (K, 32, 32) heatmaps
    parsing_gt: np.ndarray     # (C, 32, 32) per-pixel probabilities
    scale: int
    seed: int | None = None


# ---------------------------------------------------------------------------
# procedural faces

def _ellipse(xx, yy, cx, cy, rx, ry):
    return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0


def _ellipse_points(cx, cy, rx, ry, n, t0=0.0, t1=2 * np.pi):
    if n <= 0:
        return np.zeros((0, 2))
    t = np.linspace(t0, t1, n, endpoint=(t1 - t0) < 2 * np.pi - 1e-9)
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


def make_toy_face(seed: int, num_landmarks: int = DEFAULT_LANDMARKS,
                  num_parsing_classes: int = TOY_PARSING_CLASSES,
                  identity: int | None = None, size: int = HR_SIZE) -> FaceRecord:
    """Render a procedural face with exactly consistent landmarks and parsing.

    ``identity`` fixes the face geometry and colours; ``seed`` drives the
    nuisance jitter (placement, lighting). With ``identity=None`` the seed
    drives both.
    """
    if seed < 0:
        raise ValueError("seed must be >= 0")
    if num_landmarks < 5:
        raise ValueError("num_landmarks must be >= 5")
    if num_parsing_classes < 2:
        raise ValueError("num_parsing_classes must be >= 2")

    ident = np.random.default_rng([seed if identity is None else identity, 17])
    nuis = np.random.default_rng([seed, 29])
    s = size / HR_SIZE

    rx = ident.uniform(36, 44) * s
    ry = ident.uniform(46, 53) * s
    skin = np.array([0.80, 0.62, 0.50]) * ident.uniform(0.7, 1.1) + ident.uniform(-0.05, 0.05, 3)
    hair = ident.uniform(0.05, 0.45) * np.array([1.0, 0.8, 0.6])
    bg = ident.uniform(0.15, 0.95, 3)
    eye_dx = ident.uniform(14, 19) * s
    eye_r = ident.uniform(4.0, 6.0) * s
    mouth_w = ident.uniform(10, 15) * s
    mouth_h = ident.uniform(3.0, 5.0) * s
    lip = np.array([0.75, 0.25, 0.30]) * ident.uniform(0.7, 1.0)

    cx = size / 2 + nuis.normal(0, 2.0) * s
    cy = size / 2 + 2 * s + nuis.normal(0, 2.0) * s
    light = nuis.uniform(0.9, 1.05)
    shade_slope = nuis.uniform(-0.15, 0.15)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    region = np.zeros((size, size), dtype=np.int64)
    img = np.broadcast_to(bg[:, None, None], (3, size, size)).copy()
    img *= (1.0 - 0.15 * yy / size)[None]

    def paint(mask, name, color):
        region[mask] = REGIONS.index(name)
        col = np.asarray(color, dtype=np.float64)
        img[:, mask] = col[:, None] if col.ndim == 1 else col[:, mask]

    hair_mask = _ellipse(xx, yy, cx, cy - 0.25 * ry, rx * 1.12, ry * 0.95) & (yy < cy - 0.2 * ry)
    paint(hair_mask, "hair", hair)
    face_mask = _ellipse(xx, yy, cx, cy, rx, ry)
    shading = light * (1.0 + shade_slope * (xx - cx) / rx - 0.1 * (yy - cy) / ry)
    paint(face_mask, "skin", skin[:, None, None] * shading[None])

    eye_y = cy - 0.22 * ry
    brow_y = eye_y - 2.4 * eye_r
    nose = np.array([cx, cy + 0.15 * ry])
    mouth = np.array([cx, cy + 0.48 * ry])
    for sgn in (-1, 1):
        ex = cx + sgn * eye_dx
        paint(_ellipse(xx, yy, ex, brow_y, eye_r * 1.4, max(1.2 * s, eye_r * 0.3)), "brow", hair * 0.8)
        paint(_ellipse(xx, yy, ex, eye_y, eye_r * 1.3, eye_r * 0.75), "eye", [0.95, 0.95, 0.92])
        paint(_ellipse(xx, yy, ex, eye_y, eye_r * 0.55, eye_r * 0.55), "eye", [0.10, 0.08, 0.06])
    paint(_ellipse(xx, yy, nose[0], nose[1] - 4 * s, 3.5 * s, 7.5 * s), "nose", skin * 0.82 * light)
    paint(_ellipse(xx, yy, mouth[0], mouth[1], mouth_w, mouth_h), "mouth", lip)
    paint(_ellipse(xx, yy, mouth[0], mouth[1], mouth_w * 0.8, mouth_h * 0.25), "mouth", lip * 0.4)

    named = np.array([
        nose,
        [cx - 0.85 * rx, cy + 0.1 * ry],
        [cx + 0.85 * rx, cy + 0.1 * ry],
        [cx, cy + ry - 2 * s],
        mouth,
        [cx - eye_dx, eye_y],
        [cx + eye_dx, eye_y],
        [cx - mouth_w, mouth[1]],
        [cx + mouth_w, mouth[1]],
    ])
    rest = num_landmarks - len(named)
    extra = []
    if rest > 0:
        q = rest // 6
        extra = [
            _ellipse_points(cx - eye_dx, eye_y, eye_r * 1.3, eye_r * 0.75, q),
            _ellipse_points(cx + eye_dx, eye_y, eye_r * 1.3, eye_r * 0.75, q),
            _ellipse_points(cx - eye_dx, brow_y, eye_r * 1.4, 0.0, q, np.pi, 2 * np.pi),
            _ellipse_points(cx + eye_dx, brow_y, eye_r * 1.4, 0.0, q, np.pi, 2 * np.pi),
            _ellipse_points(mouth[0], mouth[1], mouth_w, mouth_h, q),
            _ellipse_points(cx, cy, rx, ry, rest - 5 * q, -0.1 * np.pi, 1.1 * np.pi),
        ]
    landmarks = np.concatenate([named] + extra, axis=0)[:num_landmarks]
    landmarks = np.clip(landmarks, 0.0, size - 1.0)

    lut = np.array([region_class(r, num_parsing_classes) for r in REGIONS])
    return FaceRecord(
        image=np.clip(img, 0.0, 1.0).astype(np.float32),
        landmarks=landmarks,
        parsing=lut[region],
        num_parsing_classes=num_parsing_classes,
    )


def load_face_record(image_path, annotation_path, num_parsing_classes: int = HELEN_PARSING_CLASSES) -> FaceRecord:
    """Ingest a real, already aligned face plus its annotation JSON.

    The annotation holds ``landmarks`` ([[x, y], ...]), ``anchors`` (name ->
    landmark index for at least the three mask anchors) and optionally
    ``parsing``, a path to an 8-bit label PNG relative to the annotation.
    """
    ann_path = Path(annotation_path)
    ann = json.loads(ann_path.read_text())
    img = np.asarray(Image.open(image_path).convert("RGB"), dtype=np.float32) / 255.0
    img = img.transpose(2, 0, 1)
    h, w = img.shape[1:]
    if (h, w) != (HR_SIZE, HR_SIZE):
        img = resize_bicubic(img, HR_SIZE, HR_SIZE)
    lms = np.asarray(ann["landmarks"], dtype=np.float64) * [HR_SIZE / w, HR_SIZE / h]
    if "parsing" in ann:
        lab = Image.open(ann_path.parent / ann["parsing"]).resize((HR_SIZE, HR_SIZE), Image.NEAREST)
        parsing = np.asarray(lab, dtype=np.int64)
    else:
        parsing = np.zeros((HR_SIZE, HR_SIZE), dtype=np.int64)
    if parsing.max() >= num_parsing_classes:
        raise DatasetError(f"parsing label {parsing.max()} >= {num_parsing_classes} classes")
    anchors = {k: int(v) for k, v in ann["anchors"].items()}
    missing = [a for a in ANCHOR_NAMES if a not in anchors]
    if missing:
        raise DatasetError(f"annotation lacks anchors {missing}")
    return FaceRecord(np.clip(img, 0, 1).astype(np.float32), np.clip(lms, 0, HR_SIZE - 1),
                      parsing, num_parsing_classes, anchors)


# ---------------------------------------------------------------------------
# masks

def surgical_mask_template(color=(0.55, 0.74, 0.90)) -> MaskTemplate:
    h, w = 64, 96
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # signed distance-ish field: rounded top edge, curved chin
    top = yy - (6.0 + 0.004 * (xx - w / 2) ** 2)
    bottom = (40.0 + 16.0 * np.sqrt(np.clip(1 - ((xx - 47.5) / 46.0) ** 2, 0, 1))) - yy
    sides = np.minimum(xx - 2.0, (w - 3.0) - xx)
    inside = np.minimum(np.minimum(top, bottom), sides)
    alpha = np.clip(inside + 0.5, 0.0, 1.0)
    rgb = np.broadcast_to(np.asarray(color)[:, None, None], (3, h, w)).copy()
    pleats = (np.abs(((yy - 6) % 12) - 6) < 1.0) & (yy > 12) & (yy < 44)
    rgb[:, pleats] *= 0.85
    rgba = np.concatenate([rgb, alpha[None]], axis=0).astype(np.float32)
    anchors = {"left_cheek": (6.0, 20.0), "right_cheek": (89.0, 20.0), "jaw_center": (47.5, 54.0)}
    return MaskTemplate(rgba, anchors, name="surgical")


BUILTIN_TEMPLATES = {
    "surgical": surgical_mask_template,
    "cloth": lambda: _renamed(surgical_mask_template(color=(0.22, 0.24, 0.28)), "cloth"),
}


def _renamed(t: MaskTemplate, name: str) -> MaskTemplate:
    t.name = name
    return t


def load_mask_template(spec: str) -> MaskTemplate:
    """Builtin name, or path to an RGBA PNG with a ``.json`` anchor sidecar."""
    if spec in BUILTIN_TEMPLATES:
        return BUILTIN_TEMPLATES[spec]()
    path = Path(spec)
    rgba = np.asarray(Image.open(path).convert("RGBA"), dtype=np.float32).transpose(2, 0, 1) / 255.0
    anchors = json.loads(path.with_suffix(".json").read_text())
    anchors = {k: tuple(map(float, anchors[k])) for k in ANCHOR_NAMES}
    return MaskTemplate(rgba, anchors, name=path.stem)


def solve_affine(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """2x3 matrix M with ``M @ [x, y, 1] = dst`` for three point pairs."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    lhs = np.hstack([src, np.ones((3, 1))])
    scale = max(1.0, np.abs(src).max()) ** 2
    if abs(np.linalg.det(lhs)) < 1e-9 * scale:
        raise DegenerateAnchorsError("anchor points are collinear; affine system is not invertible")
    return np.linalg.solve(lhs, dst).T


def warp_template(template: MaskTemplate, affine: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Inverse-map every output pixel into the template and sample RGBA.

    Bilinear inside the template grid, nearest edge within half a pixel of
    it, fully transparent beyond.
    """
    h, w = out_hw
    th, tw = template.rgba.shape[1:]
    lin, t = affine[:, :2], affine[:, 2]
    inv = np.linalg.inv(lin)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    pts = np.stack([xx.ravel() - t[0], yy.ravel() - t[1]])
    sx, sy = inv @ pts
    valid = (sx >= -0.5) & (sx <= tw - 0.5) & (sy >= -0.5) & (sy <= th - 0.5)
    sx = np.clip(sx, 0, tw - 1)
    sy = np.clip(sy, 0, th - 1)
    x0 = np.minimum(np.floor(sx).astype(np.int64), tw - 2) if tw > 1 else np.zeros_like(sx, dtype=np.int64)
    y0 = np.minimum(np.floor(sy).astype(np.int64), th - 2) if th > 1 else np.zeros_like(sy, dtype=np.int64)
    fx = sx - x0
    fy = sy - y0
    x1 = np.minimum(x0 + 1, tw - 1)
    y1 = np.minimum(y0 + 1, th - 1)
    src = template.rgba.astype(np.float64)
    out = (src[:, y0, x0] * (1 - fx) * (1 - fy) + src[:, y0, x1] * fx * (1 - fy)
           + src[:, y1, x0] * (1 - fx) * fy + src[:, y1, x1] * fx * fy)
    out[:, ~valid] = 0.0
    return out.reshape(4, h, w)


def overlay_mask(face: FaceRecord, template: MaskTemplate, return_alpha: bool = False):
    dst = np.array([face.landmark(n) for n in ANCHOR_NAMES])
    affine = solve_affine(template.anchor_array(), dst)
    warped = warp_template(template, affine, face.image.shape[1:])
    alpha = np.clip(warped[3:4], 0.0, 1.0)
    out = alpha * warped[:3] + (1.0 - alpha) * face.image.astype(np.float64)
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return (out, alpha[0]) if return_alpha else out


# ---------------------------------------------------------------------------
# resampling

def cubic_kernel(x, a: float = -0.5):
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def _reflect(idx: np.ndarray, n: int) -> np.ndarray:
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.abs(idx) % period
    return np.where(idx >= n, period - idx, idx)


def bicubic_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-normalised (n_out, n_in) Catmull-Rom resampling matrix, antialiased on downscale."""
    s = n_in / n_out
    stretch = max(s, 1.0)
    support = 2.0 * stretch
    mat = np.zeros((n_out, n_in))
    for i in range(n_out):
        c = (i + 0.5) * s - 0.5
        taps = np.arange(int(np.floor(c - support)) + 1, int(np.ceil(c + support)))
        wts = cubic_kernel((taps - c) / stretch)
        wts /= wts.sum()
        np.add.at(mat[i], _reflect(taps, n_in), wts)
    return mat


def resize_bicubic(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resample a (C, H, W) array; no clamping."""
    wy = bicubic_matrix(img.shape[-2], out_h)
    wx = bicubic_matrix(img.shape[-1], out_w)
    out = np.einsum("oh,chw,pw->cop", wy, img.astype(np.float64), wx)
    return out.astype(np.float32)


def degrade(hr: np.ndarray, scale: int) -> np.ndarray:
    if scale not in (4, 8):
        raise ValueError(f"scale must be 4 or 8, got {scale}")
    h, w = hr.shape[-2:]
    if h % scale or w % scale:
        raise ValueError(f"spatial dims {(h, w)} not divisible by scale {scale}")
    return np.clip(resize_bicubic(hr, h // scale, w // scale), 0.0, 1.0)


# ---------------------------------------------------------------------------
# priors

def render_landmark_heatmaps(landmarks, size: tuple[int, int], sigma: float = HEATMAP_SIGMA,
                             source_size: tuple[int, int] | None = None) -> np.ndarray:
    """Peak-1 Gaussian per landmark; coordinates rescaled from ``source_size`` if given."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    pts = np.asarray(landmarks, dtype=np.float64).reshape(-1, 2)
    h, w = size
    if source_size is not None:
        sh, sw = source_size
        pts = (pts + 0.5) * [w / sw, h / sh] - 0.5
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    d2 = (xx[None] - pts[:, 0, None, None]) ** 2 + (yy[None] - pts[:, 1, None, None]) ** 2
    return np.exp(-d2 / (2 * sigma * sigma)).astype(np.float32)


def parsing_probabilities(parsing: np.ndarray, num_classes: int, size: int = PRIOR_SIZE) -> np.ndarray:
    """One-hot labels box-averaged to ``size``; each pixel's distribution sums to 1."""
    h, w = parsing.shape
    onehot = (parsing[None] == np.arange(num_classes)[:, None, None]).astype(np.float64)
    fy, fx = h // size, w // size
    probs = onehot.reshape(num_classes, size, fy, size, fx).mean(axis=(2, 4))
    return probs.astype(np.float32)


def make_sample(face: FaceRecord, template: MaskTemplate, scale: int,
                sigma: float = HEATMAP_SIGMA, prior_size: int = PRIOR_SIZE,
                seed: int | None = None) -> PairedSample:
    masked = overlay_mask(face, template)
    lr_masked = degrade(masked, scale)
    lr_clean = degrade(face.image, scale)
    hr = face.image.shape[1:]
    return PairedSample(
        lr_masked=lr_masked,
        lr_clean=lr_clean,
        hr_clean=face.image.astype(np.float32),
        gamma_gt=np.abs(lr_masked - lr_clean),
        landmarks_gt=render_landmark_heatmaps(face.landmarks, (prior_size, prior_size), sigma, hr),
        parsing_gt=parsing_probabilities(face.parsing, face.num_parsing_classes, prior_size),
        scale=scale,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# persistence

@dataclass
class SynthConfig:
    scale: int = 4
    template: str = "surgical"
    num_landmarks: int = DEFAULT_LANDMARKS
    num_parsing_classes: int = TOY_PARSING_CLASSES
    sigma: float = HEATMAP_SIGMA
    prior_size: int = PRIOR_SIZE


def sample_seeds(seed: int, count: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(count)]


def synthesize(seeds, config: SynthConfig) -> list[PairedSample]:
    template = load_mask_template(config.template)
    out = []
    for s in seeds:
        face = make_toy_face(s, config.num_landmarks, config.num_parsing_classes)
        out.append(make_sample(face, template, config.scale, config.sigma, config.prior_size, seed=s))
    return out


def make_manifest(seeds, config: SynthConfig) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "scale": config.scale,
        "template": config.template,
        "config": {k: getattr(config, k) for k in config.__dataclass_fields__},
        "seeds": [int(s) for s in seeds],
    }


def manifest_hash(manifest: dict) -> str:
    body = {k: v for k, v in manifest.items() if k != "hash"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def _to_png(path: Path, img: np.ndarray) -> None:
    q = np.round(np.clip(img, 0, 1) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(q, "RGB").save(path, format="PNG")


def _from_png(path: Path) -> np.ndarray:
    return (np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0).transpose(2, 0, 1).copy()


_PNG_FIELDS = ("lr_masked", "lr_clean", "hr_clean")
_RAW_FIELDS = ("gamma_gt", "landmarks_gt", "parsing_gt")


def write_dataset(records, out_dir, manifest: dict) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = dict(manifest)
    entries = []
    for i, rec in enumerate(records):
        sid = f"{i:05d}"
        files = {}
        for name in _PNG_FIELDS:
            files[name] = f"{sid}_{name}.png"
            _to_png(out / files[name], getattr(rec, name))
        for name in _RAW_FIELDS:
            files[name] = f"{sid}_{name}.raw"
            rawio.save_array(out / files[name], getattr(rec, name).astype(np.float32))
        entries.append({"id": sid, "seed": rec.seed, "scale": rec.scale, "files": files})
    manifest["samples"] = entries
    manifest["hash"] = manifest_hash(manifest)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.is_file():
        raise DatasetError(f"missing dataset manifest: {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"corrupt manifest {path}: {exc}") from exc
    if not isinstance(manifest, dict) or "samples" not in manifest:
        raise DatasetError(f"corrupt manifest {path}: no sample list")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset format version {manifest.get('format_version')!r} "
                           f"(expected {FORMAT_VERSION})")
    return manifest


def load_dataset(directory) -> list[PairedSample]:
    directory = Path(directory)
    manifest = read_manifest(directory)
    samples = []
    for entry in manifest["samples"]:
        files = entry["files"]
        try:
            kw = {n: _from_png(directory / files[n]) for n in _PNG_FIELDS}
            kw.update({n: rawio.load_array(directory / files[n]) for n in _RAW_FIELDS})
        except (OSError, KeyError, rawio.RawFormatError) as exc:
            raise DatasetError(f"cannot read sample {entry.get('id')} in {directory}: {exc}") from exc
        samples.append(PairedSample(scale=entry["scale"], seed=entry.get("seed"), **kw))
    return samples
