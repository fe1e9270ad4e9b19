"""Joint adversarial training, evaluation, ablations and model accounting."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import checkpoint as ckpt
from .config import ModelConfig
from .critic import Critic, adversarial_generator_loss, critic_loss
from .dataset import DatasetError, PairedSample, load_dataset
from .features import PERCEPTUAL_LAYER, STYLE_LAYERS, FeatureExtractor, pretrained_embedder
from .losses import (
    PIXEL_REDUCTIONS,
    LossReport,
    LossWeights,
    asym_loss,
    face_prior_loss,
    identity_loss,
    perceptual_loss,
    pixel_loss,
    smooth_loss,
    style_loss,
    total_denoise_loss,
    total_fsr_loss,
    tv_loss,
)
from .metrics import MetricsReport, fid, psnr_y, ssim_y
from .superres import Generator, PriorTensor

log = logging.getLogger(__name__)

# ablation switch -> loss terms it removes
ABLATION_AXES = {
    "disable_style": ("style",),
    "disable_perceptual": ("per_lr", "per_hr"),
    "disable_identity": ("identity",),
    "disable_smooth": ("smooth_lr", "smooth_hr"),
    "disable_attention": (),
}
LOG_NAME = "metrics.jsonl"
CHECKPOINT_NAME = "checkpoint.bin"


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    dataset: str | None = None
    eval_dataset: str | None = None
    out_dir: str = "runs/train"
    steps: int = 300
    batch_size: int = 8
    n_critic: int = 1
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    checkpoint_every: int = 100
    eval_every: int = 0
    identity_pretrain_steps: int = 60
    feature_weights: str | None = None
    # unreduced L1 keeps the pixel term on the scale of the summed smooth/TV terms
    pixel_reduction: str = "sum"
    disable_style: bool = False
    disable_perceptual: bool = False
    disable_identity: bool = False
    disable_smooth: bool = False
    disable_attention: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        for name in ("steps", "batch_size", "n_critic"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.pixel_reduction not in PIXEL_REDUCTIONS:
            raise ValueError(f"pixel_reduction must be one of {PIXEL_REDUCTIONS}")
        if self.model.attention == self.disable_attention:
            self.model = dataclasses.replace(self.model, attention=not self.disable_attention)

    def disabled_terms(self) -> tuple[str, ...]:
        return tuple(t for axis, terms in ABLATION_AXES.items() if getattr(self, axis) for t in terms)

    def effective_weights(self) -> LossWeights:
        return self.weights.without(*self.disabled_terms())

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        model = ModelConfig(**{**d.pop("model", {})})
        model.feature_widths = tuple(model.feature_widths)
        w = d.pop("weights", {})
        weights = LossWeights(**{**w, **{k: tuple(w[k]) for k in ("lambda1", "lambda2") if k in w}})
        return cls(model=model, weights=weights, **d)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class TrainState:
    config: TrainConfig
    generator: Generator
    critic: Critic
    extractor: FeatureExtractor
    embedder: nn.Module
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    rng: torch.Generator
    step: int = 0


# ---------------------------------------------------------------------------
# accounting

def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def count_multiadds(model: nn.Module, input_shape) -> int:
    """Multiply-accumulates of conv and linear layers for one input of ``input_shape``."""
    layers = [m for m in model.modules() if isinstance(m, (nn.Conv2d, nn.Linear))]
    if not layers:
        return 0
    total = 0

    def conv_hook(m, inp, out):
        nonlocal total
        kh, kw = m.kernel_size
        total += out[0].numel() * (m.in_channels // m.groups) * kh * kw

    def linear_hook(m, inp, out):
        nonlocal total
        total += (out[0].numel() // m.out_features) * m.in_features * m.out_features

    handles = [m.register_forward_hook(conv_hook if isinstance(m, nn.Conv2d) else linear_hook) for m in layers]
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            dtype = next(model.parameters()).dtype
            model(torch.zeros((1, *input_shape), dtype=dtype))
    finally:
        for h in handles:
            h.remove()
        model.train(was_training)
    return int(total)


# ---------------------------------------------------------------------------
# data

def stack_samples(samples: list[PairedSample]) -> dict[str, torch.Tensor]:
    keys = ("lr_masked", "lr_clean", "hr_clean", "gamma_gt", "landmarks_gt", "parsing_gt")
    return {k: torch.from_numpy(np.stack([getattr(s, k) for s in samples]).astype(np.float32)) for k in keys}


def sample_batch(data: dict[str, torch.Tensor], batch_size: int, rng: torch.Generator) -> dict[str, torch.Tensor]:
    n = len(data["lr_masked"])
    idx = torch.randperm(n, generator=rng)[: min(batch_size, n)]
    return {k: v[idx] for k, v in data.items()}


# ---------------------------------------------------------------------------
# state

def _optimizers(cfg: TrainConfig, gen: nn.Module, critic: nn.Module):
    betas = (cfg.beta1, cfg.beta2)
    return (torch.optim.Adam(gen.parameters(), lr=cfg.lr, betas=betas),
            torch.optim.Adam(critic.parameters(), lr=cfg.lr, betas=betas))


def init_state(cfg: TrainConfig) -> TrainState:
    torch.manual_seed(cfg.seed)
    gen = Generator(cfg.model)
    critic = Critic.from_config(cfg.model)
    extractor = FeatureExtractor.from_config(cfg.model, cfg.feature_weights)
    embedder = pretrained_embedder(cfg.model, cfg.identity_pretrain_steps, cfg.seed)
    opt_g, opt_d = _optimizers(cfg, gen, critic)
    rng = torch.Generator().manual_seed(cfg.seed)
    return TrainState(cfg, gen, critic, extractor, embedder, opt_g, opt_d, rng)


def save_state(path, state: TrainState) -> None:
    arrays = {}
    for prefix, mod in (("generator", state.generator), ("critic", state.critic),
                        ("extractor", state.extractor), ("embedder", state.embedder)):
        arrays.update(ckpt.module_arrays(prefix, mod))
    g_arrays, g_groups = ckpt.optimizer_arrays("opt_g", state.opt_g)
    d_arrays, d_groups = ckpt.optimizer_arrays("opt_d", state.opt_d)
    arrays.update(g_arrays)
    arrays.update(d_arrays)
    arrays["rng/train"] = state.rng.get_state().numpy()
    trailer = {"format_version": ckpt.VERSION, "step": state.step, "train_config": state.config.to_dict(),
               "opt_g_groups": g_groups, "opt_d_groups": d_groups}
    ckpt.write_checkpoint(path, arrays, trailer)


def load_state(path, config: TrainConfig | None = None) -> TrainState:
    """Rebuild a full training state; ``config`` overrides run-control fields only."""
    arrays, trailer = ckpt.read_checkpoint(path)
    saved = TrainConfig.from_dict(trailer["train_config"])
    cfg = saved if config is None else dataclasses.replace(
        config, model=saved.model, weights=config.weights, seed=saved.seed)
    gen = Generator(cfg.model)
    critic = Critic.from_config(cfg.model)
    extractor = FeatureExtractor.from_config(cfg.model)
    embedder = pretrained_embedder(cfg.model, 0)
    for prefix, mod in (("generator", gen), ("critic", critic), ("extractor", extractor), ("embedder", embedder)):
        ckpt.load_module(prefix, mod, arrays)
    opt_g, opt_d = _optimizers(cfg, gen, critic)
    ckpt.load_optimizer("opt_g", opt_g, arrays, trailer["opt_g_groups"])
    ckpt.load_optimizer("opt_d", opt_d, arrays, trailer["opt_d_groups"])
    rng = torch.Generator()
    rng.set_state(torch.from_numpy(arrays["rng/train"].astype(np.uint8)))
    return TrainState(cfg, gen, critic, extractor, embedder, opt_g, opt_d, rng, int(trailer["step"]))


# ---------------------------------------------------------------------------
# training

def generator_terms(state: TrainState, batch, den, trace) -> dict[str, torch.Tensor]:
    cfg = state.config
    w = cfg.effective_weights()
    off = set(cfg.disabled_terms())
    ex, emb = state.extractor, state.embedder
    prior_gt = PriorTensor(batch["parsing_gt"], batch["landmarks_gt"])
    lr_d, sr = den.lr_denoised, trace.sr
    lazy = {
        "asym": lambda: asym_loss(den.gamma, batch["gamma_gt"], w.alpha),
        "tv": lambda: tv_loss(den.gamma),
        "style": lambda: style_loss(lr_d, batch["lr_clean"], ex, STYLE_LAYERS),
        "per_lr": lambda: perceptual_loss(lr_d, batch["lr_clean"], ex, PERCEPTUAL_LAYER),
        "pixel_lr": lambda: pixel_loss(lr_d, batch["lr_clean"], cfg.pixel_reduction),
        "smooth_lr": lambda: smooth_loss(lr_d),
        "fp": lambda: face_prior_loss(trace.prior, prior_gt, w.mu, w.nu),
        "per_hr": lambda: perceptual_loss(sr, batch["hr_clean"], ex, PERCEPTUAL_LAYER),
        "pixel_hr": lambda: pixel_loss(sr, batch["hr_clean"], cfg.pixel_reduction),
        "smooth_hr": lambda: smooth_loss(sr),
        "identity": lambda: identity_loss(sr, batch["hr_clean"], emb),
        "adv": lambda: adversarial_generator_loss(state.critic, sr),
    }
    return {name: fn() for name, fn in lazy.items() if name not in off}


def _check_finite(terms: dict, step: int) -> None:
    for name, value in terms.items():
        value = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(value):
            raise NonFiniteLossError(f"non-finite loss term {name!r} at step {step}: {value}")


def train_step(state: TrainState, batch: dict[str, torch.Tensor]) -> LossReport:
    """n_critic critic updates on the current fake, then one joint generator update."""
    cfg = state.config
    weights = cfg.effective_weights()
    gen, critic = state.generator, state.critic
    gen.train()
    critic.train()

    den, trace = gen(batch["lr_masked"])
    fake = trace.sr.detach()

    critic.requires_grad_(True)
    for _ in range(cfg.n_critic):
        d_loss, gp = critic_loss(critic, batch["hr_clean"], fake, weights.eta, generator=state.rng)
        _check_finite({"critic": d_loss}, state.step)
        state.opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        state.opt_d.step()

    critic.requires_grad_(False)
    terms = generator_terms(state, batch, den, trace)
    _check_finite(terms, state.step)
    loss = total_denoise_loss(terms, weights) + total_fsr_loss(terms, weights)
    state.opt_g.zero_grad(set_to_none=True)
    if torch.is_tensor(loss) and loss.requires_grad:
        loss.backward()
    state.opt_g.step()
    critic.requires_grad_(True)

    state.step += 1
    return LossReport.from_terms(state.step, {k: v.item() for k, v in terms.items()}, weights,
                                 critic_loss=d_loss.item(), gp=gp.item(), params=count_params(gen))


def _truncate_log(path: Path, keep: int) -> None:
    if not path.exists():
        path.write_text("")
        return
    lines = path.read_text().splitlines(keepends=True)[:keep]
    path.write_text("".join(lines))


def _load_split(path) -> list[PairedSample]:
    if path is None:
        raise DatasetError("no dataset configured")
    if not Path(path).is_dir():
        raise DatasetError(f"dataset directory not found: {path}")
    return load_dataset(path)


def fit(config: TrainConfig, resume: bool = False) -> tuple[TrainState, list[dict]]:
    """Train for ``config.steps`` generator steps, logging one record per step."""
    samples = _load_split(config.dataset)
    data = stack_samples(samples)
    eval_samples = _load_split(config.eval_dataset) if config.eval_dataset else samples
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path, ck_path = out / LOG_NAME, out / CHECKPOINT_NAME

    if resume and ck_path.exists():
        state = load_state(ck_path, config)
        log.info("resuming from step %d", state.step)
    else:
        state = init_state(config)
    _truncate_log(log_path, state.step)

    records = []
    with open(log_path, "a") as fh:
        while state.step < config.steps:
            report = train_step(state, sample_batch(data, config.batch_size, state.rng))
            rec = report.to_record()
            records.append(rec)
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()
            if config.checkpoint_every and state.step % config.checkpoint_every == 0:
                save_state(ck_path, state)
            if config.eval_every and state.step % config.eval_every == 0:
                rep = evaluate(state, eval_samples)
                with open(out / "eval.jsonl", "a") as ef:
                    ef.write(json.dumps({"step": state.step, "mean_psnr": rep.mean_psnr,
                                         "mean_ssim": rep.mean_ssim}) + "\n")
    save_state(ck_path, state)
    return state, records


# ---------------------------------------------------------------------------
# evaluation

@torch.no_grad()
def restore(state: TrainState, lr_masked: torch.Tensor, batch_size: int = 8) -> torch.Tensor:
    """Eval-mode generator output for a batch of masked LR inputs."""
    state.generator.eval()
    outs = [state.generator(lr_masked[i:i + batch_size])[1].sr for i in range(0, len(lr_masked), batch_size)]
    return torch.cat(outs)


@torch.no_grad()
def evaluate(state: TrainState, samples: list[PairedSample], with_fid: bool = True) -> MetricsReport:
    data = stack_samples(samples)
    sr = restore(state, data["lr_masked"]).clamp(0, 1)
    hr = data["hr_clean"]
    rep = MetricsReport(config_hash=state.config.hash())
    for i in range(len(sr)):
        rep.add(f"{i:05d}", psnr_y(sr[i].double().numpy(), hr[i].double().numpy()),
                ssim_y(sr[i].double().numpy(), hr[i].double().numpy()))
    if with_fid and len(sr) >= 2:
        rep.fid = fid(state.extractor.pooled(hr).double().numpy(), state.extractor.pooled(sr).double().numpy())
    return rep


def bicubic_baseline_psnr(samples: list[PairedSample]) -> float:
    """Mean Y-PSNR of bicubic-upsampled masked inputs against the clean HR faces."""
    from .dataset import resize_bicubic

    vals = []
    for s in samples:
        h, w = s.hr_clean.shape[1:]
        up = np.clip(resize_bicubic(s.lr_masked, h, w), 0, 1)
        vals.append(psnr_y(up, s.hr_clean))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# ablations

ABLATION_HEADER = ("config", "psnr_db", "ssim", "fid", "params")


def run_ablation(base: TrainConfig, axes, out_dir) -> list[dict]:
    """One training run per configuration ("full" plus each switched-off axis)."""
    axes = list(axes)
    unknown = [a for a in axes if a not in ABLATION_AXES]
    if unknown:
        raise ValueError(f"unknown ablation axes {unknown}; valid: {sorted(ABLATION_AXES)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs = [("full", {})] + [(a, {a: True}) for a in axes]
    rows = []
    for name, flags in runs:
        cfg = dataclasses.replace(base, out_dir=str(out / name), model=base.model, **flags)
        state, _ = fit(cfg)
        eval_samples = _load_split(cfg.eval_dataset or cfg.dataset)
        rep = evaluate(state, eval_samples)
        rows.append({"config": name, "psnr_db": rep.mean_psnr, "ssim": rep.mean_ssim,
                     "fid": rep.fid, "params": count_params(state.generator)})
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_HEADER, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return rows
