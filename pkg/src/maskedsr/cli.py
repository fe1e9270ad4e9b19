"""Command-line entry point: synth, train, eval, infer, ablate.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ModelConfig, dataclass_from_section, dataclass_to_section, read_ini, write_ini
from .dataset import SynthConfig

log = logging.getLogger("maskedsr")

OUT_ENV = "MASKEDSR_OUT"


class CliError(RuntimeError):
    pass


def default_out(sub: str) -> str:
    return str(Path(os.environ.get(OUT_ENV, "runs")) / sub)


# ---------------------------------------------------------------------------
# config assembly

def _load_sections(path) -> dict:
    if path is None:
        return {}
    if not Path(path).is_file():
        raise CliError(f"config file not found: {path}")
    return read_ini(path)


def build_train_config(args) -> "TrainConfig":
    from .losses import LossWeights
    from .trainer import TrainConfig

    sections = _load_sections(getattr(args, "config", None))
    model = dataclass_from_section(ModelConfig, sections.get("model", {}))
    weights = _weights_from_section(LossWeights, sections.get("loss", {}))
    train_keys = {f.name for f in dataclasses.fields(TrainConfig)} - {"model", "weights"}
    raw_train = {k: v for k, v in sections.get("train", {}).items()}
    base = TrainConfig(model=model, weights=weights)
    cfg = _train_from_section(base, raw_train, train_keys)

    overrides = {}
    for key in ("dataset", "eval_dataset", "steps", "batch_size", "n_critic", "lr", "seed",
                "checkpoint_every", "eval_every", "identity_pretrain_steps", "feature_weights",
                "pixel_reduction"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    for axis in ("disable_style", "disable_perceptual", "disable_identity", "disable_smooth", "disable_attention"):
        if getattr(args, axis, False):
            overrides[axis] = True
    if getattr(args, "out", None):
        overrides["out_dir"] = args.out
    elif "out_dir" not in raw_train:
        overrides["out_dir"] = default_out(args.command)
    if getattr(args, "scale", None) is not None:
        model = dataclasses.replace(cfg.model, scale=args.scale)
        overrides["model"] = model
    return dataclasses.replace(cfg, **overrides)


def _weights_from_section(cls, section: dict):
    vals = {}
    for key, raw in section.items():
        if key in ("lambda1", "lambda2"):
            vals[key] = tuple(float(v) for v in raw.strip("()[] ").split(","))
        else:
            vals[key] = float(raw)
    return cls(**vals)


def _train_from_section(base, raw: dict, keys: set):
    unknown = set(raw) - keys
    if unknown:
        raise CliError(f"unknown [train] keys: {sorted(unknown)}")
    from .trainer import TrainConfig

    hints = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    vals = {}
    for k, v in raw.items():
        hint = str(hints[k])
        if v.strip().lower() in ("none", "") and "None" in hint:
            vals[k] = None
        elif hint.startswith("bool"):
            vals[k] = v.strip().lower() in ("1", "true", "yes", "on")
        elif hint.startswith("int"):
            vals[k] = int(v)
        elif hint.startswith("float"):
            vals[k] = float(v)
        else:
            vals[k] = v
    return dataclasses.replace(base, **vals)


def train_config_ini(cfg) -> str:
    w = cfg.weights
    loss = {"alpha": str(w.alpha), "lambda1": ", ".join(map(str, w.lambda1)),
            "lambda2": ", ".join(map(str, w.lambda2)), "eta": str(w.eta), "mu": str(w.mu), "nu": str(w.nu)}
    return write_ini({"train": dataclass_to_section(cfg), "model": dataclass_to_section(cfg.model), "loss": loss})


def _echo(out_dir, text: str) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(text)


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    from .dataset import make_manifest, sample_seeds, synthesize, write_dataset

    sections = _load_sections(args.config)
    cfg = dataclass_from_section(SynthConfig, sections.get("synth", {}))
    updates = {k: v for k, v in (("scale", args.scale), ("template", args.mask_template),
                                 ("num_landmarks", args.num_landmarks),
                                 ("num_parsing_classes", args.parsing_classes)) if v is not None}
    cfg = dataclasses.replace(cfg, **updates)
    if cfg.scale not in (4, 8):
        raise CliError(f"scale must be 4 or 8, got {cfg.scale}")
    text = write_ini({"synth": dataclass_to_section(cfg), "run": {"seed": str(args.seed), "count": str(args.count)}})
    if args.print_config:
        print(text, end="")
        return 0
    out = args.out or default_out("synth")
    seeds = sample_seeds(args.seed, args.count)
    manifest = write_dataset(synthesize(seeds, cfg), out, make_manifest(seeds, cfg))
    _echo(out, text)
    print(f"wrote {len(seeds)} samples to {out} (manifest {manifest['hash'][:12]})")
    return 0


def cmd_train(args) -> int:
    from .trainer import fit

    cfg = build_train_config(args)
    text = train_config_ini(cfg)
    if args.print_config:
        print(text, end="")
        return 0
    if cfg.dataset is None or not (Path(cfg.dataset) / "manifest.json").is_file():
        raise CliError(f"dataset not found: {cfg.dataset}")
    _echo(cfg.out_dir, text)
    state, records = fit(cfg, resume=args.resume)
    last = records[-1] if records else None
    print(f"trained to step {state.step}; checkpoint in {cfg.out_dir}"
          + (f"; last L_total {last['l_total']:.4f}" if last else ""))
    return 0


def _load_image(path) -> np.ndarray:
    from PIL import Image

    try:
        img = Image.open(path).convert("RGB")
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read image {path}: {exc}") from exc
    return (np.asarray(img, dtype=np.float32) / 255.0).transpose(2, 0, 1).copy()


def _save_png(path, img: np.ndarray) -> None:
    from PIL import Image

    q = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(q, "RGB").save(path, format="PNG")


def comparison_grid(lr_input: np.ndarray, output: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """input (nearest-upsampled) | output | ground truth, side by side."""
    h, w = truth.shape[1:]
    f = h // lr_input.shape[1]
    up = np.repeat(np.repeat(lr_input, f, axis=1), f, axis=2)
    return np.concatenate([up, np.clip(output, 0, 1), truth], axis=2)


def cmd_eval(args) -> int:
    from .dataset import load_dataset, read_manifest
    from .trainer import evaluate, load_state, restore, stack_samples

    state = load_state(args.checkpoint)
    manifest = read_manifest(args.dataset)
    if manifest["scale"] != state.config.model.scale:
        raise CliError(f"checkpoint is x{state.config.model.scale} but dataset is x{manifest['scale']}")
    samples = load_dataset(args.dataset)
    out = Path(args.out or default_out("eval"))
    (out / "grids").mkdir(parents=True, exist_ok=True)
    report = evaluate(state, samples)
    sr = restore(state, stack_samples(samples)["lr_masked"]).clamp(0, 1).numpy()
    for i, s in enumerate(samples):
        _save_png(out / "grids" / f"{i:05d}.png", comparison_grid(s.lr_masked, sr[i], s.hr_clean))
    report.write_csv(out / "metrics.csv")
    report.write_json(out / "metrics.json")
    _echo(out, train_config_ini(state.config))
    print(f"mean PSNR {report.mean_psnr:.3f} dB, mean SSIM {report.mean_ssim:.4f}, FID {report.fid}")
    return 0


def cmd_infer(args) -> int:
    import torch

    from .dataset import resize_bicubic
    from .trainer import load_state, restore

    state = load_state(args.checkpoint)
    img = _load_image(args.image)
    n = state.config.model.lr_size
    if img.shape[1:] != (n, n):
        log.warning("input %s is %dx%d; resizing to %dx%d", args.image, img.shape[2], img.shape[1], n, n)
        img = np.clip(resize_bicubic(img, n, n), 0, 1)
    sr = restore(state, torch.from_numpy(img)[None]).clamp(0, 1)[0].numpy()
    out = Path(args.out or default_out("infer"))
    if out.suffix.lower() != ".png":
        out.mkdir(parents=True, exist_ok=True)
        out = out / f"{Path(args.image).stem}_sr.png"
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
    _save_png(out, sr)
    print(f"wrote {out}")
    return 0


def cmd_ablate(args, parser) -> int:
    from .trainer import ABLATION_AXES, run_ablation

    if args.axes.strip() == "all":
        axes = list(ABLATION_AXES)
    else:
        axes = [a.strip().replace("-", "_") for a in args.axes.split(",") if a.strip()]
        axes = [a if a.startswith("disable_") else f"disable_{a}" for a in axes]
    bad = [a for a in axes if a not in ABLATION_AXES]
    if bad:
        parser.error(f"unknown axis {bad}; valid axes: {', '.join(sorted(ABLATION_AXES))}")
    cfg = build_train_config(args)
    text = train_config_ini(cfg)
    if args.print_config:
        print(text, end="")
        return 0
    if cfg.dataset is None or not (Path(cfg.dataset) / "manifest.json").is_file():
        raise CliError(f"dataset not found: {cfg.dataset}")
    out = args.out or default_out("ablate")
    _echo(out, text)
    rows = run_ablation(cfg, axes, out)
    print(f"wrote {Path(out) / 'ablation.csv'} ({len(rows)} rows)")
    return 0


# ---------------------------------------------------------------------------
# parser

def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="sectioned key = value config file")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>)")
    p.add_argument("--dataset")
    p.add_argument("--eval-dataset", dest="eval_dataset")
    p.add_argument("--scale", type=int, choices=(4, 8))
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--n-critic", dest="n_critic", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--identity-pretrain-steps", dest="identity_pretrain_steps", type=int)
    p.add_argument("--feature-weights", dest="feature_weights", help="weight bundle for the feature extractor")
    p.add_argument("--pixel-reduction", dest="pixel_reduction", choices=("mean", "sum"),
                   help="reduction of the pixel L1 term during training")
    for axis in ("style", "perceptual", "identity", "smooth", "attention"):
        p.add_argument(f"--disable-{axis}", dest=f"disable_{axis}", action="store_true")
    p.add_argument("--print-config", action="store_true", help="print the effective config and exit")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskedsr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a paired toy dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--scale", type=int, choices=(4, 8))
    p.add_argument("--out")
    p.add_argument("--mask-template", dest="mask_template", help="builtin name or RGBA PNG with .json anchors")
    p.add_argument("--num-landmarks", dest="num_landmarks", type=int)
    p.add_argument("--parsing-classes", dest="parsing_classes", type=int)
    p.add_argument("--config")
    p.add_argument("--print-config", action="store_true")

    p = sub.add_parser("train", help="joint training")
    _train_flags(p)
    p.add_argument("--resume", action="store_true", help="continue from <out>/checkpoint.bin")

    p = sub.add_parser("eval", help="metrics and comparison grids for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out")

    p = sub.add_parser("infer", help="restore a single image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out")

    p = sub.add_parser("ablate", help="train and compare ablation configurations")
    _train_flags(p)
    p.add_argument("--axes", default="all", help="comma-separated axes or 'all'")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "synth" and args.count <= 0:
        parser.error("--count must be positive")
    handlers = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer}
    try:
        if args.command == "ablate":
            return cmd_ablate(args, parser)
        return handlers[args.command](args)
    except (CliError, OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
