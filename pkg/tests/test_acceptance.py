"""Acceptance gate: one test per criterion, each recorded for the terminal summary."""
import dataclasses
import hashlib
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_RESULTS

from maskedsr.config import ModelConfig
from maskedsr.dataset import SynthConfig, load_dataset, make_manifest, sample_seeds, synthesize, write_dataset
from maskedsr.losses import DE_TERMS, FSR_TERMS, LossWeights, total_denoise_loss, total_fsr_loss
from maskedsr.trainer import (
    TrainConfig,
    bicubic_baseline_psnr,
    evaluate,
    fit,
    generator_terms,
    run_ablation,
    stack_samples,
)


def record(criterion: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS[criterion] = (bool(ok), detail)
    assert ok, detail


# ---------------------------------------------------------------------------
# 1-3: losses


def test_criterion_1_loss_golden_suite():
    here = Path(__file__).parent
    t0 = time.perf_counter()
    code = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", str(here / "test_losses.py"),
                           "-k", "TestGolden or TestComposite or TestWeights"],
                          cwd=here.parent, capture_output=True).returncode
    elapsed = time.perf_counter() - t0
    record("1 loss golden suite", code == 0 and elapsed < 10,
           f"golden/brute-force loss tests exit={int(code)} in {elapsed:.2f}s (limit 10s)")


def test_criterion_2_gradient_verification(tiny_config):
    from test_generator import generator_fd_error
    from test_losses import loss_gradient_errors

    t0 = time.perf_counter()
    errors = loss_gradient_errors()
    errors["generator"] = generator_fd_error(tiny_config)
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = len(errors) == 9 and all(e < 1e-4 for e in errors.values()) and elapsed < 120
    record("2 gradient verification", ok,
           f"8 losses + generator, worst {worst}={errors[worst]:.2e} (limit 1e-4) in {elapsed:.1f}s")


@pytest.mark.slow
def test_criterion_3_composite_exactness(smoke_run):
    ones = {n: 1.0 for n in DE_TERMS + FSR_TERMS}
    de, fsr = total_denoise_loss(ones), total_fsr_loss(ones)
    w = LossWeights()
    worst = 0.0
    for rec in smoke_run["records"]:
        t = rec["terms"]
        l_de = math.fsum(a * t[n] for n, a in zip(DE_TERMS, w.lambda1))
        l_fsr = math.fsum(a * t[n] for n, a in zip(FSR_TERMS, w.lambda2))
        for logged, ref in ((rec["l_de"], l_de), (rec["l_fsr"], l_fsr), (rec["l_total"], l_de + l_fsr)):
            worst = max(worst, abs(logged - ref) / max(abs(ref), 1e-300))
    ok = de == 12.65 and fsr == 3.111 and worst <= 1e-9
    record("3 composite exactness", ok,
           f"L_de={de}, L_fsr={fsr}; logged totals worst rel err {worst:.1e} over {len(smoke_run['records'])} steps")


# ---------------------------------------------------------------------------
# 4: WGAN-GP


def test_criterion_4_wgan_gp_oracle():
    from maskedsr.critic import ETA, critic_loss, gradient_penalty

    g = torch.Generator().manual_seed(0)
    real = torch.rand(2, 3, 4, 4, generator=g, dtype=torch.float64)
    fake = torch.rand(2, 3, 4, 4, generator=g, dtype=torch.float64)
    n = real[0].numel()
    unit = gradient_penalty(lambda x: x.flatten(1).sum(1) / math.sqrt(n), real, fake).item()
    lin = gradient_penalty(lambda x: 2 * x.flatten(1).sum(1), real, fake).item()
    zero = lambda x: torch.zeros(x.shape[0], dtype=x.dtype)
    zero_loss, _ = critic_loss(zero, real, fake)
    ok = abs(unit) < 1e-10 and abs(lin - (2 * math.sqrt(n) - 1) ** 2) < 1e-6 and ETA == 0.1 \
        and abs(zero_loss.item() - 0.1) < 1e-15
    record("4 WGAN-GP oracle", ok,
           f"unit critic GP={unit:.1e}; 2*sum critic GP={lin:.6f} vs {(2 * math.sqrt(n) - 1) ** 2:.6f}; "
           f"eta={ETA}, zero-critic loss={zero_loss.item()}")


# ---------------------------------------------------------------------------
# 5: architecture


def test_criterion_5_architecture_invariants(tiny_config):
    from maskedsr.blocks import ChannelAttention
    from maskedsr.denoiser import Denoiser
    from maskedsr.superres import Generator

    checks = {}
    x = torch.rand(2, 3, 32, 32)
    out = Denoiser(tiny_config)(x)
    checks["zero-init residual identity"] = torch.equal(out.lr_denoised, x)

    torch.manual_seed(1)
    g = Generator(tiny_config)
    with torch.no_grad():
        for p in g.parameters():
            p.normal_(0, 0.5)
        den, trace = g(torch.randn(2, 3, 32, 32) * 3)
    checks["gamma >= 0"] = bool((den.gamma >= 0).all())
    checks["parsing sums to 1"] = float((trace.prior.parsing.sum(1) - 1).abs().max()) <= 1e-6
    checks["x4 32->128"] = trace.sr.shape[-2:] == (128, 128)
    _, t8 = Generator(dataclasses.replace(tiny_config, scale=8))(torch.rand(1, 3, 16, 16))
    checks["x8 16->128"] = t8.sr.shape[-2:] == (128, 128)
    w = ChannelAttention(16, 4).weights(torch.randn(4, 16, 3, 3) * 10)
    checks["attention in (0,1)"] = bool(((w > 0) & (w < 1)).all())
    failed = [k for k, v in checks.items() if not v]
    record("5 architecture invariants", not failed, "all hold" if not failed else f"failed: {failed}")


# ---------------------------------------------------------------------------
# 6: metrics


def test_criterion_6_metric_oracles():
    import scipy.linalg

    from maskedsr.metrics import fid, psnr, ssim

    t0 = time.perf_counter()
    a = np.random.default_rng(0).uniform(0, 0.5, (64, 64))
    p = psnr(a + 16 / 255, a)
    s = ssim(a, a)
    rng = np.random.default_rng(1)
    d = 4
    m1, m2 = rng.normal(size=(d, d)), rng.normal(size=(d, d))
    c1, c2 = m1 @ m1.T + 0.5 * np.eye(d), m2 @ m2.T + 0.5 * np.eye(d)
    mu1, mu2 = rng.normal(size=d), rng.normal(size=d)
    x, y = rng.multivariate_normal(mu1, c1, 10_000), rng.multivariate_normal(mu2, c2, 10_000)
    closed = (mu1 - mu2) @ (mu1 - mu2) + np.trace(c1 + c2 - 2 * np.real(scipy.linalg.sqrtm(c1 @ c2)))
    f = fid(x, y)
    same = fid(x, x)
    elapsed = time.perf_counter() - t0
    ok = abs(p - 20 * math.log10(255 / 16)) < 1e-6 and s == 1.0 and abs(f - closed) / closed < 0.05 \
        and abs(same) < 1e-6 and elapsed < 60
    record("6 metric oracles", ok,
           f"PSNR={p:.6f} dB; SSIM(a,a)={s}; FID={f:.4f} vs closed form {closed:.4f} "
           f"({abs(f - closed) / closed:.2%}); FID(S,S)={same:.1e}; {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 7: training smoke run (default widths)


@pytest.fixture(scope="module")
def smoke_run(smoke_dataset, tmp_path_factory):
    torch.set_num_threads(1)
    cfg = TrainConfig(dataset=str(smoke_dataset), out_dir=str(tmp_path_factory.mktemp("smoke_run")),
                      steps=300, batch_size=8, n_critic=1, seed=0, checkpoint_every=0)
    t0 = time.perf_counter()
    state, records = fit(cfg)
    elapsed = time.perf_counter() - t0
    samples = load_dataset(smoke_dataset)
    return {"state": state, "records": records, "elapsed": elapsed, "samples": samples,
            "report": evaluate(state, samples), "baseline": bicubic_baseline_psnr(samples)}


@pytest.mark.slow
def test_criterion_7_training_smoke(smoke_run):
    recs, state = smoke_run["records"], smoke_run["state"]
    first = np.mean([r["l_total"] for r in recs[:10]])
    last = np.mean([r["l_total"] for r in recs[-10:]])
    psnr, base = smoke_run["report"].mean_psnr, smoke_run["baseline"]

    # (c) joint-path probe: gradient of L_fsr alone on the trained generator
    data = stack_samples(smoke_run["samples"])
    weights = state.config.effective_weights()
    gen = state.generator
    gen.train()
    gen.zero_grad()
    den, trace = gen(data["lr_masked"])
    total_fsr_loss(generator_terms(state, data, den, trace), weights).backward()
    den_grad = max(float(p.grad.abs().max()) for p in gen.denoiser.parameters() if p.grad is not None)
    gen.zero_grad()

    a, b, c = last < 0.5 * first, psnr >= base + 1.0, den_grad > 0
    ok = a and b and c and len(recs) == 300 and smoke_run["elapsed"] <= 15 * 60
    record("7 training smoke", ok,
           f"(a) L_total {first:.1f} -> {last:.1f} (ratio {last / first:.3f}); "
           f"(b) PSNR-Y {psnr:.2f} dB vs bicubic {base:.2f} dB (+{psnr - base:.2f}); "
           f"(c) max |dL_fsr/d denoiser| = {den_grad:.2e}; {smoke_run['elapsed']:.0f}s")


@pytest.mark.slow
def test_trained_denoiser_beats_masked_input(smoke_run):
    from maskedsr.losses import pixel_loss

    data = stack_samples(smoke_run["samples"])
    gen = smoke_run["state"].generator.eval()
    with torch.no_grad():
        den = gen.denoiser(data["lr_masked"])
    trained = pixel_loss(den.lr_denoised, data["lr_clean"]).item()
    raw = pixel_loss(data["lr_masked"], data["lr_clean"]).item()
    assert trained < raw, f"denoised L1 {trained:.4f} vs masked input {raw:.4f}"


@pytest.mark.slow
def test_trained_prior_finds_nose_tip(smoke_run):
    from maskedsr.dataset import NAMED_LANDMARKS

    data = stack_samples(smoke_run["samples"])
    gen = smoke_run["state"].generator.eval()
    with torch.no_grad():
        _, trace = gen(data["lr_masked"][:1])
    k = NAMED_LANDMARKS.index("nose_tip")
    pred = np.unravel_index(int(trace.prior.landmarks[0, k].argmax()), (32, 32))
    gt = np.unravel_index(int(data["landmarks_gt"][0, k].argmax()), (32, 32))
    assert max(abs(pred[0] - gt[0]), abs(pred[1] - gt[1])) <= 2, f"predicted {pred}, truth {gt}"


# ---------------------------------------------------------------------------
# 8: ablation harness


@pytest.mark.slow
def test_criterion_8_ablation_harness(smoke_dataset, tmp_path):
    import csv
    import json

    from maskedsr.trainer import ABLATION_AXES

    model = ModelConfig(est_channels=8, est_depth=3, den_channels=8, sr_channels=16, coarse_blocks=1,
                        prior_blocks=1, critic_base=8, feature_widths=(8, 8, 16, 16), embed_channels=4,
                        embed_dim=32)
    base = TrainConfig(dataset=str(smoke_dataset), steps=2, batch_size=4, checkpoint_every=0,
                       identity_pretrain_steps=5, model=model)
    rows = run_ablation(base, list(ABLATION_AXES), tmp_path)
    with open(tmp_path / "ablation.csv") as fh:
        table = list(csv.reader(fh))
    header_ok = table[0] == ["config", "psnr_db", "ssim", "fid", "params"]
    well_formed = len(table) == 7 and all(len(r) == 5 and all(float(v) == float(v) for v in r[1:])
                                          for r in table[1:])

    logs_ok = True
    for axis, terms in ABLATION_AXES.items():
        rec = json.loads((tmp_path / axis / "metrics.jsonl").read_text().splitlines()[0])
        full = json.loads((tmp_path / "full" / "metrics.jsonl").read_text().splitlines()[0])
        logs_ok &= set(full["terms"]) - set(rec["terms"]) == set(terms)
    params = {r["config"]: r["params"] for r in rows}
    attention_ok = params["disable_attention"] < params["full"]
    others_same = all(params[a] == params["full"] for a in ABLATION_AXES if a != "disable_attention")
    ok = header_ok and well_formed and logs_ok and attention_ok and others_same
    record("8 ablation harness", ok,
           f"{len(table) - 1} rows, header ok={header_ok}, disabled terms absent={logs_ok}, "
           f"params full={params['full']} vs no-attention={params['disable_attention']}")


# ---------------------------------------------------------------------------
# 9: determinism and persistence


def test_criterion_9_determinism_and_persistence(tmp_path, tiny_config):
    cfg = SynthConfig(num_landmarks=5)
    digests = []
    for name in ("a", "b"):
        seeds = sample_seeds(11, 4)
        write_dataset(synthesize(seeds, cfg), tmp_path / name, make_manifest(seeds, cfg))
        h = hashlib.sha256()
        for f in sorted((tmp_path / name).iterdir()):
            h.update(f.name.encode())
            h.update(f.read_bytes())
        digests.append(h.hexdigest())
    synth_ok = digests[0] == digests[1]

    torch.set_num_threads(1)
    base = TrainConfig(dataset=str(tmp_path / "a"), steps=3, batch_size=2, checkpoint_every=0,
                       identity_pretrain_steps=2, model=tiny_config)
    _, full = fit(dataclasses.replace(base, out_dir=str(tmp_path / "full")))
    fit(dataclasses.replace(base, out_dir=str(tmp_path / "part"), steps=2))
    _, rest = fit(dataclasses.replace(base, out_dir=str(tmp_path / "part")), resume=True)
    resume_ok = rest == full[2:]

    from maskedsr.trainer import load_state, save_state

    save_state(tmp_path / "again.bin", load_state(tmp_path / "part" / "checkpoint.bin"))
    bytes_ok = (tmp_path / "again.bin").read_bytes() == (tmp_path / "part" / "checkpoint.bin").read_bytes()
    record("9 determinism & persistence", synth_ok and resume_ok and bytes_ok,
           f"synthesis byte-identical={synth_ok}; resumed step-3 report identical={resume_ok}; "
           f"checkpoint re-save byte-identical={bytes_ok}")
