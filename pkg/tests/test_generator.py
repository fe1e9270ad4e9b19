"""Denoiser, super-resolver and full generator."""
import dataclasses

import pytest
import torch

from maskedsr.config import ModelConfig
from maskedsr.denoiser import Denoiser
from maskedsr.superres import CoarseSR, Generator, PriorTensor, SuperResolver

from oracles import param_fd_rel_error


def _randomise(module, seed=0, std=0.2):
    """Replace every parameter (including zero-initialised output layers) with Gaussian noise."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)
    return module


class TestDenoiser:
    def test_zero_init_is_identity(self, tiny_config):
        den = Denoiser(tiny_config)
        x = torch.rand(2, 3, 32, 32)
        out = den(x)
        assert torch.equal(out.lr_denoised, x)
        assert not out.residual.any()

    def test_zero_estimator_output_gives_zero_gamma(self, tiny_config):
        den = Denoiser(tiny_config)
        torch.nn.init.zeros_(den.estimator.out.weight)
        torch.nn.init.zeros_(den.estimator.out.bias)
        assert not den.estimate_noise(torch.rand(1, 3, 32, 32)).any()

    @pytest.mark.parametrize("size", [16, 32])
    def test_shapes(self, tiny_config, size):
        out = _randomise(Denoiser(tiny_config))(torch.rand(2, 3, size, size))
        assert out.gamma.shape == out.lr_denoised.shape == (2, 3, size, size)

    def test_gamma_nonnegative(self, tiny_config):
        den = _randomise(Denoiser(tiny_config), std=1.0)
        for seed in range(3):
            torch.manual_seed(seed)
            assert (den.estimate_noise(torch.randn(2, 3, 16, 16) * 5) >= 0).all()

    def test_errors(self, tiny_config):
        den = Denoiser(tiny_config)
        with pytest.raises(ValueError):
            den(torch.rand(1, 4, 16, 16))
        with pytest.raises(ValueError):
            den.denoise(torch.rand(1, 3, 16, 16), torch.rand(1, 3, 8, 8))

    def test_fd_gradients(self, tiny_config):
        den = _randomise(Denoiser(tiny_config)).double()
        x = torch.rand(2, 3, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
        loss = lambda: (den(x).lr_denoised ** 2).sum()
        assert param_fd_rel_error(den, loss, list(den.parameters())) < 1e-4


class TestSuperResolver:
    @pytest.mark.parametrize("scale,lr", [(4, 32), (8, 16)])
    def test_shape_protocol(self, tiny_config, scale, lr):
        cfg = dataclasses.replace(tiny_config, scale=scale)
        trace = SuperResolver(cfg)(torch.rand(2, 3, lr, lr))
        assert trace.coarse.shape == trace.sr.shape == (2, 3, 128, 128)
        assert trace.prior.parsing.shape == (2, cfg.parsing_classes, 32, 32)
        assert trace.prior.landmarks.shape == (2, cfg.num_landmarks, 32, 32)
        assert trace.fused.shape == (2, cfg.sr_channels + cfg.parsing_classes + cfg.num_landmarks, 32, 32)

    def test_default_widths(self):
        sr = SuperResolver(ModelConfig())
        enc = sr.encode(torch.rand(1, 3, 128, 128))
        assert enc.shape == (1, 64, 32, 32)

    def test_zero_input_zero_coarse(self):
        net = CoarseSR(4, 8, 1)
        for m in net.modules():
            if isinstance(m, torch.nn.Conv2d):
                torch.nn.init.zeros_(m.bias)
        assert not net(torch.zeros(1, 3, 32, 32)).any()

    def test_fresh_model_starts_at_bicubic(self, tiny_config):
        import numpy as np
        from maskedsr.dataset import resize_bicubic

        x = torch.rand(1, 3, 32, 32)
        trace = SuperResolver(tiny_config)(x)
        ref = resize_bicubic(x[0].numpy(), 128, 128)
        np.testing.assert_allclose(trace.coarse[0].detach().numpy(), ref, atol=1e-5)
        assert torch.equal(trace.sr, trace.coarse)

    def test_parsing_normalised_and_heatmaps_in_range(self, tiny_config):
        sr = _randomise(SuperResolver(tiny_config), std=1.0)
        prior = sr(torch.rand(2, 3, 32, 32) * 3).prior
        torch.testing.assert_close(prior.parsing.sum(dim=1), torch.ones(2, 32, 32), atol=1e-6, rtol=0)
        assert (prior.landmarks >= 0).all() and (prior.landmarks <= 1).all()

    def test_fusion_slices(self, tiny_config):
        sr = _randomise(SuperResolver(tiny_config))
        coarse = torch.rand(1, 3, 128, 128)
        enc, prior = sr.encode(coarse), sr.estimate_prior(coarse)
        fused = sr.fuse(enc, prior)
        c = enc.shape[1]
        assert torch.equal(fused[:, :c], enc)
        assert torch.equal(fused[:, c:], prior.stacked)
        torch.testing.assert_close(sr.fuse_and_decode(enc, prior, coarse), coarse + sr.decoder(fused))

    def test_errors(self, tiny_config):
        sr = SuperResolver(tiny_config)
        with pytest.raises(ValueError):
            sr(torch.rand(1, 3, 16, 16))
        with pytest.raises(ValueError):
            sr.estimate_prior(torch.rand(1, 3, 64, 64))
        bad = PriorTensor(torch.rand(1, 4, 16, 16), torch.rand(1, 5, 16, 16))
        with pytest.raises(ValueError):
            sr.fuse(torch.rand(1, 8, 32, 32), bad)
        with pytest.raises(ValueError):
            sr.decoder(torch.rand(1, 3, 32, 32))
        with pytest.raises(ValueError):
            CoarseSR(scale=3)


class TestGenerator:
    def test_end_to_end_shape(self, tiny_config):
        den, trace = Generator(tiny_config)(torch.rand(1, 3, 32, 32))
        assert den.lr_denoised.shape == (1, 3, 32, 32)
        assert trace.sr.shape == (1, 3, 128, 128)

    def test_deterministic_in_eval(self, tiny_config):
        g = _randomise(Generator(tiny_config)).eval()
        x = torch.rand(2, 3, 32, 32)
        assert torch.equal(g(x)[1].sr, g(x)[1].sr)

    def test_joint_path(self, tiny_config):
        g = _randomise(Generator(tiny_config))
        _, trace = g(torch.rand(2, 3, 32, 32))
        trace.sr.square().mean().backward()
        grads = [p.grad for p in g.denoiser.parameters()]
        assert any(gr is not None and gr.abs().sum() > 0 for gr in grads)


def generator_fd_error(tiny_config) -> float:
    """Worst relative FD error over sampled parameters of every generator submodule."""
    cfg = dataclasses.replace(tiny_config, hr_size=32, prior_size=8, num_landmarks=3)
    g = _randomise(Generator(cfg), std=0.3).double()
    x = torch.rand(2, 3, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
    w = torch.rand(2, 3, 32, 32, dtype=torch.float64, generator=torch.Generator().manual_seed(3))

    def loss():
        den, trace = g(x)
        return (trace.sr * w).sum() + den.gamma.sum() + trace.prior.landmarks.sum()

    worst = 0.0
    for i, sub in enumerate((g.denoiser.estimator, g.denoiser.residual, g.superres.coarse,
                             g.superres.prior, g.superres.encoder, g.superres.decoder)):
        worst = max(worst, param_fd_rel_error(g, loss, list(sub.parameters()), picks=2, seed=i))
    return worst


def test_generator_fd_gradients(tiny_config):
    assert generator_fd_error(tiny_config) < 1e-4
