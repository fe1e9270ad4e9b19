import numpy as np
import pytest
import torch

from maskedsr.config import ModelConfig
from maskedsr.features import FeatureExtractor, IdentityEmbedder, pretrained_embedder, toy_identity_batch


@pytest.fixture
def extractor():
    return FeatureExtractor((4, 4, 8, 8), seed=3)


def test_seeded_and_frozen(extractor):
    other = FeatureExtractor((4, 4, 8, 8), seed=3)
    for a, b in zip(extractor.parameters(), other.parameters()):
        assert torch.equal(a, b) and not a.requires_grad


def test_identical_images_identical_features(extractor):
    x = torch.rand(1, 3, 16, 16)
    a = extractor.extract(x, ("conv3",))["conv3"]
    b = extractor.extract(x.clone(), ("conv3",))["conv3"]
    assert torch.equal(a, b)


def test_two_layers_shapes(extractor):
    out = extractor.extract(torch.rand(2, 3, 16, 16), ("conv1", "conv4"))
    assert list(out) == ["conv1", "conv4"]
    assert out["conv1"].shape == (2, 4, 16, 16)
    assert out["conv4"].shape == (2, 8, 4, 4)


def test_one_pixel_changes_features(extractor):
    x = torch.rand(1, 3, 16, 16)
    y = x.clone()
    y[0, 1, 5, 7] += 0.3
    fx = extractor.extract(x, extractor.layer_ids)
    fy = extractor.extract(y, extractor.layer_ids)
    assert any(not torch.equal(fx[k], fy[k]) for k in fx)


def test_unknown_layer(extractor):
    with pytest.raises(KeyError):
        extractor.extract(torch.rand(1, 3, 8, 8), ("relu5_1",))


def test_weight_file_round_trip(extractor, tmp_path):
    extractor.save_weights(tmp_path / "w.bin")
    loaded = FeatureExtractor((4, 4, 8, 8), seed=99, weight_file=tmp_path / "w.bin")
    x = torch.rand(1, 3, 16, 16)
    assert torch.equal(extractor.pooled(x), loaded.pooled(x))


def test_embedder_shape_and_errors():
    emb = IdentityEmbedder(4, 16, 32)
    assert emb(torch.rand(3, 3, 32, 32)).shape == (3, 16)
    with pytest.raises(ValueError):
        emb(torch.rand(1, 3, 16, 16))


def test_identity_batch_labels():
    x, y = toy_identity_batch([1, 2], 3, seed=0, hr_size=64)
    assert x.shape == (6, 3, 64, 64)
    assert y.tolist() == [0, 0, 0, 1, 1, 1]


def test_pretrained_embedder_separates_identities():
    cfg = ModelConfig(embed_channels=4, embed_dim=16)
    state = torch.get_rng_state()
    emb = pretrained_embedder(cfg, steps=60, seed=0)
    assert torch.equal(torch.get_rng_state(), state)
    assert not any(p.requires_grad for p in emb.parameters())
    # identities seen in pretraining: same-identity views sit closer than different identities
    x, y = toy_identity_batch(np.arange(4) + 10_000, 4, seed=0)
    with torch.no_grad():
        e = emb(x)
    d = torch.cdist(e, e)
    same = y[:, None] == y[None, :]
    off_diag = ~torch.eye(len(y), dtype=torch.bool)
    assert d[same & off_diag].mean() < d[~same].mean()
