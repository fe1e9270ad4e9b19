
import pytest
import torch

from maskedsr.config import ModelConfig
from maskedsr.dataset import SynthConfig, make_manifest, sample_seeds, synthesize, write_dataset

torch.set_num_threads(1)

ACCEPTANCE_RESULTS: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def tiny_config():
    """Structurally complete generator at toy widths."""
    return ModelConfig(est_channels=4, est_depth=3, den_channels=4, sr_channels=8, coarse_blocks=1,
                       prior_blocks=1, num_landmarks=5, parsing_classes=4, critic_base=4,
                       feature_widths=(4, 4, 8, 8), embed_channels=4, embed_dim=16)


@pytest.fixture(scope="session")
def smoke_dataset(tmp_path_factory):
    """Eight procedural samples at x4, written through the dataset file format."""
    out = tmp_path_factory.mktemp("smoke_data")
    cfg = SynthConfig(scale=4)
    seeds = sample_seeds(0, 8)
    write_dataset(synthesize(seeds, cfg), out, make_manifest(seeds, cfg))
    return out


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Four samples with few landmarks, for quick trainer tests."""
    out = tmp_path_factory.mktemp("small_data")
    cfg = SynthConfig(scale=4, num_landmarks=5)
    seeds = sample_seeds(3, 4)
    write_dataset(synthesize(seeds, cfg), out, make_manifest(seeds, cfg))
    return out


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE_RESULTS, key=lambda n: int(n.split()[0])):
        ok, detail = ACCEPTANCE_RESULTS[name]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {name}: {detail}")
