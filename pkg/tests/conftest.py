import numpy as np
import pytest
from epiweeks import Week

from denguenet.ingestion import BAND_NAMES, MunicipalityRegion, SatelliteScene

IBAGUE = MunicipalityRegion("Ibagué", (4.38, -75.30, 4.48, -75.15))
CALI = MunicipalityRegion("Cali", (3.33, -76.59, 3.50, -76.46))


@pytest.fixture
def region():
    return IBAGUE


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def uniform_scene(region, week, rng, size=32, bands=BAND_NAMES):
    arrays = tuple(rng.integers(0, 5000, (size, size)).astype(np.uint16) for _ in bands)
    return SatelliteScene(region, week, arrays, (10,) * len(bands), tuple(bands))


@pytest.fixture
def make_scene(rng):
    def _make(region=IBAGUE, week=Week(2017, 10), size=32):
        return uniform_scene(region, week, rng, size)
    return _make


@pytest.fixture(scope="session")
def tiny_vit_weights(tmp_path_factory):
    """State dict of a small torchvision ViT with seeded weights, saved like pretrained weights would be."""
    torch = pytest.importorskip("torch")
    from torchvision.models import VisionTransformer

    torch.manual_seed(0)
    model = VisionTransformer(image_size=32, patch_size=8, num_layers=2, num_heads=2, hidden_dim=16, mlp_dim=32)
    path = tmp_path_factory.mktemp("weights") / "tiny_vit.pth"
    torch.save(model.state_dict(), path)
    return path


# (criterion, passed, detail) tuples appended by test_acceptance, printed after the run
ACCEPTANCE: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  ({detail})")
