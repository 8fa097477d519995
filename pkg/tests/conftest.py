import numpy as np
import pytest

from core import ImageBuffer


@pytest.fixture(autouse=True)
def _isolated_env(monkeypatch):
    monkeypatch.delenv("D2LV_JOBS", raising=False)
    monkeypatch.delenv("D2LV_LOG_LEVEL", raising=False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def noise_image(rng):
    def make(width=96, height=80):
        return ImageBuffer(rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8))
    return make


@pytest.fixture
def flat_image():
    return ImageBuffer.filled(64, 48, (120, 120, 120))
