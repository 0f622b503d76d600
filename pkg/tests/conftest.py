import numpy as np
import pytest

from patchfas.synthdata import CorpusSpec, DeviceProfile, MaterialProfile


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_spec():
    """One device, live + print, 64 px images; renders in well under a second."""
    return CorpusSpec(
        devices=[DeviceProfile("d1", 0.5, 0.01, 0.1, 1.0)],
        materials=[MaterialProfile("live", "LiveSkinLike"), MaterialProfile("print", "PrintHalftone")],
        images_per_pair=8, image_size=64, splits=(0.5, 0.25, 0.25), seed=5)


@pytest.fixture
def small_spec():
    """Two devices x (live, print, screen) at 64 px."""
    return CorpusSpec(
        devices=[DeviceProfile("a", 0.8, 0.02, 0.2, 1.1), DeviceProfile("b", 0.3, 0.01, 0.0, 1.0)],
        materials=[MaterialProfile("live", "LiveSkinLike"),
                   MaterialProfile("print", "PrintHalftone", pitch=4.0, strength=0.3),
                   MaterialProfile("screen", "ScreenGrid", pitch=3.0, angle=6.0, strength=0.2)],
        images_per_pair=6, image_size=64, splits=(0.5, 0.25, 0.25), seed=11)
