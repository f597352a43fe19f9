# tests/conftest.py

import numpy as np
import pytest

from fiberseg.logger import PipelineLogger
from fiberseg.phantom import PhantomConfig, make_phantom


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def logger(tmp_path):
    return PipelineLogger(str(tmp_path / 'logs' / 'test.log'), level='WARNING')


@pytest.fixture
def small_phantom(logger):
    """Фантом 8 x 64 x 64 с дефектным срезом 3"""
    cfg = PhantomConfig(n_fibers=6, radius_min=4.0, radius_max=6.0, depth=8, size=64,
                        noise=0.02, gap=3.0, defect_slices=[3], seed=7)
    return make_phantom(cfg, logger)


def disk(shape, center, radius):
    rows, cols = np.ogrid[:shape[0], :shape[1]]
    return (rows - center[0]) ** 2 + (cols - center[1]) ** 2 <= radius ** 2
