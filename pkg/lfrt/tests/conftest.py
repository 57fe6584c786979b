import numpy as np
import pytest

from lfrt.lightfield import LightField


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run slow acceptance tests')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: long-running acceptance runs (enable with --runslow)')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow', default=False):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


def make_scene(seed, shape=(3, 3, 3, 64, 64)):
    """Smooth random light field in [0.1, 0.9] with a one-pixel disparity per view."""
    rng = np.random.default_rng(seed)
    u, v, c, h, w = shape
    yy, xx = np.mgrid[0:h, 0:w] / float(max(h, w))
    base = np.stack([0.5 + 0.4 * np.sin(2 * np.pi * (rng.uniform(0.5, 2) * xx + rng.uniform(0.5, 2) * yy) + rng.uniform(0, 6))
                     for _ in range(c)])
    views = np.empty(shape)
    for a in range(u):
        for b in range(v):
            views[a, b] = np.roll(base, (a - u // 2, b - v // 2), axis=(1, 2))
    return LightField(views)


@pytest.fixture
def scene():
    return make_scene(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
