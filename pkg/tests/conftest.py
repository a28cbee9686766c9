import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from informed_bsm import run_context, stage_timer  # noqa: E402
from informed_bsm.hrtf_io import analytic_hrtf  # noqa: E402
from informed_bsm.sh_core import ArrayGeometry  # noqa: E402


@pytest.fixture(scope="session")
def hrtf():
    """Default analytic rigid-sphere set (1800 directions, SH order 30)."""
    return analytic_hrtf()


@pytest.fixture(scope="session")
def small_hrtf():
    """Coarse analytic set for fast tests; SH order 8 on 200 directions."""
    return analytic_hrtf(grid_size=200, ir_length=64, sh_order=8)


@pytest.fixture
def geometry():
    return ArrayGeometry.semicircular()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(autouse=True)
def _clean_state():
    yield
    run_context.clear_run_context()
    stage_timer.clear()


@pytest.fixture
def crandn(rng):
    """Complex standard normal arrays of a given shape."""
    def draw(*shape):
        return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    return draw
