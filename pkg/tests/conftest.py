import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")

STUBS = Path(__file__).parent / "stubs"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def stub():
    """Command line for a stub external backend script."""

    def make(name, *extra):
        return [sys.executable, str(STUBS / f"{name}.py"), *extra]

    return make
