"""Shared fixtures; tests import the packages under src/ directly"""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from simulator.scm_simulator import generate_five_node_scm  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def small_fixture():
    """Five-node fixture at a size the fast tests can afford"""
    return generate_five_node_scm(n_subjects=12, n_samples=120, seed=0)
