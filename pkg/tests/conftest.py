import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hjbfem.experiments import build_experiment


@pytest.fixture(scope="session")
def exp1():
    return build_experiment(1, n_controls=3)


@pytest.fixture(scope="session")
def exp2():
    return build_experiment(2)


@pytest.fixture(scope="session")
def square_mesh(exp1):
    """Square template, experiment-1 regions, level 1 (dx ~ 0.22)."""
    return exp1.mesh(1)


@pytest.fixture(scope="session")
def notched_mesh(exp2):
    return exp2.mesh(1)


@pytest.fixture()
def rng():
    return np.random.default_rng(20260809)
