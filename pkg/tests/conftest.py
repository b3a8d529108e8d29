import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tolgp.driver import load_config  # noqa: E402
from tolgp.gp import KernelParams, TrainingDesign, gp_fit  # noqa: E402


@pytest.fixture(scope="session")
def config1d():
    return load_config("analytic1d")


@pytest.fixture(scope="session")
def config2d():
    return load_config("analytic2d")


def random_design(rng, s, d=1, m=1, tau_range=(1e-3, 0.3)):
    X = rng.random((s, d))
    tau = np.exp(rng.uniform(np.log(tau_range[0]), np.log(tau_range[1]), s))
    Y = rng.normal(size=(s, m))
    return TrainingDesign(X, tau, Y, np.zeros(s))


def random_model(rng, s, d=1, m=1, jitter=1e-10):
    design = random_design(rng, s, d, m)
    params = KernelParams(rng.uniform(0.05, 0.15), tuple(rng.uniform(0.2, 2.0, m)))
    return gp_fit(design, params, jitter=jitter)
