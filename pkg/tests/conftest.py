import numpy as np
import pytest

from delaynode.dde import HistorySpec, MgParams, generate_dataset, make_mg_delayed_rhs, simulate_dde


@pytest.fixture(scope="session")
def mg():
    return MgParams()


@pytest.fixture(scope="session")
def ref_traj(mg):
    """Reference chaotic trajectory: constant history 0.5, tau = 1, t in [-1.5, 20]."""
    hist = HistorySpec.constant(0.5, 1.5)
    return simulate_dde(make_mg_delayed_rhs(mg), hist, [mg.tau], 20.0, 0.005)


@pytest.fixture(scope="session")
def small_ds():
    """Two-trajectory dataset with the standard sampling windows."""
    return generate_dataset(n_traj=2)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)
