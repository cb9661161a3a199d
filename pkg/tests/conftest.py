import numpy as np
import pytest

from irtthresh.data import Binary, Continuous, Count, ItemSpec, ModelSpec, OrderedCategorical
from irtthresh.difficulty import FreeOrdinal, Linear, LogP1
from irtthresh.simulation import SimulationScenario, simulate_dataset


def mixed_scenario(n_persons=20, seed=3, slope_mode="varying", kind="normal"):
    """Binary, 5-category ordinal, count and two continuous items."""
    items = (
        ItemSpec("bin", Binary(), "linear"),
        ItemSpec("ord", OrderedCategorical(5), "free_ordinal"),
        ItemSpec("cnt", Count(), "logp1"),
        ItemSpec("c1", Continuous(), "linear"),
        ItemSpec("c2", Continuous(), "linear"),
    )
    slope = 1.5
    truth = (
        Linear(-0.3, 1.0),
        FreeOrdinal((-1.0, -0.2, 0.4, 1.3)),
        LogP1(-1.0, slope if slope_mode == "common" else 1.2),
        Linear(0.2, slope if slope_mode == "common" else 0.8),
        Linear(-0.5, slope if slope_mode == "common" else 2.0),
    )
    spec = ModelSpec(items, response_function=kind, slope_mode=slope_mode)
    return SimulationScenario(spec, truth, n_persons, 1.0, seed)


@pytest.fixture
def mixed():
    sc = mixed_scenario()
    return sc, simulate_dataset(sc).data


def central_diff(f, u, h=1e-6):
    g = np.empty(u.size)
    for j in range(u.size):
        e = np.zeros(u.size)
        e[j] = h
        g[j] = (f(u + e) - f(u - e)) / (2 * h)
    return g
