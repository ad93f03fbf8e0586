from importlib import resources

import numpy as np
import pytest

from rdpolicy.grid import Bus, Line, RadialNetwork, load_network


def fixture_path(name):
    return resources.files("rdpolicy") / "data" / name


@pytest.fixture
def feeder4():
    return load_network(fixture_path("feeder4.yaml"))


@pytest.fixture
def feeder15():
    return load_network(fixture_path("feeder15.yaml"))


def two_bus(q_limit=1.5, v_min=0.9025, v_max=1.1025):
    return RadialNetwork(
        buses=[Bus(0), Bus(1, has_der=True, q_limit=q_limit)],
        lines=[Line(0, 1, r=0.01, xi=0.02)],
        v_min=v_min, v_max=v_max,
    )


def random_tree(seed, n_bus=6, der_prob=0.5, q_limit=0.3):
    """Random radial network: bus k hangs off a uniformly chosen earlier bus."""
    rng = np.random.default_rng(seed)
    buses = [Bus(0)]
    lines = []
    for k in range(1, n_bus):
        has_der = bool(rng.random() < der_prob) or k == n_bus - 1
        buses.append(Bus(k, has_der=has_der, q_limit=q_limit if has_der else 0.0))
        parent = int(rng.integers(0, k))
        if rng.random() < 0.5:
            lines.append(Line(parent, k, r=float(rng.uniform(0.005, 0.05)), xi=float(rng.uniform(0.005, 0.05))))
        else:
            lines.append(Line(k, parent, r=float(rng.uniform(0.005, 0.05)), xi=float(rng.uniform(0.005, 0.05))))
    return RadialNetwork(buses=buses, lines=lines)


@pytest.fixture(scope="session")
def feeder4_dataset():
    """Four days of hourly feeder4 injections labelled by the OPF, split 70/15/15."""
    from rdpolicy.scenario import LoadProfileSpec, gen_feeder_timeseries, label_with_opf

    net = load_network(fixture_path("feeder4.yaml"))
    spec = LoadProfileSpec(base_load={1: 0.3, 2: 0.5, 3: 0.4}, pv_capacity={2: 0.6, 3: 0.5},
                           days=4, step_minutes=60, seed=3)
    return net, label_with_opf(net, gen_feeder_timeseries(net, spec)).with_split(0)
