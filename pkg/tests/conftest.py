"""Shared fixtures and small model builders for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from gridsense import (
    Branch,
    Bus,
    DcNetwork,
    InjectionDevice,
    build_impedance_model,
    bundled_case_path,
    load_network,
)

TWO_BUS_CASE = """\
gridsense-case v1
[buses]
1 slack
2 load 1.0
[branches]
1 2 1.0
"""


def random_connected_network(rng: np.random.Generator, m: int) -> DcNetwork:
    """Random spanning tree plus one shunt; always valid and invertible."""
    buses = [Bus(id=1)]
    branches = []
    for i in range(2, m + 1):
        parent = int(rng.integers(1, i))
        branches.append(Branch(parent, i, float(rng.uniform(0.2, 5.0))))
        buses.append(Bus(id=i))
    shunt_bus = int(rng.integers(1, m + 1))
    buses[shunt_bus - 1] = Bus(id=shunt_bus, shunt_resistance=float(rng.uniform(0.5, 2.0)))
    return DcNetwork(tuple(buses), tuple(branches))


@pytest.fixture(scope="session")
def two_bus_network():
    return load_network(TWO_BUS_CASE)


@pytest.fixture(scope="session")
def ieee9_network():
    return load_network(bundled_case_path("ieee9.case"))


@pytest.fixture(scope="session")
def ieee9_model(ieee9_network):
    return build_impedance_model(ieee9_network)


@pytest.fixture(scope="session")
def ieee118_network():
    return load_network(bundled_case_path("ieee118.case"))


@pytest.fixture(scope="session")
def ieee118_model(ieee118_network):
    return build_impedance_model(ieee118_network)
