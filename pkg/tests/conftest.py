import pytest

from freqpf import data_path
from freqpf.network import Area, Branch, Bus, BusKind, Generator, Load, NetworkCase, to_per_unit


def make_twobus(beta=10.0, kappa=1.0, agc=True, load_mw=150.0, k_pf=0.0):
    """Slack with one droop generator feeding a lossless line to a PQ load."""
    return NetworkCase(
        mva_base=100.0,
        buses=[Bus(1, 230.0, BusKind.SLACK, 1, 1.0, 0.0), Bus(2, 230.0, BusKind.PQ, 1)],
        branches=[Branch(1, 1, 2, 0.0, 0.1)],
        generators=[Generator(1, 1, 100.0, 0.0, 1000.0, 100.0, kappa, agc)],
        loads=[Load(1, 2, load_mw, 0.0, k_pf=k_pf)],
        areas=[Area(1, beta, 0.0)],
        name="twobus",
    )


def make_fourbus(load_mw=900.0):
    """Two units (2, 3) whose solution lands just past their upper kinks.

    The slack unit has a wide operating band so the system stays solvable.
    """
    return NetworkCase(
        mva_base=100.0,
        buses=[
            Bus(1, 230.0, BusKind.SLACK, 1, 1.02, 0.0),
            Bus(2, 230.0, BusKind.PV, 1, 1.01),
            Bus(3, 230.0, BusKind.PV, 1, 1.01),
            Bus(4, 230.0, BusKind.PQ, 1),
        ],
        branches=[
            Branch(1, 1, 2, 0.002, 0.02, 0.02),
            Branch(2, 2, 3, 0.002, 0.02, 0.02),
            Branch(3, 3, 4, 0.002, 0.02, 0.02),
            Branch(4, 4, 1, 0.002, 0.02, 0.02),
            Branch(5, 2, 4, 0.002, 0.02, 0.02),
        ],
        generators=[
            Generator(1, 1, 200.0, 0.0, 2000.0, 300.0),
            Generator(2, 2, 300.0, 0.0, 340.0, 1500.0),
            Generator(3, 3, 300.0, 0.0, 340.0, 1500.0),
        ],
        loads=[Load(1, 4, load_mw, 150.0)],
        areas=[Area(1)],
        name="fourbus",
    )


@pytest.fixture
def twobus():
    return to_per_unit(make_twobus())


@pytest.fixture
def fourbus():
    return to_per_unit(make_fourbus())


@pytest.fixture
def twobus_path():
    return str(data_path("twobus.json"))


@pytest.fixture
def case9_path():
    return str(data_path("case9.m"))


def pytest_terminal_summary(terminalreporter):
    module = __import__("sys").modules.get("test_acceptance")
    verdicts = getattr(module, "VERDICTS", None)
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for name in sorted(verdicts):
            terminalreporter.write_line(verdicts[name])
