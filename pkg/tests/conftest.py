import numpy as np
import pytest

from odfusion import DnlConfig, Link, Network, enumerate_paths, toy_network


@pytest.fixture(scope="session")
def toy_net():
    return toy_network()


@pytest.fixture(scope="session")
def toy_paths(toy_net):
    return enumerate_paths(toy_net, 5)


def make_line_net(curb=0.0, parking=False):
    """Corridor 901 -> 1 -> 2 -> 3 -> 902 with one midblock bottleneck.

    Link 2 (cap 1800/h) meters the flow; connectors are wide open. Optional
    curb parking on link 2.
    """
    links = [
        Link(90, 901, 1, 0.1, (50.0, 40.0), (10800.0, 10800.0),
             (1000.0, 1000.0), is_connector=True),
        Link(1, 1, 2, 1.0, (50.0, 40.0), (3600.0, 3600.0), (540.0, 240.0)),
        Link(2, 2, 3, 0.5, (50.0, 40.0), (1800.0, 1800.0), (90.0, 40.0),
             allows_parking=parking, curb_capacity=curb),
        Link(91, 3, 902, 0.1, (50.0, 40.0), (10800.0, 10800.0),
             (1000.0, 1000.0), is_connector=True),
    ]
    xy = {901: (-100.0, 0.0), 1: (0.0, 0.0), 2: (1000.0, 0.0),
          3: (1500.0, 0.0), 902: (1600.0, 0.0)}
    return Network(links, [(901, 902)], xy)


@pytest.fixture
def line_net():
    return make_line_net()


def step_config(T, **kw):
    """Config with one sim step per interval: departures become deterministic
    because the in-interval jitter can only draw offset zero."""
    kw.setdefault("sim_step", 5.0)
    kw.setdefault("interval_length", 5.0)
    return DnlConfig(horizon_intervals=T, **kw)


def single_path_flows(pathset, T):
    return np.zeros((2, len(pathset.paths), T))
