import os

import numpy as np
import pytest

import config
from comm_setups import UCSD_CONTROLLABLE, default_box, setup_partition
from controller import ControllerBundle, Partition, ReactiveBox, build_bundle
from grid import GridNetwork, Line, load_network
from icnn import quadratic_model

ROOT = os.path.dirname(os.path.abspath(__file__))
UCSD_PATH = os.path.join(ROOT, 'networks', 'ucsd49.net')


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run slow acceptance tests')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: long-running acceptance test, needs --runslow')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


def z_base(base_kv=config.BASE_KV, base_mva=config.BASE_MVA):
    return base_kv ** 2 / base_mva


def star_network(x_pu, r_pu=None, controllable=None):
    """Every bus hangs off the substation, so X = diag(x_pu)"""
    x_pu = np.asarray(x_pu, dtype=float)
    r_pu = np.zeros_like(x_pu) if r_pu is None else np.asarray(r_pu, dtype=float)
    zb = z_base()
    lines = tuple(Line(0, k + 1, r_pu[k] * zb, x_pu[k] * zb) for k in range(x_pu.size))
    ctrl = tuple(range(1, x_pu.size + 1)) if controllable is None else tuple(controllable)
    return GridNetwork(bus_count=x_pu.size + 1, lines=lines, controllable=ctrl, name='star')


def chain_network(n, r_pu=0.01, x_pu=0.02, controllable=None):
    zb = z_base()
    lines = tuple(Line(k, k + 1, r_pu * zb, x_pu * zb) for k in range(n))
    ctrl = tuple(range(1, n + 1)) if controllable is None else tuple(controllable)
    return GridNetwork(bus_count=n + 1, lines=lines, controllable=ctrl, name='chain')


def quadratic_bundle(controllable, weight=1.0, linear=None, epsilon=0.5, q_lim=10.0, per_bus=True):
    """phi_raw(v) = -weight (v - 1) + linear, either one model per bus or one for all"""
    controllable = tuple(controllable)
    n = len(controllable)
    linear = np.zeros(n) if linear is None else np.asarray(linear, dtype=float)
    box = ReactiveBox(np.full(n, -q_lim), np.full(n, q_lim))
    if per_bus:
        partition = Partition(tuple((b,) for b in controllable))
        models = [quadratic_model(1, weight, linear[i:i + 1]) for i in range(n)]
    else:
        partition = Partition((controllable,))
        models = [quadratic_model(n, weight, linear)]
    return ControllerBundle(partition, models, box, epsilon, controllable)


@pytest.fixture
def single_bus_net():
    """One controllable bus with x = 1 p.u. and no resistance: X = [[1]]"""
    return star_network([1.0])


@pytest.fixture
def chain_net():
    return chain_network(4)


@pytest.fixture(scope='session')
def ucsd_net():
    return load_network(UCSD_PATH)


@pytest.fixture(scope='session')
def ucsd_box():
    return default_box()


@pytest.fixture
def fc_bundle(ucsd_box):
    return build_bundle(setup_partition('FC'), ucsd_box, UCSD_CONTROLLABLE, epsilon=0.1,
                        hidden=(16, 16), seed=3, comm_setup='FC')


@pytest.fixture
def nc_bundle(ucsd_box):
    return build_bundle(setup_partition('NC'), ucsd_box, UCSD_CONTROLLABLE, epsilon=0.1,
                        hidden=(8,), seed=5, comm_setup='NC')
