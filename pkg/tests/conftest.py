import math

import numpy as np
import pytest

from microgrid_mpc.netmodel import LclParams, Line, Load, NetworkTopology, Vsc, load_topology
from microgrid_mpc.scenario import DATA_DIR


def random_topology(seed: int, n_bus: int | None = None, n_vsc: int | None = None,
                    virtual_resistance: float = 1e4) -> NetworkTopology:
    """Random connected RL network: spanning tree plus a few chords, a mix of
    inductive, resistive and open loads, VSCs on distinct buses."""
    rng = np.random.default_rng(seed)
    n_bus = n_bus or int(rng.integers(2, 7))
    n_vsc = n_vsc or int(rng.integers(1, n_bus + 1))
    buses = [f"b{i}" for i in range(n_bus)]
    lines = []
    for i in range(1, n_bus):
        j = int(rng.integers(0, i))
        lines.append(Line(buses[j], buses[i], rng.uniform(0.01, 0.5), rng.uniform(1e-5, 1e-3)))
    for _ in range(int(rng.integers(0, 2))):
        a, b = rng.choice(n_bus, 2, replace=False) if n_bus > 1 else (0, 0)
        if a != b:
            lines.append(Line(buses[a], buses[b], rng.uniform(0.01, 0.5), rng.uniform(1e-5, 1e-3)))
    loads = []
    for b in buses:
        kind = rng.integers(0, 3)
        if kind == 0:
            loads.append(Load(b, rng.uniform(2.0, 20.0), rng.uniform(1e-3, 2e-2)))
        elif kind == 1:
            loads.append(Load(b, rng.uniform(2.0, 20.0)))
        else:
            loads.append(Load(b, math.inf))
    vsc_buses = rng.choice(n_bus, n_vsc, replace=False)
    lcl = LclParams(r_f=rng.uniform(0.05, 0.3), l_f=rng.uniform(1e-3, 5e-3), c_f=rng.uniform(5e-5, 7e-4),
                    r_c=rng.uniform(0.01, 0.1), l_c=rng.uniform(1e-4, 5e-4))
    vscs = [Vsc(f"vsc{k}", buses[b], lcl) for k, b in enumerate(vsc_buses)]
    return NetworkTopology(tuple(buses), tuple(lines), tuple(loads), tuple(vscs),
                           virtual_resistance=virtual_resistance)


@pytest.fixture(scope="session")
def ieee13():
    return load_topology(DATA_DIR / "ieee13.yaml")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


TOY = {
    "frequency_hz": 50,
    "lcl_defaults": {"r_f": 0.15, "l_f": 3.8e-3, "c_f": 680e-6, "r_c": 0.05, "l_c": 300e-6},
    "buses": ["a", "b", "c"],
    "lines": [{"from": "a", "to": "b", "r": 0.05, "l": 4e-5}, {"from": "b", "to": "c", "r": 0.08, "l": 6e-5}],
    "loads": [{"bus": "a"}, {"bus": "b"}, {"bus": "c"}],
    "vscs": [{"name": "pv", "bus": "a", "kind": "pv"},
             {"name": "b1", "bus": "b", "kind": "battery"},
             {"name": "b2", "bus": "c", "kind": "battery"}],
}


def toy_topology(cfg: dict | None = None):
    from microgrid_mpc.netmodel import topology_from_dict

    return topology_from_dict(cfg or TOY)


def toy_context(topology=None, socs=(0.6, 0.6)):
    from microgrid_mpc.battery import BatteryPack
    from microgrid_mpc.mpc import MpcContext

    topology = topology or toy_topology()
    packs = [BatteryPack(soc=s) for s in socs]
    return MpcContext(topology, packs, _eff_poly())


_POLY = []


def _eff_poly():
    from microgrid_mpc.battery import default_eff_poly

    if not _POLY:
        _POLY.append(default_eff_poly(n=20))
    return _POLY[0]


def toy_predictions(context, config, load_kw=30.0, pv_kw=10.0):
    """Flat predictions over the horizon, load split evenly over the buses."""
    from microgrid_mpc.mpc import GainCache, Predictions, attach_gains

    top = context.topology
    n_pv = len(top.vsc_indices("pv"))
    n_loads = len(top.loads)
    pred = Predictions(
        p_mpp=np.full((config.n_p, max(n_pv, 1)), pv_kw * 1e3),
        p_cpl=np.zeros((config.n_p, 1)),
        load_p=np.full((config.n_p, n_loads), load_kw * 1e3 / max(n_loads, 1)),
    )
    return attach_gains(pred, GainCache(top, config.v_ll, config.load_quantum))


@pytest.fixture
def toy():
    return toy_context()
