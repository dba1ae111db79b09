"""d-q frame network model of an islanded microgrid.

Two routes to the steady-state current gains are provided: the linear state
space built from RL branch equations (``build_dq_state_space``) and complex
nodal phasor analysis (``steady_state_gains``). They agree exactly when both
use the same virtual bus resistance; the nodal route can additionally drop the
virtual resistance (``virtual_resistance=math.inf``) for exact elimination.

Complex phasors map to d-q pairs as ``d + jq``; a complex gain ``a + jb``
becomes the real block ``[[a, -b], [b, a]]``.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

TWO_PI_50 = 2.0 * math.pi * 50.0


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class DqVec:
    d: float
    q: float

    def __post_init__(self):
        if not (math.isfinite(self.d) and math.isfinite(self.q)):
            raise ValueError("DqVec components must be finite")

    @property
    def rms(self) -> float:
        return math.hypot(self.d, self.q)

    def as_array(self) -> np.ndarray:
        return np.array([self.d, self.q])


@dataclass(frozen=True)
class LclParams:
    r_f: float = 0.15
    l_f: float = 3.8e-3
    c_f: float = 680e-6
    r_c: float = 0.05
    l_c: float = 300e-6
    a_m: float = 0.5
    v_dc_nominal: float = 900.0

    def __post_init__(self):
        for name in ("l_f", "l_c", "a_m", "v_dc_nominal"):
            if not getattr(self, name) > 0:
                raise TopologyError(f"LCL parameter {name} must be positive")
        for name in ("r_f", "c_f", "r_c"):
            if not getattr(self, name) >= 0:
                raise TopologyError(f"LCL parameter {name} must be non-negative")


@dataclass(frozen=True)
class Line:
    from_bus: str
    to_bus: str
    r: float
    l: float


@dataclass(frozen=True)
class Load:
    bus: str
    r: float  # math.inf for an open (zero-power) load
    l: float = 0.0


@dataclass(frozen=True)
class Vsc:
    name: str
    bus: str
    lcl: LclParams = field(default_factory=LclParams)
    kind: str = "battery"  # battery | pv | cpl


VSC_KINDS = ("battery", "pv", "cpl")


@dataclass(frozen=True)
class NetworkTopology:
    buses: tuple[str, ...]
    lines: tuple[Line, ...]
    loads: tuple[Load, ...]
    vscs: tuple[Vsc, ...]
    omega: float = TWO_PI_50
    virtual_resistance: float = 1e4

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(str(b) for b in self.buses))
        object.__setattr__(self, "lines", tuple(self.lines))
        object.__setattr__(self, "loads", tuple(self.loads))
        object.__setattr__(self, "vscs", tuple(self.vscs))
        self._validate()

    def _validate(self):
        known = set(self.buses)
        if len(known) != len(self.buses):
            raise TopologyError("duplicate bus ids")
        for ln in self.lines:
            for b in (ln.from_bus, ln.to_bus):
                if b not in known:
                    raise TopologyError(f"line {ln} references unknown bus {b}")
            if ln.from_bus == ln.to_bus:
                raise TopologyError(f"line {ln} is a self loop")
            if not ln.r > 0:
                raise TopologyError(f"line {ln.from_bus}-{ln.to_bus} needs r > 0")
            if ln.l < 0:
                raise TopologyError(f"line {ln.from_bus}-{ln.to_bus} has negative inductance")
        for ld in self.loads:
            if ld.bus not in known:
                raise TopologyError(f"load references unknown bus {ld.bus}")
            if not ld.r > 0 or ld.l < 0:
                raise TopologyError(f"load at bus {ld.bus} needs r > 0 and l >= 0")
        seen = set()
        for v in self.vscs:
            if v.bus not in known:
                raise TopologyError(f"VSC {v.name} references unknown bus {v.bus}")
            if v.bus in seen:
                raise TopologyError(f"more than one VSC at bus {v.bus}")
            if v.kind not in VSC_KINDS:
                raise TopologyError(f"VSC {v.name} has unknown kind {v.kind!r}")
            seen.add(v.bus)
        if not self.virtual_resistance > 0:
            raise TopologyError("virtual_resistance must be positive (math.inf allowed)")
        # connectivity
        adj = defaultdict(set)
        for ln in self.lines:
            adj[ln.from_bus].add(ln.to_bus)
            adj[ln.to_bus].add(ln.from_bus)
        if self.buses:
            stack, reached = [self.buses[0]], {self.buses[0]}
            while stack:
                for nb in adj[stack.pop()]:
                    if nb not in reached:
                        reached.add(nb)
                        stack.append(nb)
            isolated = known - reached
            if isolated:
                raise TopologyError(f"buses not connected to the network: {sorted(isolated)}")

    @property
    def n_vsc(self) -> int:
        return len(self.vscs)

    def bus_index(self) -> dict[str, int]:
        return {b: i for i, b in enumerate(self.buses)}

    def vsc_indices(self, kind: str) -> list[int]:
        return [i for i, v in enumerate(self.vscs) if v.kind == kind]

    def with_load_resistances(self, r_by_bus) -> "NetworkTopology":
        """Copy with purely resistive loads ``{bus: ohm}`` replacing all loads."""
        loads = tuple(Load(bus=str(b), r=float(r)) for b, r in r_by_bus.items())
        return replace(self, loads=loads)


@dataclass
class StateSpace:
    a_net: np.ndarray
    b_net: np.ndarray
    c_out: np.ndarray
    state_labels: list[str]
    output_labels: list[str]


@dataclass
class StaticGains:
    """Real-valued gains from stacked VSC output voltages to network currents."""

    g_io: np.ndarray
    g_iload: np.ndarray
    g_iline: np.ndarray
    g_vbus: np.ndarray  # bus voltages, used by the plant and for reporting

    @property
    def n_vsc(self) -> int:
        return self.g_io.shape[1] // 2

    def g_io_block(self, i: int) -> np.ndarray:
        return self.g_io[2 * i : 2 * i + 2]

    def g_iline_block(self, j: int) -> np.ndarray:
        return self.g_iline[2 * j : 2 * j + 2]

    def g_iload_block(self, j: int) -> np.ndarray:
        return self.g_iload[2 * j : 2 * j + 2]

    def stacked(self) -> np.ndarray:
        return np.vstack([self.g_io, self.g_iload, self.g_iline])


def complex_to_dq(k: np.ndarray) -> np.ndarray:
    """Expand an ``m x n`` complex gain to the ``2m x 2n`` real d-q gain."""
    k = np.atleast_2d(np.asarray(k, dtype=complex))
    m, n = k.shape
    out = np.empty((2 * m, 2 * n))
    out[0::2, 0::2] = k.real
    out[0::2, 1::2] = -k.imag
    out[1::2, 0::2] = k.imag
    out[1::2, 1::2] = k.real
    return out


_ROT = np.array([[0.0, 1.0], [-1.0, 0.0]])


def build_dq_state_space(topology: NetworkTopology) -> StateSpace:
    """Linear d-q state space with VSC output, inductive load and line currents
    as states and the stacked VSC output voltages as input.

    Bus voltages are closed through the virtual resistance to ground; purely
    resistive loads are algebraic and appear only in the output map.
    """
    top = topology
    r_n = top.virtual_resistance
    if not math.isfinite(r_n):
        raise TopologyError("state-space build needs a finite virtual_resistance")
    w = top.omega
    bidx = top.bus_index()
    nb = len(top.buses)

    # branches: (label, node_a, node_b, R, L); node None = ground / VSC terminal
    branches = []
    for i, v in enumerate(top.vscs):
        if not v.lcl.l_c > 0:
            raise TopologyError(f"VSC {v.name} coupling inductance must be > 0")
        branches.append((f"io[{v.name}]", None, bidx[v.bus], v.lcl.r_c, v.lcl.l_c))
    inductive_loads = []
    for j, ld in enumerate(top.loads):
        if ld.l > 0 and math.isfinite(ld.r):
            inductive_loads.append(j)
            branches.append((f"iload[{ld.bus}#{j}]", bidx[ld.bus], None, ld.r, ld.l))
    for j, ln in enumerate(top.lines):
        if not ln.l > 0:
            raise TopologyError(
                f"line {ln.from_bus}-{ln.to_bus} has zero inductance; its current is not a state"
            )
        branches.append((f"iline[{ln.from_bus}-{ln.to_bus}]", bidx[ln.from_bus], bidx[ln.to_bus], ln.r, ln.l))

    nbr = len(branches)
    n_vsc = top.n_vsc

    # net current injected into each bus as a function of branch currents
    inj = np.zeros((nb, nbr))
    for k, (_, na, nbus, _, _) in enumerate(branches):
        if k < n_vsc:
            inj[nbus, k] += 1.0  # VSC output current flows into its bus
            continue
        if na is not None:
            inj[na, k] -= 1.0
        if nbus is not None:
            inj[nbus, k] += 1.0
    g_shunt = np.full(nb, 1.0 / r_n)
    for ld in top.loads:
        if ld.l == 0 and math.isfinite(ld.r):
            g_shunt[bidx[ld.bus]] += 1.0 / ld.r
    vbus_of_branch = inj / g_shunt[:, None]  # nb x nbr
    M = np.kron(vbus_of_branch, np.eye(2))  # 2nb x 2nbr

    A = np.zeros((2 * nbr, 2 * nbr))
    B = np.zeros((2 * nbr, 2 * n_vsc))
    for k, (_, na, nbus, R, L) in enumerate(branches):
        rows = slice(2 * k, 2 * k + 2)
        A[rows, rows] += -R / L * np.eye(2) + w * _ROT
        # L di/dt = v_a - v_b
        if k < n_vsc:
            B[rows, 2 * k : 2 * k + 2] += np.eye(2) / L
        elif na is not None:
            A[rows] += M[2 * na : 2 * na + 2] / L
        if nbus is not None:
            A[rows] -= M[2 * nbus : 2 * nbus + 2] / L

    # outputs: [io; every load in topology order; lines]
    c_rows, out_labels = [], []
    n_ind = len(inductive_loads)
    for i in range(n_vsc):
        c_rows.append(_unit_rows(2 * nbr, 2 * i))
        out_labels.append(branches[i][0])
    for j, ld in enumerate(top.loads):
        if j in inductive_loads:
            k = n_vsc + inductive_loads.index(j)
            c_rows.append(_unit_rows(2 * nbr, 2 * k))
        elif math.isfinite(ld.r):
            b = bidx[ld.bus]
            c_rows.append(M[2 * b : 2 * b + 2] / ld.r)
        else:
            c_rows.append(np.zeros((2, 2 * nbr)))
        out_labels.append(f"iload[{ld.bus}#{j}]")
    for j in range(len(top.lines)):
        k = n_vsc + n_ind + j
        c_rows.append(_unit_rows(2 * nbr, 2 * k))
        out_labels.append(branches[k][0])
    C = np.vstack(c_rows) if c_rows else np.zeros((0, 2 * nbr))

    labels = [f"{lab}.{ax}" for lab, *_ in branches for ax in "dq"]
    return StateSpace(a_net=A, b_net=B, c_out=C, state_labels=labels,
                      output_labels=[f"{lab}.{ax}" for lab in out_labels for ax in "dq"])


def _unit_rows(n: int, start: int) -> np.ndarray:
    e = np.zeros((2, n))
    e[0, start] = 1.0
    e[1, start + 1] = 1.0
    return e


def state_space_gains(ss: StateSpace) -> np.ndarray:
    """``C (-A)^-1 B``: stacked steady-state current gain from the state space."""
    return ss.c_out @ np.linalg.solve(-ss.a_net, ss.b_net)


def steady_state_gains(topology: NetworkTopology, virtual_resistance: float | None = None) -> StaticGains:
    """Steady-state current gains by complex nodal analysis at ``topology.omega``.

    ``virtual_resistance`` overrides the topology value; ``math.inf`` removes
    the virtual shunt (exact elimination of passive bus voltages).
    """
    top = topology
    r_n = top.virtual_resistance if virtual_resistance is None else virtual_resistance
    w = top.omega
    bidx = top.bus_index()
    nb, nv = len(top.buses), top.n_vsc

    Y = np.zeros((nb, nb), dtype=complex)
    if math.isfinite(r_n):
        Y += np.eye(nb) / r_n
    y_line = np.array([1.0 / complex(ln.r, w * ln.l) for ln in top.lines], dtype=complex)
    for y, ln in zip(y_line, top.lines):
        a, b = bidx[ln.from_bus], bidx[ln.to_bus]
        Y[a, a] += y
        Y[b, b] += y
        Y[a, b] -= y
        Y[b, a] -= y
    y_load = np.array(
        [0.0 if not math.isfinite(ld.r) else 1.0 / complex(ld.r, w * ld.l) for ld in top.loads],
        dtype=complex,
    )
    for y, ld in zip(y_load, top.loads):
        Y[bidx[ld.bus], bidx[ld.bus]] += y
    y_c = np.array([1.0 / complex(v.lcl.r_c, w * v.lcl.l_c) for v in top.vscs], dtype=complex)
    S = np.zeros((nb, nv))
    for i, v in enumerate(top.vscs):
        S[bidx[v.bus], i] = 1.0
        Y[bidx[v.bus], bidx[v.bus]] += y_c[i]

    if nb and np.linalg.cond(Y) > 1e13:
        raise TopologyError("nodal admittance matrix is singular; some bus voltage is undetermined")
    K_bus = np.linalg.solve(Y, S * y_c[None, :]) if nb else np.zeros((0, nv))
    K_io = np.diag(y_c) @ (np.eye(nv) - S.T @ K_bus)
    K_load = np.array([y * K_bus[bidx[ld.bus]] for y, ld in zip(y_load, top.loads)]).reshape(-1, nv)
    K_line = np.array(
        [y * (K_bus[bidx[ln.from_bus]] - K_bus[bidx[ln.to_bus]]) for y, ln in zip(y_line, top.lines)]
    ).reshape(-1, nv)
    return StaticGains(
        g_io=complex_to_dq(K_io),
        g_iload=complex_to_dq(K_load) if len(top.loads) else np.zeros((0, 2 * nv)),
        g_iline=complex_to_dq(K_line) if len(top.lines) else np.zeros((0, 2 * nv)),
        g_vbus=complex_to_dq(K_bus),
    )


def resistive_load_gains(topology: NetworkTopology, load_power, v_ll: float) -> StaticGains:
    """Exact gains with every load replaced by the resistance drawing
    ``load_power`` (W, topology load order) at line voltage ``v_ll``."""
    p = np.asarray(load_power, dtype=float).ravel()
    if p.size != len(topology.loads):
        raise ValueError(f"expected {len(topology.loads)} load powers, got {p.size}")
    loads = tuple(
        Load(ld.bus, v_ll * v_ll / pk if pk > 0 else math.inf) for ld, pk in zip(topology.loads, p)
    )
    return steady_state_gains(replace(topology, loads=loads), virtual_resistance=math.inf)


def loss_quadratic_forms(gains: StaticGains, topology: NetworkTopology) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(Q_lcl, Q_line)`` with ``v' Q v`` the filter and line I^2R losses in W."""
    from .vsc import vsc_static_gains

    nv = gains.n_vsc
    if nv != topology.n_vsc or gains.g_iline.shape[0] != 2 * len(topology.lines):
        raise ValueError("gains and topology dimensions disagree")
    q_lcl = np.zeros((2 * nv, 2 * nv))
    for i, v in enumerate(topology.vscs):
        g_il = vsc_static_gains(gains, v.lcl, i, topology.omega).g_iL
        g_io = gains.g_io_block(i)
        q_lcl += v.lcl.r_f * g_il.T @ g_il + v.lcl.r_c * g_io.T @ g_io
    q_line = np.zeros((2 * nv, 2 * nv))
    for j, ln in enumerate(topology.lines):
        g = gains.g_iline_block(j)
        q_line += ln.r * g.T @ g
    return 0.5 * (q_lcl + q_lcl.T), 0.5 * (q_line + q_line.T)


# ---------------------------------------------------------------------------
# configuration files


def _lcl_from(d: dict | None, base: LclParams) -> LclParams:
    return replace(base, **(d or {}))


def topology_from_dict(cfg: dict) -> NetworkTopology:
    if "buses" not in cfg:
        raise TopologyError("topology config needs a 'buses' section")
    omega = 2.0 * math.pi * float(cfg.get("frequency_hz", 50.0))
    lcl_default = _lcl_from(cfg.get("lcl_defaults"), LclParams())
    lines = tuple(
        Line(str(e["from"]), str(e["to"]), float(e["r"]), float(e["l"])) for e in cfg.get("lines", [])
    )
    loads = tuple(
        Load(str(e["bus"]), float(e.get("r", math.inf)), float(e.get("l", 0.0))) for e in cfg.get("loads", [])
    )
    vscs = tuple(
        Vsc(
            name=str(e.get("name", f"vsc{i}")),
            bus=str(e["bus"]),
            lcl=_lcl_from(e.get("lcl"), lcl_default),
            kind=e.get("kind", "battery"),
        )
        for i, e in enumerate(cfg.get("vscs", []))
    )
    return NetworkTopology(
        buses=tuple(str(b) for b in cfg["buses"]),
        lines=lines,
        loads=loads,
        vscs=vscs,
        omega=omega,
        virtual_resistance=float(cfg.get("virtual_resistance", 1e4)),
    )


def load_topology(path) -> NetworkTopology:
    with open(Path(path)) as fh:
        return topology_from_dict(yaml.safe_load(fh))
