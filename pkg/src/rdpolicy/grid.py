"""Radial feeder model, LinDistFlow power flow and the voltage-regulation OPF.

All quantities are per-unit; voltages are squared magnitudes. Per-bus arrays
are aligned with ``net.bus_ids`` (the order buses appear in the network
file) and per-agent arrays with ``net.agents``.
"""

from dataclasses import dataclass, field
from functools import cached_property
import hashlib
import json

import numpy as np
import pandas as pd
import yaml

from .errors import (BadBounds, CycleDetected, DimensionMismatch, Disconnected,
                     EmptyAgentSet, Infeasible, Unbounded, ValidationError)
from .simplex import solve_lp

FORMAT_VERSION = 1
V_MIN_DEFAULT = 0.95 ** 2
V_MAX_DEFAULT = 1.05 ** 2


@dataclass(frozen=True)
class Bus:
    id: int
    has_der: bool = False
    q_limit: float = 0.0


@dataclass(frozen=True)
class Line:
    from_id: int
    to_id: int
    r: float
    xi: float


@dataclass(frozen=True)
class RadialNetwork:
    buses: tuple
    lines: tuple
    root_id: int = 0
    v_ref: float = 1.0
    v_min: float = V_MIN_DEFAULT
    v_max: float = V_MAX_DEFAULT
    v_root: float = 1.0
    name: str = "network"

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "lines", tuple(self.lines))

    @property
    def bus_ids(self):
        return [b.id for b in self.buses]

    @cached_property
    def index(self):
        return {b.id: k for k, b in enumerate(self.buses)}

    @property
    def n_bus(self):
        return len(self.buses)

    @cached_property
    def agents(self):
        """Ids of controllable (DER-equipped) buses, root excluded, in bus order."""
        return [b.id for b in self.buses if b.has_der and b.id != self.root_id]

    @property
    def n_agents(self):
        return len(self.agents)

    @cached_property
    def agent_index(self):
        return np.array([self.index[a] for a in self.agents], dtype=int)

    @cached_property
    def q_limits(self):
        return np.array([self.buses[self.index[a]].q_limit for a in self.agents], dtype=float)

    @cached_property
    def nonroot(self):
        """Boolean mask over buses, False only at the substation."""
        mask = np.ones(self.n_bus, dtype=bool)
        mask[self.index[self.root_id]] = False
        return mask

    @cached_property
    def topology(self):
        """BFS order, parent bus and feeding line for every bus."""
        adj = {b: [] for b in self.bus_ids}
        for k, ln in enumerate(self.lines):
            adj[ln.from_id].append((ln.to_id, k))
            adj[ln.to_id].append((ln.from_id, k))
        order = [self.root_id]
        parent = {self.root_id: None}
        feeder = {self.root_id: None}
        head = 0
        while head < len(order):
            u = order[head]
            head += 1
            for w, k in sorted(adj[u]):
                if w not in parent:
                    parent[w] = u
                    feeder[w] = k
                    order.append(w)
        return order, parent, feeder

    @cached_property
    def path_matrix(self):
        """``Pi[b, l] = 1`` when line ``l`` lies on the root-to-``b`` path."""
        order, parent, feeder = self.topology
        Pi = np.zeros((self.n_bus, len(self.lines)))
        for b in order[1:]:
            k = self.index[b]
            Pi[k] = Pi[self.index[parent[b]]]
            Pi[k, feeder[b]] = 1.0
        return Pi

    def hash(self):
        blob = json.dumps(network_to_dict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Injection:
    p_c: np.ndarray
    q_c: np.ndarray
    p_g: np.ndarray
    q_g: np.ndarray = None

    @classmethod
    def zeros(cls, net):
        z = np.zeros(net.n_bus)
        return cls(z.copy(), z.copy(), z.copy(), np.zeros(net.n_agents))


@dataclass
class FlowSolution:
    P: np.ndarray
    Q: np.ndarray
    v: np.ndarray


def validate_network(net, require_agents=True):
    """Check tree topology and parameter sanity; raise the first violation found."""
    ids = net.bus_ids
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate bus ids")
    if net.root_id not in net.index:
        raise Disconnected(f"root bus {net.root_id} is not in the bus list")
    uf = {b: b for b in ids}

    def find(a):
        while uf[a] != a:
            uf[a] = uf[uf[a]]
            a = uf[a]
        return a

    for ln in net.lines:
        for end in (ln.from_id, ln.to_id):
            if end not in uf:
                raise Disconnected(f"line {ln.from_id}-{ln.to_id} references unknown bus {end}")
        a, b = find(ln.from_id), find(ln.to_id)
        if a == b:
            raise CycleDetected(f"line {ln.from_id}-{ln.to_id} closes a cycle")
        uf[a] = b
    roots = {find(b) for b in ids}
    if len(roots) != 1:
        raise Disconnected(f"network has {len(roots)} connected components")

    for ln in net.lines:
        if ln.r < 0 or ln.xi < 0:
            raise BadBounds(f"line {ln.from_id}-{ln.to_id} has negative impedance")
    if not net.v_min < net.v_ref < net.v_max:
        raise BadBounds(f"need v_min < v_ref < v_max, got {net.v_min}, {net.v_ref}, {net.v_max}")
    for b in net.buses:
        if b.q_limit < 0:
            raise BadBounds(f"bus {b.id} has negative q_limit")
    if require_agents and not net.agents:
        raise EmptyAgentSet("no non-root bus carries a DER")
    return True


def _check_injection(net, inj):
    for name in ("p_c", "q_c", "p_g"):
        if np.shape(getattr(inj, name))[-1] != net.n_bus:
            raise DimensionMismatch(f"{name} has length {np.shape(getattr(inj, name))[-1]}, "
                                    f"network has {net.n_bus} buses")
    q_g = np.zeros(net.n_agents) if inj.q_g is None else np.asarray(inj.q_g, dtype=float)
    if q_g.shape[-1] != net.n_agents:
        raise DimensionMismatch(f"q_g has length {q_g.shape[-1]}, network has {net.n_agents} agents")
    return q_g


def solve_flow(net, inj):
    """Evaluate LinDistFlow: aggregate flows leaf-to-root, then drop voltages root-to-leaf."""
    q_g = _check_injection(net, inj)
    idx = net.index
    p_net = np.asarray(inj.p_c, dtype=float) - np.asarray(inj.p_g, dtype=float)
    q_net = np.asarray(inj.q_c, dtype=float).copy()
    q_net[net.agent_index] -= q_g
    order, parent, feeder = net.topology

    P = np.zeros(len(net.lines))
    Q = np.zeros(len(net.lines))
    sub_p = p_net.copy()
    sub_q = q_net.copy()
    for b in reversed(order[1:]):
        k = feeder[b]
        P[k] = sub_p[idx[b]]
        Q[k] = sub_q[idx[b]]
        sub_p[idx[parent[b]]] += P[k]
        sub_q[idx[parent[b]]] += Q[k]

    v = np.empty(net.n_bus)
    v[idx[net.root_id]] = net.v_root
    for b in order[1:]:
        ln = net.lines[feeder[b]]
        k = feeder[b]
        v[idx[b]] = v[idx[parent[b]]] - 2.0 * (ln.r * P[k] + ln.xi * Q[k])
    return FlowSolution(P=P, Q=Q, v=v)


@dataclass
class VoltageSensitivity:
    """Affine map ``v = base(p_c, q_c, p_g) + q_g @ M.T``; rows/columns follow bus/agent order."""
    M: np.ndarray
    R_common: np.ndarray
    X_common: np.ndarray
    v_root: float

    def base(self, p_c, q_c, p_g):
        p_c, q_c, p_g = (np.asarray(a, dtype=float) for a in (p_c, q_c, p_g))
        return self.v_root - 2.0 * (p_c - p_g) @ self.R_common.T - 2.0 * q_c @ self.X_common.T

    def voltages(self, p_c, q_c, p_g, q_g):
        return self.base(p_c, q_c, p_g) + np.asarray(q_g, dtype=float) @ self.M.T


def voltage_sensitivity(net):
    Pi = net.path_matrix
    r = np.array([ln.r for ln in net.lines])
    xi = np.array([ln.xi for ln in net.lines])
    R_common = (Pi * r) @ Pi.T
    X_common = (Pi * xi) @ Pi.T
    M = 2.0 * X_common[:, net.agent_index]
    return VoltageSensitivity(M=M, R_common=R_common, X_common=X_common, v_root=net.v_root)


def voltage_objective(net, v):
    """Sum of |v_i - v_ref| over non-root buses (last axis is the bus axis)."""
    v = np.asarray(v)
    return np.abs(v[..., net.nonroot] - net.v_ref).sum(axis=-1)


def voltage_violations(net, v, tol=1e-9):
    v = np.asarray(v)[..., net.nonroot]
    return ((v < net.v_min - tol) | (v > net.v_max + tol)).sum(axis=-1)


def objective_lipschitz(net, sens=None):
    """Bound on |f(q) - f(q')| / ||q - q'||_inf for the OPF objective."""
    sens = sens or voltage_sensitivity(net)
    return float(np.abs(sens.M[net.nonroot]).sum())


@dataclass
class OPFSolution:
    u_star: np.ndarray
    flow: FlowSolution
    objective: float
    lp: object = field(repr=False, default=None)


class OPFModel:
    """LP for one network; only the right-hand side changes between timesteps.

    Variables are ``[q_g (agents), t (non-root buses)]``; ``t_i`` bounds
    ``|v_i - v_ref|`` from above so the LP optimum equals the OPF objective.
    """

    def __init__(self, net, tol=1e-9):
        self.net = net
        self.tol = tol
        self.sens = voltage_sensitivity(net)
        Mn = self.sens.M[net.nonroot]
        n, C = Mn.shape
        eye = np.eye(n)
        zero = np.zeros((n, n))
        self.A_ub = np.block([
            [Mn, -eye],
            [-Mn, -eye],
            [Mn, zero],
            [-Mn, zero],
        ])
        self.c = np.concatenate([np.zeros(C), np.ones(n)])
        self.bounds = [(-q, q) for q in net.q_limits] + [(0.0, None)] * n
        self.n = n

    def solve(self, p_c, q_c, p_g):
        net = self.net
        vb = self.sens.base(p_c, q_c, p_g)[net.nonroot]
        b_ub = np.concatenate([
            net.v_ref - vb,
            vb - net.v_ref,
            net.v_max - vb,
            vb - net.v_min,
        ])
        try:
            lp = solve_lp(self.c, self.A_ub, b_ub, bounds=self.bounds, tol=self.tol)
        except Unbounded as exc:  # pragma: no cover - objective is bounded below by 0
            raise AssertionError("OPF LP reported unbounded") from exc
        C = net.n_agents
        u = np.clip(lp.x[:C], -net.q_limits, net.q_limits)
        flow = solve_flow(net, Injection(p_c, q_c, p_g, u))
        return OPFSolution(u_star=u, flow=flow, objective=float(voltage_objective(net, flow.v)), lp=lp)


def solve_opf(net, inj_uncontrolled, tol=1e-9):
    """Minimize total squared-voltage deviation over DER reactive setpoints.

    Raises :class:`Infeasible` when no admissible ``q_g`` keeps every bus
    inside ``[v_min, v_max]``.
    """
    _check_injection(net, Injection(inj_uncontrolled.p_c, inj_uncontrolled.q_c,
                                    inj_uncontrolled.p_g, None))
    return OPFModel(net, tol).solve(inj_uncontrolled.p_c, inj_uncontrolled.q_c, inj_uncontrolled.p_g)


# -- file formats ---------------------------------------------------------

def network_to_dict(net):
    return {
        "format": FORMAT_VERSION,
        "name": net.name,
        "root_id": net.root_id,
        "v_ref": net.v_ref,
        "v_min": net.v_min,
        "v_max": net.v_max,
        "v_root": net.v_root,
        "buses": [{"id": b.id, "has_der": b.has_der, "q_limit": b.q_limit} for b in net.buses],
        "lines": [{"from": ln.from_id, "to": ln.to_id, "r": ln.r, "xi": ln.xi} for ln in net.lines],
    }


def network_from_dict(d):
    if d.get("format") != FORMAT_VERSION:
        raise ValidationError(f"unsupported network format {d.get('format')!r}")
    buses = [Bus(int(b["id"]), bool(b.get("has_der", False)), float(b.get("q_limit", 0.0)))
             for b in d["buses"]]
    lines = [Line(int(ln["from"]), int(ln["to"]), float(ln["r"]), float(ln["xi"]))
             for ln in d["lines"]]
    return RadialNetwork(
        buses=buses, lines=lines,
        root_id=int(d.get("root_id", 0)),
        v_ref=float(d.get("v_ref", 1.0)),
        v_min=float(d.get("v_min", V_MIN_DEFAULT)),
        v_max=float(d.get("v_max", V_MAX_DEFAULT)),
        v_root=float(d.get("v_root", 1.0)),
        name=str(d.get("name", "network")),
    )


def load_network(path):
    with open(path) as fh:
        return network_from_dict(yaml.safe_load(fh))


def save_network(net, path):
    with open(path, "w") as fh:
        yaml.safe_dump(network_to_dict(net), fh, sort_keys=False)


def injection_columns(net):
    ids = net.bus_ids
    return ([f"p_c_{b}" for b in ids], [f"q_c_{b}" for b in ids], [f"p_g_{b}" for b in ids])


def injection_arrays(net, frame):
    """Pull ``(p_c, q_c, p_g)`` as ``(T, n_bus)`` arrays from a tabular frame.

    Buses missing from the frame (e.g. the substation) are taken as zero.
    """
    out = []
    for cols in injection_columns(net):
        arr = np.zeros((len(frame), net.n_bus))
        for k, c in enumerate(cols):
            if c in frame.columns:
                arr[:, k] = frame[c].to_numpy(dtype=float)
        out.append(arr)
    return tuple(out)


def solution_frame(net, q_g, v, index=None):
    """Tabular ``q_g_<bus>`` / ``v_<bus>`` columns for a batch of solutions."""
    data = {f"q_g_{a}": q_g[:, k] for k, a in enumerate(net.agents)}
    data.update({f"v_{b}": v[:, k] for k, b in enumerate(net.bus_ids)})
    return pd.DataFrame(data, index=index)
