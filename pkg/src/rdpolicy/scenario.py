"""Synthetic data: Gaussian samples and daily load/PV profiles labelled by the OPF."""

from dataclasses import asdict, dataclass, field
import re

import numpy as np
import pandas as pd
import yaml

from .errors import Infeasible, InfeasibleRow, ValidationError
from .grid import OPFModel, injection_arrays, validate_network

_STATE = re.compile(r"^(p_c|q_c|p_g|x)_(\d+)$")
_ACTION = re.compile(r"^u_star_(\d+)$")
SPLIT_NAMES = ("train", "val", "test")


@dataclass
class TimeSeriesDataset:
    """Rows are timesteps; columns are per-node states and per-agent optimal actions.

    ``state_columns`` maps node id to its state columns (three for a feeder
    bus, one for a Gaussian node) and ``action_columns`` maps agent id to
    its ``u_star_<id>`` column. ``split`` labels each row train/val/test.
    """
    frame: pd.DataFrame
    state_columns: dict
    action_columns: dict
    split: np.ndarray = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_frame(cls, frame, meta=None, split=None):
        states, actions = {}, {}
        for col in frame.columns:
            m = _STATE.match(col)
            if m:
                states.setdefault(int(m.group(2)), []).append(col)
                continue
            m = _ACTION.match(col)
            if m:
                actions[int(m.group(1))] = col
        frame = frame.reset_index(drop=True)
        return cls(frame=frame, state_columns=dict(sorted(states.items())),
                   action_columns=dict(sorted(actions.items())), split=split, meta=dict(meta or {}))

    @property
    def n_rows(self):
        return len(self.frame)

    @property
    def state_nodes(self):
        return list(self.state_columns)

    @property
    def agents(self):
        return list(self.action_columns)

    def rows(self, part):
        if self.split is None:
            raise ValidationError("dataset has no train/val/test split")
        return np.flatnonzero(self.split == part)

    def with_split(self, seed, fractions=(0.70, 0.15, 0.15)):
        """Shuffle timesteps with ``seed`` and cut them into train/val/test."""
        T = self.n_rows
        perm = np.random.default_rng(seed).permutation(T)
        n_tr = int(round(fractions[0] * T))
        n_va = int(round(fractions[1] * T))
        split = np.empty(T, dtype=object)
        split[perm[:n_tr]] = "train"
        split[perm[n_tr:n_tr + n_va]] = "val"
        split[perm[n_tr + n_va:]] = "test"
        meta = dict(self.meta, split_seed=int(seed), split_fractions=list(fractions))
        return TimeSeriesDataset(self.frame, self.state_columns, self.action_columns,
                                 split.astype(str), meta)

    def subset(self, parts):
        """Dataset restricted to the rows of the named split parts."""
        keep = np.flatnonzero(np.isin(self.split, list(parts)))
        frame = self.frame.iloc[keep].reset_index(drop=True)
        meta = dict(self.meta, source_rows=keep.tolist())
        return TimeSeriesDataset(frame, self.state_columns, self.action_columns, self.split[keep], meta)

    def training_view(self):
        """Train and validation rows only; test rows are physically absent."""
        return self.subset(("train", "val"))

    def states(self, nodes, rows=None):
        cols = [c for n in nodes for c in self.state_columns[n]]
        frame = self.frame if rows is None else self.frame.iloc[rows]
        return frame[cols]

    def actions(self, rows=None):
        frame = self.frame if rows is None else self.frame.iloc[rows]
        return frame[[self.action_columns[a] for a in self.agents]].to_numpy(dtype=float)

    def save(self, path):
        self.frame.to_csv(path, index=False, float_format="%.17g")
        meta = dict(self.meta)
        if self.split is not None:
            meta["split"] = {p: self.rows(p).tolist() for p in SPLIT_NAMES}
        with open(f"{path}.meta.yaml", "w") as fh:
            yaml.safe_dump(meta, fh, sort_keys=False)

    @classmethod
    def load(cls, path):
        frame = pd.read_csv(path, float_precision="round_trip")
        try:
            with open(f"{path}.meta.yaml") as fh:
                meta = yaml.safe_load(fh) or {}
        except FileNotFoundError:
            meta = {}
        split = None
        if "split" in meta:
            split = np.empty(len(frame), dtype=object)
            for part, idx in meta.pop("split").items():
                split[idx] = part
            split = split.astype(str)
        return cls.from_frame(frame, meta, split)


# -- Gaussian ---------------------------------------------------------------

def gen_gaussian_dataset(ens, T, seed):
    """``T`` i.i.d. draws from the ensemble, one column per ensemble label."""
    rng = np.random.default_rng(seed)
    data = ens.draw(T, rng)
    frame = pd.DataFrame(data, columns=list(ens.labels))
    frame.insert(0, "t", np.arange(T))
    return TimeSeriesDataset.from_frame(frame, {"source": "gaussian", "seed": int(seed), "T": int(T)})


# -- feeder time series -----------------------------------------------------

@dataclass
class LoadShape:
    baseline: float = 0.45
    morning_peak: float = 0.35
    morning_hour: float = 7.5
    morning_width: float = 3.0
    evening_peak: float = 0.75
    evening_hour: float = 19.0
    evening_width: float = 4.0


@dataclass
class LoadProfileSpec:
    base_load: dict  # bus id -> peak-scale real load (p.u.)
    pv_capacity: dict = field(default_factory=dict)  # bus id -> PV nameplate (p.u.)
    days: int = 30
    step_minutes: int = 15
    load_shape: LoadShape = field(default_factory=LoadShape)
    power_factor: float = 0.95
    noise_std: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.load_shape, dict):
            self.load_shape = LoadShape(**self.load_shape)
        self.base_load = {int(k): float(v) for k, v in self.base_load.items()}
        self.pv_capacity = {int(k): float(v) for k, v in self.pv_capacity.items()}
        if not 0 < self.power_factor <= 1:
            raise ValidationError("power factor must lie in (0, 1]")
        if any(v < 0 for v in self.base_load.values()) or any(v < 0 for v in self.pv_capacity.values()):
            raise ValidationError("loads and PV capacities must be non-negative")
        if (24 * 60) % self.step_minutes:
            raise ValidationError("step_minutes must divide a day")

    @property
    def pv_buses(self):
        return sorted(b for b, c in self.pv_capacity.items() if c > 0)

    def to_dict(self):
        return asdict(self)


def _raised_cosine(hour, centre, width):
    d = np.abs((hour - centre + 12.0) % 24.0 - 12.0)
    return np.where(d < width, 0.5 * (1.0 + np.cos(np.pi * d / width)), 0.0)


def load_template(hour, shape):
    """Double-peaked diurnal load multiplier."""
    return (shape.baseline
            + shape.morning_peak * _raised_cosine(hour, shape.morning_hour, shape.morning_width)
            + shape.evening_peak * _raised_cosine(hour, shape.evening_hour, shape.evening_width))


def pv_template(hour):
    """Half-sine between 07:00 and 19:00, zero otherwise."""
    return np.where((hour > 7.0) & (hour < 19.0), np.sin(np.pi * (hour - 7.0) / 12.0), 0.0)


def gen_feeder_timeseries(net, spec):
    """Uncontrolled injections for every non-root bus, one row per timestep."""
    validate_network(net, require_agents=False)
    rng = np.random.default_rng(spec.seed)
    steps = 24 * 60 // spec.step_minutes
    T = spec.days * steps
    t = np.arange(T)
    hour = (t % steps) * spec.step_minutes / 60.0
    day = t // steps
    buses = [b for b in net.bus_ids if b != net.root_id]
    for b in list(spec.base_load) + list(spec.pv_capacity):
        if b not in buses:
            raise ValidationError(f"profile references bus {b}, which is not a non-root bus")
    s = spec.noise_std
    tan_phi = np.tan(np.arccos(spec.power_factor))
    shape = load_template(hour, spec.load_shape)
    sun = pv_template(hour)
    clearness = np.clip(1.0 - 2.0 * s * np.abs(rng.standard_normal(spec.days)), 0.1, 1.0)

    cols = {"t": t, "day": day, "hour": hour}
    for b in buses:
        base = spec.base_load.get(b, 0.0)
        day_factor = np.exp(s * rng.standard_normal(spec.days) - 0.5 * s * s)
        step_noise = np.exp(s * rng.standard_normal(T) - 0.5 * s * s)
        p_c = base * shape * day_factor[day] * step_noise
        cap = spec.pv_capacity.get(b, 0.0)
        cloud = np.clip(1.0 + s * rng.standard_normal(T), 0.0, 1.0)
        p_g = cap * sun * clearness[day] * cloud
        cols[f"p_c_{b}"] = p_c
        cols[f"q_c_{b}"] = p_c * tan_phi
        cols[f"p_g_{b}"] = p_g
    frame = pd.DataFrame(cols)
    frame.attrs["meta"] = {"source": "feeder", "network": net.name, "network_hash": net.hash(),
                           "steps_per_day": steps, "profile": spec.to_dict()}
    return frame


def label_with_opf(net, injections, meta=None):
    """Solve the OPF on every row and append ``u_star_<agent>`` columns."""
    validate_network(net, require_agents=False)
    model = OPFModel(net)
    p_c, q_c, p_g = injection_arrays(net, injections)
    U = np.zeros((len(injections), net.n_agents))
    objective = np.zeros(len(injections))
    for r in range(len(injections)):
        try:
            sol = model.solve(p_c[r], q_c[r], p_g[r])
        except Infeasible as exc:
            raise InfeasibleRow(r, f"OPF infeasible at row {r}: {exc}") from exc
        U[r] = sol.u_star
        objective[r] = sol.objective
    frame = injections.copy()
    for k, a in enumerate(net.agents):
        frame[f"u_star_{a}"] = U[:, k]
    frame["f_central"] = objective
    meta = dict(injections.attrs.get("meta", {}), **(meta or {}))
    return TimeSeriesDataset.from_frame(frame, meta)


def profile_spec_from_dict(d):
    return LoadProfileSpec(**d)
