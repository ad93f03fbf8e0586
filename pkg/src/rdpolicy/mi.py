"""Discretized mutual-information estimation.

Continuous columns are binned (quantile or equal-width), multi-column
variables are product-coded into a single alphabet, and entropies are
estimated by a pluggable estimator. The default ``plugin-mm`` estimator is
the plug-in entropy with the Miller-Madow ``(K_observed - 1) / 2T`` bias
correction. Everything is in nats.
"""

from dataclasses import dataclass, field
import warnings

import numpy as np
import pandas as pd

from .errors import AlphabetExplosion, LengthMismatch, ValidationError

MAX_DEFAULT_BINS = 32
JOINT_CELL_FRACTION = 5  # occupied joint cells must stay <= T / 5


class DegenerateColumnWarning(UserWarning):
    pass


@dataclass(frozen=True)
class DiscretizationScheme:
    kind: str = "quantile"
    bins: int = None  # None: default_bins(T)

    def __post_init__(self):
        if self.kind not in ("quantile", "width"):
            raise ValidationError(f"unknown discretization kind {self.kind!r}")
        if self.bins is not None and self.bins < 2:
            raise ValidationError("need at least 2 bins")

    def resolve(self, T):
        return self.bins if self.bins is not None else default_bins(T)

    def with_bins(self, bins):
        return DiscretizationScheme(self.kind, bins)


def default_bins(T):
    return int(min(MAX_DEFAULT_BINS, max(2, np.floor(np.cbrt(T) + 1e-9))))


@dataclass
class Discretized:
    labels: np.ndarray  # (T, d) int
    edges: list
    degenerate: list = field(default_factory=list)


def _bin_column(col, kind, bins):
    if kind == "quantile":
        edges = np.quantile(col, np.arange(1, bins) / bins)
    else:
        edges = np.linspace(col.min(), col.max(), bins + 1)[1:-1]
    edges = np.unique(edges)
    # values sitting on an edge go to the lower bin
    return np.searchsorted(edges, col, side="left"), edges


def discretize(samples, scheme=DiscretizationScheme()):
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    T, d = samples.shape
    bins = scheme.resolve(T)
    if T < bins:
        raise ValidationError(f"need at least {bins} samples for {bins} bins, got {T}")
    labels = np.zeros((T, d), dtype=np.int64)
    edges = []
    degenerate = []
    for j in range(d):
        col = samples[:, j]
        if col.min() == col.max():
            degenerate.append(j)
            edges.append(np.array([]))
            continue
        labels[:, j], e = _bin_column(col, scheme.kind, bins)
        edges.append(e)
    if degenerate:
        warnings.warn(f"constant columns {degenerate} collapsed to a single bin", DegenerateColumnWarning,
                      stacklevel=2)
    return Discretized(labels=labels, edges=edges, degenerate=degenerate)


def product_code(*columns):
    """Compact integer code for the tuple of label columns, row by row."""
    cols = []
    for c in columns:
        c = np.asarray(c)
        cols.extend(c.T if c.ndim == 2 else [c])
    if not cols:
        raise ValidationError("nothing to product-code")
    T = len(cols[0])
    code = np.zeros(T, dtype=np.int64)
    for c in cols:
        if len(c) != T:
            raise LengthMismatch("label columns differ in length")
        _, c = np.unique(c, return_inverse=True)
        code = code * (int(c.max()) + 1) + c
        _, code = np.unique(code, return_inverse=True)
    return code.astype(np.int64)


def _sorted_counts(labels):
    _, counts = np.unique(labels, return_counts=True)
    return np.sort(counts)


def plugin_entropy(labels):
    counts = _sorted_counts(labels).astype(float)
    T = counts.sum()
    return float(np.log(T) - (counts * np.log(counts)).sum() / T)


def miller_madow_entropy(labels):
    counts = _sorted_counts(labels).astype(float)
    T = counts.sum()
    h = np.log(T) - (counts * np.log(counts)).sum() / T
    return float(h + (counts.size - 1) / (2.0 * T))


ESTIMATORS = {
    "plugin-mm": miller_madow_entropy,
    "plugin": plugin_entropy,
}


def get_estimator(name):
    try:
        return ESTIMATORS[name]
    except KeyError:
        raise ValidationError(f"unknown estimator {name!r}; available: {sorted(ESTIMATORS)}") from None


def entropy_est(labels, alphabet_size=None, estimator="plugin-mm"):
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = product_code(labels)
    if labels.size == 0:
        raise ValidationError("entropy of an empty sample")
    if alphabet_size is not None and np.unique(labels).size > alphabet_size:
        raise ValidationError(f"more than {alphabet_size} distinct labels observed")
    return get_estimator(estimator)(labels)


def mi_est(a_labels, b_labels, estimator="plugin-mm", return_raw=False):
    """I(A; B) = H(A) + H(B) - H(A, B), clamped at zero."""
    a = np.asarray(a_labels)
    b = np.asarray(b_labels)
    if len(a) != len(b):
        raise LengthMismatch(f"label vectors have lengths {len(a)} and {len(b)}")
    a = product_code(a) if a.ndim == 2 else a
    b = product_code(b) if b.ndim == 2 else b
    H = get_estimator(estimator)
    raw = H(a) + H(b) - H(product_code(a, b))
    value = max(raw, 0.0)
    return (value, raw) if return_raw else value


def mi_joint_est(target_labels, observed, estimator="plugin-mm", return_raw=False,
                 cell_fraction=JOINT_CELL_FRACTION):
    """I(target; observed_1, ..., observed_m) on the product-coded observation tuple."""
    target = np.asarray(target_labels)
    T = len(target)
    observed = [np.asarray(o) for o in observed]
    if not observed:
        return (0.0, 0.0) if return_raw else 0.0
    for o in observed:
        if len(o) != T:
            raise LengthMismatch("observed label vectors differ in length from the target")
    obs_code = product_code(*observed)
    joint = product_code(target, obs_code)
    occupied = int(np.unique(joint).size)
    limit = T // cell_fraction
    if occupied > limit:
        dims = sum(np.unique(c).size > 1 for o in [target, *observed]
                   for c in (o.T if o.ndim == 2 else [o]))
        raise AlphabetExplosion(occupied, limit, dims)
    return mi_est(target, obs_code, estimator=estimator, return_raw=return_raw)


# -- dataset-level matrices -------------------------------------------------

@dataclass
class MIMatrix:
    gamma: np.ndarray  # gamma[i, j] = I(x_i; u*_j); rows follow `states`, columns `agents`
    delta: np.ndarray  # delta[i, j] = I(x_i; x_j); diagonal is H(x_i)
    states: list
    agents: list
    scheme: DiscretizationScheme
    sample_count: int
    estimator: str = "plugin-mm"
    gamma_raw: np.ndarray = None
    delta_raw: np.ndarray = None

    def metadata(self):
        return {
            "scheme": self.scheme.kind,
            "bins": self.scheme.resolve(self.sample_count),
            "T": self.sample_count,
            "estimator": self.estimator,
            "units": "nats",
        }

    def to_frames(self):
        g = pd.DataFrame(self.gamma, index=[f"x_{i}" for i in self.states],
                         columns=[f"u_star_{j}" for j in self.agents])
        d = pd.DataFrame(self.delta, index=[f"x_{i}" for i in self.states],
                         columns=[f"x_{j}" for j in self.states])
        return g, d


def node_codes(dataset, scheme, rows=None, nodes=None):
    """Discretize every state column and product-code each node's group."""
    frame = dataset.frame if rows is None else dataset.frame.iloc[rows]
    nodes = dataset.state_nodes if nodes is None else nodes
    out = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateColumnWarning)
        for n in nodes:
            cols = dataset.state_columns[n]
            labels = discretize(frame[cols].to_numpy(dtype=float), scheme).labels
            out[n] = product_code(labels) if labels.shape[1] > 1 else labels[:, 0]
    return out


def action_codes(dataset, scheme, rows=None, agents=None):
    frame = dataset.frame if rows is None else dataset.frame.iloc[rows]
    agents = dataset.agents if agents is None else agents
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateColumnWarning)
        return {a: discretize(frame[dataset.action_columns[a]].to_numpy(dtype=float), scheme).labels[:, 0]
                for a in agents}


def write_mi_matrix(mim, path):
    """Tabular export: ``#`` metadata lines, then the gamma block and the delta block."""
    g, d = mim.to_frames()
    with open(path, "w") as fh:
        for k, v in mim.metadata().items():
            fh.write(f"# {k}: {v}\n")
        fh.write("# block: gamma\n")
        g.to_csv(fh, index_label="state")
        fh.write("# block: delta\n")
        d.to_csv(fh, index_label="state")


def build_mi_matrix(dataset, scheme=DiscretizationScheme(), estimator="plugin-mm", rows=None):
    """Estimate gamma and delta for every state node and agent of a dataset."""
    T = dataset.n_rows if rows is None else len(rows)
    states = list(dataset.state_nodes)
    agents = list(dataset.agents)
    x = node_codes(dataset, scheme, rows)
    u = action_codes(dataset, scheme, rows)
    g_raw = np.array([[mi_est(x[i], u[j], estimator, return_raw=True)[1] for j in agents] for i in states])
    n = len(states)
    d_raw = np.zeros((n, n))
    for p in range(n):
        for q in range(p, n):
            d_raw[p, q] = d_raw[q, p] = mi_est(x[states[p]], x[states[q]], estimator, return_raw=True)[1]
    return MIMatrix(gamma=np.maximum(g_raw, 0.0), delta=np.maximum(d_raw, 0.0), states=states,
                    agents=agents, scheme=scheme, sample_count=T, estimator=estimator,
                    gamma_raw=g_raw, delta_raw=d_raw)
