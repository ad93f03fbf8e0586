"""Per-agent regression policies ``u_hat_i = theta_i . phi_i(observed states)``.

Kernels are explicit monomial lists over the observed raw columns. Fitting
works on standardized term columns (training-split moments) and stores
weights back in raw units, so a saved policy needs nothing but its term list
and weights to predict.
"""

from dataclasses import dataclass, field
import itertools

import numpy as np
import pandas as pd
import scipy.linalg
import yaml

from .errors import MissingColumn, ValidationError
from .grid import Injection, injection_arrays, solve_flow, voltage_objective, voltage_violations
from .report import EvalReport

FORMAT_VERSION = 1
RANK_RTOL = 1e-10


@dataclass(frozen=True)
class FeatureKernel:
    kind: str
    input_labels: tuple
    terms: tuple  # each term is a sorted tuple of input positions; () is the constant

    @classmethod
    def build(cls, kind, input_labels):
        input_labels = tuple(input_labels)
        d = len(input_labels)
        terms = [()] + [(i,) for i in range(d)]
        if kind == "quadratic":
            terms += list(itertools.combinations_with_replacement(range(d), 2))
        elif kind != "linear":
            raise ValidationError(f"unknown kernel kind {kind!r}")
        return cls(kind, input_labels, tuple(terms))

    def term_names(self):
        return [term_name(t, self.input_labels) for t in self.terms]

    def subset(self, keep):
        return FeatureKernel(self.kind, self.input_labels, tuple(self.terms[k] for k in keep))

    def design(self, X):
        """Term matrix for raw inputs ``X`` of shape ``(T, d)``."""
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        out = np.ones((X.shape[0], len(self.terms)))
        for k, t in enumerate(self.terms):
            for i in t:
                out[:, k] *= X[:, i]
        return out


def term_name(term, labels):
    if not term:
        return "1"
    return "*".join(labels[i] for i in term)


def parse_term(name, labels):
    if name == "1":
        return ()
    pos = {l: i for i, l in enumerate(labels)}
    try:
        return tuple(sorted(pos[p] for p in name.split("*")))
    except KeyError as exc:
        raise ValidationError(f"term {name!r} uses unknown input {exc}") from None


@dataclass
class LeastSquaresFit:
    theta: np.ndarray
    rank: int

    @property
    def rank_deficient(self):
        return self.rank < self.theta.size


def fit_least_squares(features, targets, rtol=RANK_RTOL):
    """Minimum-norm least squares via a complete orthogonal decomposition.

    Pivoted QR fixes the numerical rank; a second QR of the leading rows
    removes the null-space component so collinear columns share weight the
    way the pseudoinverse would.
    """
    A = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float)
    m = A.shape[1]
    if m == 0:
        return LeastSquaresFit(np.zeros(0), 0)
    Q, R, piv = scipy.linalg.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > rtol * diag[0])) if diag.size and diag[0] > 0 else 0
    theta = np.zeros(m)
    if rank == 0:
        return LeastSquaresFit(theta, 0)
    qty = Q[:, :rank].T @ y
    if rank == m:
        z = scipy.linalg.solve_triangular(R[:rank, :rank], qty)
    else:
        # R[:rank] = T^T Z^T  with  R[:rank]^T = Z T
        Z, Tm = scipy.linalg.qr(R[:rank].T, mode="economic")
        w = scipy.linalg.solve_triangular(Tm.T, qty, lower=True)
        z = Z @ w
    theta[piv] = z
    return LeastSquaresFit(theta, rank)


@dataclass
class AgentPolicy:
    agent: int
    observed: tuple  # node ids, own node first
    kernel: FeatureKernel
    theta: np.ndarray
    q_limit: float = None
    train_mse: float = float("nan")
    val_mse: float = float("nan")
    test_mse: float = float("nan")
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.size != len(self.kernel.terms):
            raise ValidationError("theta length does not match the kernel term list")


def _raw_matrix(policy, rows):
    labels = policy.kernel.input_labels
    if isinstance(rows, pd.DataFrame):
        missing = [l for l in labels if l not in rows.columns]
        if missing:
            raise MissingColumn(f"missing observed columns {missing}")
        return rows[list(labels)].to_numpy(dtype=float)
    try:
        return np.array([[float(rows[l]) for l in labels]])
    except KeyError as exc:
        raise MissingColumn(f"missing observed column {exc}") from None


def predict(policy, raw, clip=False):
    """Policy output for one row (mapping) or many rows (DataFrame)."""
    X = _raw_matrix(policy, raw)
    out = policy.kernel.design(X) @ policy.theta
    if clip and policy.q_limit is not None:
        out = np.clip(out, -policy.q_limit, policy.q_limit)
    return out if isinstance(raw, pd.DataFrame) else float(out[0])


class _Standardized:
    """Term columns standardized with training moments; constant term kept at one."""

    def __init__(self, F_train):
        self.mu = F_train.mean(axis=0)
        self.sd = F_train.std(axis=0)
        self.const = self.sd <= 1e-12 * np.maximum(1.0, np.abs(self.mu))
        self.mu[self.const] = 0.0
        self.sd[self.const] = 1.0

    def __call__(self, F):
        return (F - self.mu) / self.sd

    def to_raw(self, cols, theta_std):
        """Raw-unit weights for the term subset ``cols`` (which starts with the constant)."""
        theta = theta_std / self.sd[cols]
        theta[0] = theta_std[0] - np.sum(theta_std[1:] * self.mu[cols[1:]] / self.sd[cols[1:]])
        return theta


def _distinct_columns(Z, cols, tol=1e-9):
    """Drop columns that repeat an earlier one up to sign (e.g. q_c terms when q_c is a fixed multiple of p_c)."""
    keep = []
    for c in cols:
        if not any(min(np.max(np.abs(Z[:, c] - Z[:, k])), np.max(np.abs(Z[:, c] + Z[:, k]))) <= tol
                   for k in keep):
            keep.append(c)
    return keep


def stepwise_select(dataset, agent, kind="quadratic", observed=None, q_limit=None,
                    drop_tol=1e-4, add_factor=4.0, max_steps=500):
    """Hybrid forward/backward term selection on validation MSE.

    Starts from the constant. A forward step adds the candidate term with the
    lowest validation MSE if its relative improvement beats ``drop_tol`` and
    ``add_factor`` times the spread a useless term would produce by chance,
    ``2 / sqrt(n_train * n_val)``. After each addition, terms whose removal
    worsens validation MSE by at most ``drop_tol`` (relative) are dropped,
    best first.
    """
    observed = tuple(observed) if observed is not None else (agent,)
    if observed[0] != agent:
        observed = (agent,) + tuple(n for n in observed if n != agent)
    inputs = [c for n in observed for c in dataset.state_columns[n]]
    kernel = FeatureKernel.build(kind, inputs)
    tr, va = dataset.rows("train"), dataset.rows("val")
    target = dataset.action_columns[agent]
    y_tr = dataset.frame[target].to_numpy(dtype=float)[tr]
    y_va = dataset.frame[target].to_numpy(dtype=float)[va]
    X = dataset.frame[inputs].to_numpy(dtype=float)
    F_all = kernel.design(X)
    std = _Standardized(F_all[tr])
    Z_tr, Z_va = std(F_all[tr]), std(F_all[va])
    candidates = _distinct_columns(Z_tr, [k for k in range(1, len(kernel.terms)) if not std.const[k]])

    def fit(cols):
        th = fit_least_squares(Z_tr[:, cols], y_tr).theta
        return th, y_va - Z_va[:, cols] @ th

    noise_floor = add_factor * 2.0 / np.sqrt(max(len(tr), 1) * max(len(va), 1))
    model = [0]
    _, err = fit(model)
    mse = float(np.mean(err ** 2))
    seen = {tuple(model)}
    for _ in range(max_steps):
        best = None
        for c in candidates:
            if c in model:
                continue
            _, e = fit(model + [c])
            m = float(np.mean(e ** 2))
            if best is None or m < best[1]:
                best = (c, m, e)
        if best is None:
            break
        c, m_new, e_new = best
        if not mse - m_new > max(drop_tol, noise_floor) * mse:
            break
        model = sorted(model + [c])
        mse, err = m_new, e_new
        while len(model) > 1:
            drops = []
            for c in model[1:]:
                trial = [k for k in model if k != c]
                _, e = fit(trial)
                drops.append((float(np.mean(e ** 2)), c, e))
            m_drop, c, e = min(drops, key=lambda t: (t[0], t[1]))
            if m_drop > mse * (1.0 + drop_tol):
                break
            model = [k for k in model if k != c]
            mse, err = m_drop, e
        if tuple(model) in seen:
            break
        seen.add(tuple(model))

    theta_std, err = fit(model)
    theta = std.to_raw(model, theta_std)
    sub = kernel.subset(model)
    train_mse = float(np.mean((F_all[tr][:, model] @ theta - y_tr) ** 2))
    return AgentPolicy(agent=agent, observed=observed, kernel=sub, theta=theta, q_limit=q_limit,
                       train_mse=train_mse, val_mse=float(np.mean(err ** 2)),
                       meta={"selected_terms": sub.term_names()})


def fit_fixed(dataset, agent, kind="linear", observed=None, q_limit=None):
    """Least-squares fit of every kernel term (no selection)."""
    observed = tuple(observed) if observed is not None else (agent,)
    inputs = [c for n in observed for c in dataset.state_columns[n]]
    kernel = FeatureKernel.build(kind, inputs)
    tr = dataset.rows("train")
    y = dataset.frame[dataset.action_columns[agent]].to_numpy(dtype=float)[tr]
    F = kernel.design(dataset.frame[inputs].to_numpy(dtype=float)[tr])
    std = _Standardized(F)
    cols = list(range(len(kernel.terms)))
    theta = std.to_raw(cols, fit_least_squares(std(F), y).theta)
    return AgentPolicy(agent=agent, observed=observed, kernel=kernel, theta=theta, q_limit=q_limit,
                       train_mse=float(np.mean((F @ theta - y) ** 2)))


@dataclass
class PolicySet:
    policies: list
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        agents = [p.agent for p in self.policies]
        if len(set(agents)) != len(agents):
            raise ValidationError("more than one policy for an agent")

    @property
    def agents(self):
        return [p.agent for p in self.policies]

    def get(self, agent):
        for p in self.policies:
            if p.agent == agent:
                return p
        raise KeyError(agent)

    def predict_all(self, frame, clip=True):
        return np.column_stack([predict(p, frame, clip=clip) for p in self.policies]) \
            if self.policies else np.zeros((len(frame), 0))


def policy_to_dict(p):
    return {
        "agent": p.agent,
        "observed": list(p.observed),
        "kind": p.kernel.kind,
        "inputs": list(p.kernel.input_labels),
        "terms": p.kernel.term_names(),
        "theta": [float(t) for t in p.theta],
        "q_limit": p.q_limit,
        "train_mse": float(p.train_mse),
        "val_mse": float(p.val_mse),
        "test_mse": float(p.test_mse),
        "meta": p.meta,
    }


def policy_from_dict(d):
    inputs = tuple(d["inputs"])
    terms = tuple(parse_term(t, inputs) for t in d["terms"])
    kernel = FeatureKernel(d["kind"], inputs, terms)
    return AgentPolicy(agent=int(d["agent"]), observed=tuple(d["observed"]), kernel=kernel,
                       theta=np.array(d["theta"], dtype=float), q_limit=d.get("q_limit"),
                       train_mse=float(d.get("train_mse", "nan")), val_mse=float(d.get("val_mse", "nan")),
                       test_mse=float(d.get("test_mse", "nan")), meta=d.get("meta", {}))


def save_policy_set(ps, path):
    doc = {"format": FORMAT_VERSION, "provenance": ps.provenance,
           "policies": [policy_to_dict(p) for p in ps.policies]}
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)


def load_policy_set(path):
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if doc.get("format") != FORMAT_VERSION:
        raise ValidationError(f"unsupported policy format {doc.get('format')!r}")
    return PolicySet([policy_from_dict(d) for d in doc["policies"]], doc.get("provenance", {}))


# -- closed-loop evaluation -------------------------------------------------

def evaluate_policy_set(policies, dataset, net, rows=None, clip=True, gap_eps=1e-4):
    """Replay policies on ``rows`` and score them against no control and the OPF labels."""
    rows = dataset.rows("test") if rows is None else np.asarray(rows)
    frame = dataset.frame.iloc[rows]
    p_c, q_c, p_g = injection_arrays(net, frame)
    U_star = frame[[f"u_star_{a}" for a in net.agents]].to_numpy(dtype=float)
    U_hat = np.zeros_like(U_star)
    U_raw = np.zeros_like(U_star)
    for k, a in enumerate(net.agents):
        if a in policies.agents:
            p = policies.get(a)
            U_raw[:, k] = predict(p, frame, clip=False)
            U_hat[:, k] = predict(p, frame, clip=clip)

    n = len(rows)
    V = {name: np.zeros((n, net.n_bus)) for name in ("nocontrol", "decentral", "central")}
    zero = np.zeros(net.n_agents)
    for r in range(n):
        for name, u in (("nocontrol", zero), ("decentral", U_hat[r]), ("central", U_star[r])):
            V[name][r] = solve_flow(net, Injection(p_c[r], q_c[r], p_g[r], u)).v

    table = pd.DataFrame({"row": rows})
    for col in ("t", "day", "hour"):
        if col in frame.columns:
            table[col] = frame[col].to_numpy()
    nonroot = net.nonroot
    for name, v in V.items():
        table[f"f_{name}"] = voltage_objective(net, v)
        table[f"viol_{name}"] = voltage_violations(net, v)
        table[f"maxdev_{name}"] = np.abs(v[:, nonroot] - net.v_ref).max(axis=1)
        table[f"vmin_{name}"] = v[:, nonroot].min(axis=1)
        table[f"vmax_{name}"] = v[:, nonroot].max(axis=1)
    f_star = table["f_central"].to_numpy()
    table["gap"] = (table["f_decentral"].to_numpy() - f_star) / np.maximum(f_star, gap_eps)

    per_agent = {a: float(np.mean((U_hat[:, k] - U_star[:, k]) ** 2)) for k, a in enumerate(net.agents)}
    per_agent_raw = {a: float(np.mean((U_raw[:, k] - U_star[:, k]) ** 2)) for k, a in enumerate(net.agents)}
    summary = {
        "rows": int(n),
        "distortion_per_agent": per_agent,
        "distortion_per_agent_unclipped": per_agent_raw,
        "distortion_total": float(sum(per_agent.values())),
        "objective_mean": {k: float(table[f"f_{k}"].mean()) for k in V},
        "violations": {k: int(table[f"viol_{k}"].sum()) for k in V},
        "violating_rows": {k: int((table[f"viol_{k}"] > 0).sum()) for k in V},
        "max_deviation": {k: float(table[f"maxdev_{k}"].max()) for k in V},
        "gap_mean": float(table["gap"].mean()),
        "gap_max": float(table["gap"].max()),
        "gap_eps": gap_eps,
        "clipped": bool(clip),
    }
    cols = {"agent": net.agents, "mse": [per_agent[a] for a in net.agents],
            "mse_unclipped": [per_agent_raw[a] for a in net.agents]}
    return EvalReport("policy-evaluation", summary, {"rows": table, "agents": pd.DataFrame(cols)})
