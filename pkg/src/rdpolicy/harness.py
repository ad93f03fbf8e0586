"""Experiment orchestration.

Four experiments, each returning an :class:`EvalReport`:

``gaussian-rd``
    closed-form minimal distortion against Monte-Carlo and fitted regressors.
``gaussian-comm``
    optimal against random observation sets on a Gaussian ensemble.
``opf-pipeline``
    generate, label, split, train, and replay policies on a feeder.
``opf-comm``
    sample-based observation-set selection on a labelled feeder dataset.

All randomness derives from one root seed through named substreams.
"""

from dataclasses import asdict, dataclass, field, fields
from importlib import resources
import os
import zlib

import numpy as np
import pandas as pd
import yaml

from .comm import (GaussianOracle, N_RANDOM, SampleOracle, distortion_vs_k_curve, gaussian_evaluator,
                   random_sets, select_exhaustive, select_greedy)
from .errors import AlphabetExplosion, ValidationError
from .gaussian_rd import (conditional_regressor, load_ensemble, minimal_distortion, optimal_stddev_shrinkage,
                          planted_comm_ensemble, random_ensemble)
from .grid import load_network, validate_network, voltage_sensitivity, voltage_violations, injection_arrays
from .mi import DiscretizationScheme, discretize, get_estimator, mi_est
from .policy import PolicySet, evaluate_policy_set, fit_fixed, predict, save_policy_set, stepwise_select
from .report import EvalReport, config_hash
from .scenario import TimeSeriesDataset, gen_feeder_timeseries, gen_gaussian_dataset, label_with_opf, \
    profile_spec_from_dict

EXPERIMENTS = ("gaussian-rd", "gaussian-comm", "opf-pipeline", "opf-comm")
SUBSTREAMS = ("ensemble", "dataset", "montecarlo", "scenario", "split", "selection-baseline")
DPI_SLACK = 0.05
MC_CHUNK = 200_000
MULTI_NODE_BINS = 8


def substream(root, name):
    """Deterministic child seed for a named stage."""
    ss = np.random.SeedSequence([int(root), zlib.crc32(name.encode())])
    return int(ss.generate_state(1, np.uint64)[0])


def packaged(name):
    return str(resources.files("rdpolicy") / "data" / name)


@dataclass
class ExperimentConfig:
    experiment: str = "opf-pipeline"
    seed: int = 0
    out: str = None
    network: str = None
    profile: str = None
    dataset: str = None
    ensemble: str = None
    days: int = None
    k_range: tuple = None
    estimator: str = "plugin-mm"
    scheme: str = "quantile"
    bins: int = None
    agents: list = None
    n_agents: int = 10
    n_samples: int = 1_000_000
    T: int = 100_000
    kernel: str = "quadratic"
    comm_kernel: str = "linear"
    n_random: int = N_RANDOM
    clip: bool = True
    gap_eps: float = 1e-4

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValidationError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        for name in ("network", "profile", "dataset", "ensemble"):
            path = getattr(self, name)
            if path is not None and not os.path.exists(path):
                raise ValidationError(f"{name} file {path!r} does not exist")
        if self.k_range is not None:
            a, b = self.k_range
            if a < 0 or b < a:
                raise ValidationError(f"bad k range {a}..{b}")
            self.k_range = (int(a), int(b))
        get_estimator(self.estimator)
        self.discretization()

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = sorted(set(d) - known)
        if extra:
            raise ValidationError(f"unknown config keys {extra}")
        return cls(**d)

    @classmethod
    def load(cls, path, **overrides):
        with open(path) as fh:
            d = yaml.safe_load(fh) or {}
        d.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(d)

    def discretization(self):
        return DiscretizationScheme(self.scheme, self.bins)

    def seeds(self):
        return {name: substream(self.seed, name) for name in SUBSTREAMS}

    def ks(self, n_candidates):
        a, b = self.k_range if self.k_range is not None else (0, n_candidates)
        if b > n_candidates:
            raise ValidationError(f"k range upper end {b} exceeds the {n_candidates} available nodes")
        return list(range(a, b + 1))

    def to_dict(self):
        d = asdict(self)
        if d["k_range"] is not None:
            d["k_range"] = list(d["k_range"])
        return d


def _stamp(cfg, summary):
    d = cfg.to_dict()
    return {"config": d, "config_hash": config_hash(d), "seeds": cfg.seeds(), **summary}


def _finish(cfg, report, out=None):
    out = out or cfg.out
    if out:
        report.save(out)
    return report


# -- Gaussian experiments ---------------------------------------------------

def _ensemble(cfg, seeds, kind):
    if cfg.ensemble:
        return load_ensemble(cfg.ensemble)
    if kind == "planted":
        return planted_comm_ensemble(seeds["ensemble"])
    return random_ensemble(cfg.n_agents, seeds["ensemble"])


def run_gaussian_rd(cfg):
    """Closed-form D* against Monte-Carlo replay of the conditional-expectation regressors."""
    seeds = cfg.seeds()
    ens = _ensemble(cfg, seeds, "random")
    rate = minimal_distortion(ens)
    agents = rate.agents
    regs = {a: conditional_regressor(ens, a, (a,)) for a in agents}

    rng = np.random.default_rng(seeds["montecarlo"])
    sse = np.zeros(len(agents))
    s1 = np.zeros(len(agents))
    s2 = np.zeros(len(agents))
    left = cfg.n_samples
    while left > 0:
        n = min(MC_CHUNK, left)
        Z = ens.draw(n, rng)
        for k, a in enumerate(agents):
            uhat = regs[a](Z[:, [ens.x(a)]])
            sse[k] += np.sum((uhat - Z[:, ens.u(a)]) ** 2)
            s1[k] += uhat.sum()
            s2[k] += np.sum(uhat ** 2)
        left -= n
    mc_mse = sse / cfg.n_samples
    mc_std = np.sqrt(np.maximum(s2 / cfg.n_samples - (s1 / cfg.n_samples) ** 2, 0.0))

    # learned counterpart on a finite dataset, evaluated on its test split
    ds = gen_gaussian_dataset(ens, cfg.T, seeds["dataset"]).with_split(seeds["split"])
    train = ds.training_view()
    te = ds.rows("test")
    test = ds.frame.iloc[te]
    scheme = cfg.discretization()
    rows = []
    for k, a in enumerate(agents):
        pol = fit_fixed(train, a, "linear")
        uhat = predict(pol, test)
        ustar = test[f"u_star_{a}"].to_numpy()
        x = test[f"x_{a}"].to_numpy()
        lab_u = discretize(ustar, scheme).labels[:, 0]
        mi_x = mi_est(discretize(x, scheme).labels[:, 0], lab_u, cfg.estimator)
        mi_hat = mi_est(discretize(uhat, scheme).labels[:, 0], lab_u, cfg.estimator)
        slope, icpt = float(pol.theta[1]), float(pol.theta[0])
        rows.append({
            "agent": a,
            "sigma_u": ens.std(f"u_star_{a}"),
            "rho": ens.corr(f"u_star_{a}", f"x_{a}"),
            "d_star": float(rate.per_agent[k]),
            "mc_mse": float(mc_mse[k]),
            "slope": float(regs[a].weights[0]),
            "intercept": regs[a].intercept,
            "fit_slope": slope,
            "fit_intercept": icpt,
            "test_mse": float(np.mean((uhat - ustar) ** 2)),
            "shrinkage": optimal_stddev_shrinkage(ens, a),
            "mc_output_std": float(mc_std[k]),
            "gamma_closed": float(rate.gamma[rate.states.index(a), k]) if a in rate.states else np.nan,
            "mi_x_u": mi_x,
            "mi_uhat_u": mi_hat,
            "dpi_ok": bool(mi_hat <= mi_x + DPI_SLACK),
        })
    agents_tab = pd.DataFrame(rows)
    gamma = pd.DataFrame(rate.gamma, columns=[f"u_star_{a}" for a in agents])
    gamma.insert(0, "state", [f"x_{i}" for i in rate.states])
    delta = pd.DataFrame(rate.delta, columns=[f"x_{i}" for i in rate.states])
    delta.insert(0, "state", [f"x_{i}" for i in rate.states])
    mc_total = float(mc_mse.sum())
    summary = {
        "d_star": rate.d_star,
        "mc_total_mse": mc_total,
        "mc_relative_error": abs(mc_total - rate.d_star) / rate.d_star if rate.d_star > 0 else 0.0,
        "n_samples": cfg.n_samples,
        "test_total_mse": float(agents_tab["test_mse"].sum()),
        "dpi_all_ok": bool(agents_tab["dpi_ok"].all()),
        "dpi_slack": DPI_SLACK,
        "scheme": {"kind": scheme.kind, "bins": scheme.resolve(len(te))},
        "estimator": cfg.estimator,
        "units": "nats",
        "assumption": "policies share the mean of u*; D* bounds unbiased policies only",
    }
    report = EvalReport("gaussian-rd", _stamp(cfg, summary),
                        {"agents": agents_tab, "gamma": gamma, "delta": delta})
    return _finish(cfg, report)


def run_gaussian_comm(cfg):
    """Distortion against k for exhaustive, greedy and random observation sets."""
    seeds = cfg.seeds()
    ens = _ensemble(cfg, seeds, "planted")
    agent = cfg.agents[0] if cfg.agents else ens.agents[0]
    oracle = GaussianOracle(ens)
    evaluate = gaussian_evaluator(ens)
    cands = oracle.candidates(agent)
    ks = cfg.ks(len(cands))
    rng = np.random.default_rng(seeds["selection-baseline"])
    opt = distortion_vs_k_curve(oracle, evaluate, agent, ks, "optimal")
    rnd = distortion_vs_k_curve(oracle, evaluate, agent, ks, "random", n_random=cfg.n_random, rng=rng)
    grd = distortion_vs_k_curve(oracle, evaluate, agent, ks, "optimal", method="greedy")
    grd["strategy"] = "greedy"

    # replay each chosen regressor on fresh samples
    mc_rng = np.random.default_rng(seeds["montecarlo"])
    n_mc = min(cfg.n_samples, 200_000)
    Z = ens.draw(n_mc, mc_rng)
    emp = []
    for members in opt["members"]:
        S = (agent,) + tuple(int(m) for m in members.split())
        reg = conditional_regressor(ens, agent, S)
        uhat = reg(Z[:, [ens.x(j) for j in S]])
        emp.append(float(np.mean((uhat - Z[:, ens.u(agent)]) ** 2)))
    opt["empirical"] = emp
    curves = pd.concat([opt, rnd, grd], ignore_index=True)

    d_opt = opt["distortion"].to_numpy()
    d_rnd = rnd["distortion"].to_numpy()
    full = conditional_regressor(ens, agent, tuple(ens.states)).predicted_mse
    k1 = opt.loc[opt["k"] == 1, "members"]
    summary = {
        "agent": agent,
        "k_range": [ks[0], ks[-1]],
        "chosen_k1": int(k1.iloc[0]) if len(k1) else None,
        "argmax_single_mi": int(max(sorted(cands), key=lambda j: (oracle(agent, (j,)), -j))),
        "optimal_le_random": bool(np.all(d_opt <= d_rnd + 1e-12)),
        "optimal_nonincreasing": bool(np.all(np.diff(d_opt) <= 1e-12)),
        "full_information_mse": full,
        "n_random": cfg.n_random,
        "mc_samples": n_mc,
    }
    report = EvalReport("gaussian-comm", _stamp(cfg, summary), {"curves": curves})
    return _finish(cfg, report)


# -- feeder experiments -----------------------------------------------------

def _network(cfg):
    net = load_network(cfg.network or packaged("feeder15.yaml"))
    validate_network(net, require_agents=False)
    return net


def opf_dataset(cfg, net, seeds=None):
    """Labelled, split dataset: loaded from ``cfg.dataset`` or generated and labelled here."""
    seeds = seeds or cfg.seeds()
    if cfg.dataset:
        ds = TimeSeriesDataset.load(cfg.dataset)
    else:
        path = cfg.profile or packaged("feeder15_profile.yaml")
        with open(path) as fh:
            prof = yaml.safe_load(fh) or {}
        prof["seed"] = seeds["scenario"]
        if cfg.days is not None:
            prof["days"] = cfg.days
        spec = profile_spec_from_dict(prof)
        ds = label_with_opf(net, gen_feeder_timeseries(net, spec))
    missing = [a for a in net.agents if a not in ds.action_columns]
    if missing:
        raise ValidationError(f"dataset lacks optimal actions for agents {missing}")
    if ds.split is None:
        ds = ds.with_split(seeds["split"])
    return ds


def _deployed(cfg, net):
    if cfg.agents is None:
        return list(net.agents)
    bad = [a for a in cfg.agents if a not in net.agents]
    if bad:
        raise ValidationError(f"agents {bad} are not controllable buses")
    return list(cfg.agents)


def train_policies(ds, net, agents, kind="quadratic", observed=None):
    """Stepwise policies fitted on a view that holds no test rows."""
    view = ds.training_view()
    observed = observed or {}
    out = []
    for a in agents:
        q = net.q_limits[net.agents.index(a)]
        out.append(stepwise_select(view, a, kind=kind, observed=observed.get(a), q_limit=float(q)))
    prov = {"kernel": kind, "train_rows": int(len(ds.rows("train"))), "val_rows": int(len(ds.rows("val"))),
            "split_seed": ds.meta.get("split_seed"), "network_hash": net.hash()}
    return PolicySet(out, prov)


def label_violations(net, ds):
    """Voltage-bound violations of the stored optimal actions, over every row."""
    sens = voltage_sensitivity(net)
    p_c, q_c, p_g = injection_arrays(net, ds.frame)
    U = ds.frame[[f"u_star_{a}" for a in net.agents]].to_numpy(dtype=float)
    v = sens.voltages(p_c, q_c, p_g, U)
    return int(voltage_violations(net, v, tol=1e-9).sum())


def _daily(table):
    if "day" not in table.columns:
        return pd.DataFrame()
    cols = ["f_nocontrol", "f_decentral", "f_central"]
    daily = table.groupby("day")[cols].sum().reset_index()
    dev = table.groupby("day")[["maxdev_nocontrol", "maxdev_decentral", "maxdev_central"]].max().reset_index(drop=True)
    daily = pd.concat([daily, dev], axis=1)
    daily["rows"] = table.groupby("day").size().to_numpy()
    daily["between"] = (daily["f_central"] <= daily["f_decentral"] + 1e-9) & \
                       (daily["f_decentral"] <= daily["f_nocontrol"] + 1e-9)
    return daily


def _ratio(num, den):
    return float(num / den) if den > 0 else float("nan")


def run_opf_pipeline(cfg):
    seeds = cfg.seeds()
    net = _network(cfg)
    ds = opf_dataset(cfg, net, seeds)
    agents = _deployed(cfg, net)
    policies = train_policies(ds, net, agents, cfg.kernel)
    report = evaluate_policy_set(policies, ds, net, rows=ds.rows("test"), clip=cfg.clip, gap_eps=cfg.gap_eps)
    for p in policies.policies:
        p.test_mse = report.summary["distortion_per_agent"][p.agent]
    daily = _daily(report.tables["rows"])
    s = report.summary
    summary = dict(s)
    summary.update({
        "network": net.name,
        "deployed_agents": agents,
        "label_violations": label_violations(net, ds),
        "daily_between": bool(daily["between"].all()) if len(daily) else None,
        "test_days": int(len(daily)),
        "deviation_reduced": bool(s["max_deviation"]["decentral"] < s["max_deviation"]["nocontrol"]),
        "gap_min": float(report.tables["rows"]["gap"].min()),
        # per-row ratios blow up where the optimum is near zero; these two are scale-free
        "gap_aggregate": _ratio(s["objective_mean"]["decentral"] - s["objective_mean"]["central"],
                                s["objective_mean"]["central"]),
        "improvement_captured": _ratio(s["objective_mean"]["nocontrol"] - s["objective_mean"]["decentral"],
                                       s["objective_mean"]["nocontrol"] - s["objective_mean"]["central"]),
        "selected_terms": {p.agent: p.meta.get("selected_terms") for p in policies.policies},
        "audit": {"training_rows_seen": "train+val", "test_rows_in_training": 0,
                  "test_rows": int(len(ds.rows("test")))},
    })
    tables = dict(report.tables)
    tables["daily"] = daily
    out = EvalReport("opf-pipeline", _stamp(cfg, summary), tables)
    out.policies = policies
    out.dataset = ds
    if cfg.out:
        out.save(cfg.out)
        save_policy_set(policies, os.path.join(cfg.out, "policies.yaml"))
        ds.save(os.path.join(cfg.out, "dataset.csv"))
    return out


def _effective_dims(oracle):
    """Number of distinct non-constant label columns per node."""
    frame = oracle.dataset.frame.iloc[oracle.rows]
    dims = {}
    for n, cols in oracle.dataset.state_columns.items():
        X = frame[cols].to_numpy(dtype=float)
        X = X[:, X.min(axis=0) < X.max(axis=0)]
        if X.shape[1] == 0:
            dims[n] = 0
            continue
        ranks = np.argsort(np.argsort(X, axis=0, kind="stable"), axis=0)
        dims[n] = int(np.unique(ranks, axis=1).shape[1])
    return dims


def coarse_bins(oracle, agent, k, cell_fraction=5):
    """Largest per-column bin count whose full joint alphabet fits the occupancy guard."""
    dims = _effective_dims(oracle)
    others = sorted((dims[j] for j in oracle.candidates(agent)), reverse=True)
    D = 1 + dims[agent] + sum(others[:k])
    limit = len(oracle.rows) // cell_fraction
    return max(2, int(np.floor(limit ** (1.0 / D) + 1e-9)))


def select_with_retry(oracle, agent, k):
    """Exhaustive selection; on an alphabet explosion, coarsen once and retry."""
    try:
        return select_exhaustive(oracle, agent, k), oracle
    except AlphabetExplosion:
        coarse = oracle.coarsened(coarse_bins(oracle, agent, k))
        return select_exhaustive(coarse, agent, k), coarse


def run_opf_comm(cfg):
    seeds = cfg.seeds()
    net = _network(cfg)
    ds = opf_dataset(cfg, net, seeds)
    agents = _deployed(cfg, net)
    view = ds.training_view()
    te = ds.rows("test")
    test = ds.frame.iloc[te]
    train_rows = ds.rows("train")
    n_cands = len(ds.state_nodes) - 1
    ks = cfg.ks(min(n_cands, 3)) if cfg.k_range is None else cfg.ks(n_cands)
    fine = SampleOracle(ds, cfg.discretization(), train_rows, cfg.estimator)
    # multi-node searches start at 8 bins per column unless bins were pinned
    multi = fine
    if cfg.bins is None and fine.scheme.resolve(len(train_rows)) > MULTI_NODE_BINS:
        multi = fine.coarsened(MULTI_NODE_BINS)
    rng = np.random.default_rng(seeds["selection-baseline"])

    cache = {}

    def test_mse(a, extra):
        key = (a, tuple(sorted(extra)))
        if key not in cache:
            q = float(net.q_limits[net.agents.index(a)])
            p = stepwise_select(view, a, kind=cfg.comm_kernel, observed=(a,) + key[1], q_limit=q)
            uhat = predict(p, test, clip=cfg.clip)
            cache[key] = float(np.mean((uhat - test[f"u_star_{a}"].to_numpy()) ** 2))
        return cache[key]

    rows = []
    for a in agents:
        for k in ks:
            res, used = select_with_retry(fine if k <= 1 else multi, a, k)
            bins = used.scheme.resolve(len(train_rows))
            rows.append({"agent": a, "k": k, "strategy": "optimal", "score": res.score,
                         "distortion": test_mse(a, res.chosen), "members": " ".join(map(str, res.chosen)),
                         "bins": bins})
            g = select_greedy(used, a, k)
            rows.append({"agent": a, "k": k, "strategy": "greedy", "score": g.score,
                         "distortion": test_mse(a, g.chosen), "members": " ".join(map(str, g.chosen)),
                         "bins": bins})
            sets = random_sets(used.candidates(a), k, cfg.n_random, rng)
            dist = [test_mse(a, S) for S in sets]
            rows.append({"agent": a, "k": k, "strategy": "random",
                         "score": float(np.mean([used(a, S) for S in sets])),
                         "distortion": float(np.mean(dist)), "distortion_std": float(np.std(dist)),
                         "members": "", "bins": bins, "n_sets": len(sets)})
    curves = pd.DataFrame(rows)
    by_k = curves.groupby(["k", "strategy"])["distortion"].mean().unstack("strategy").reset_index()
    opt = by_k["optimal"].to_numpy()
    summary = {
        "network": net.name,
        "agents": agents,
        "k_range": [ks[0], ks[-1]],
        "comm_kernel": cfg.comm_kernel,
        "mean_mse": {int(k): {s: float(by_k.loc[by_k["k"] == k, s].iloc[0]) for s in ("optimal", "greedy", "random")}
                     for k in by_k["k"]},
        "optimal_le_random": bool(np.all(by_k["optimal"] <= by_k["random"] + 1e-15)),
        "optimal_nonincreasing_5pct": bool(np.all(opt[1:] <= opt[:-1] * 1.05)),
        "policies_trained": len(cache),
        "audit": {"selection_rows": "train", "training_rows_seen": "train+val",
                  "test_rows_in_training": 0, "test_rows": int(len(te))},
    }
    report = EvalReport("opf-comm", _stamp(cfg, summary), {"curves": curves, "by_k": by_k})
    report.dataset = ds
    return _finish(cfg, report)


RUNNERS = {
    "gaussian-rd": run_gaussian_rd,
    "gaussian-comm": run_gaussian_comm,
    "opf-pipeline": run_opf_pipeline,
    "opf-comm": run_opf_comm,
}


def run(cfg):
    return RUNNERS[cfg.experiment](cfg)
