"""Command-line entry point.

Every stage of the pipeline is a subcommand; ``run`` chains them into one
experiment. Shared options can also come from ``RDPOLICY_<OPTION>``
environment variables (e.g. ``RDPOLICY_SEED=3``); explicit flags win over
the environment, which wins over the config file.
"""

import argparse
import os
import sys
import warnings

import pandas as pd
import yaml

from .comm import GaussianOracle, SampleOracle, select_exhaustive, select_greedy
from .errors import RDPolicyError, ValidationError
from .gaussian_rd import planted_comm_ensemble, random_ensemble, save_ensemble, load_ensemble
from .grid import (injection_arrays, load_network, solution_frame, validate_network, voltage_sensitivity)
from .harness import EXPERIMENTS, ExperimentConfig, packaged, run, select_with_retry, substream, train_policies
from .mi import DiscretizationScheme, build_mi_matrix, write_mi_matrix
from .policy import evaluate_policy_set, load_policy_set, save_policy_set
from .report import _plain
from .scenario import TimeSeriesDataset, gen_feeder_timeseries, label_with_opf, profile_spec_from_dict

ENV_PREFIX = "RDPOLICY_"
SHARED = ("config", "seed", "out", "k_range", "estimator", "bins", "scheme")


def parse_k_range(text):
    try:
        if ".." in text:
            a, b = text.split("..")
            return int(a), int(b)
        k = int(text)
        return k, k
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a..b, got {text!r}") from None


def _shared(p):
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--seed", type=int, help="root seed")
    p.add_argument("--out", help="output file or directory")
    p.add_argument("--k-range", type=parse_k_range, help="inclusive range a..b")
    p.add_argument("--estimator", help="entropy estimator (default plugin-mm)")
    p.add_argument("--bins", type=int, help="bins per column (default: cube root of T, at most 32)")
    p.add_argument("--scheme", choices=("quantile", "width"), help="discretization scheme")


def build_parser():
    parser = argparse.ArgumentParser(prog="rdpolicy", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a network file")
    p.add_argument("network")
    p.add_argument("--opf", action="store_true", help="also require at least one controllable bus")
    _shared(p)

    p = sub.add_parser("gen-ensemble", help="write a Gaussian ensemble")
    p.add_argument("--kind", choices=("random", "planted"), default="random")
    p.add_argument("--n-agents", type=int, default=10)
    _shared(p)

    p = sub.add_parser("gen-scenario", help="write uncontrolled feeder injections")
    p.add_argument("--network")
    p.add_argument("--profile")
    p.add_argument("--days", type=int)
    _shared(p)

    p = sub.add_parser("solve-opf", help="label injections with the centralized optimum")
    p.add_argument("injections")
    p.add_argument("--network")
    p.add_argument("--solutions", help="also write q_g/v columns here")
    _shared(p)

    p = sub.add_parser("mi", help="estimate gamma/delta matrices from a dataset")
    p.add_argument("dataset")
    p.add_argument("--rows", choices=("all", "train"), default="all")
    _shared(p)

    p = sub.add_parser("select-comm", help="pick observation sets for one agent")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--dataset")
    src.add_argument("--ensemble")
    p.add_argument("--agent", type=int, required=True)
    p.add_argument("--method", choices=("exhaustive", "greedy"), default="exhaustive")
    _shared(p)

    p = sub.add_parser("train", help="fit stepwise policies on a labelled dataset")
    p.add_argument("dataset")
    p.add_argument("--network")
    p.add_argument("--kernel", choices=("linear", "quadratic"), default="quadratic")
    _shared(p)

    p = sub.add_parser("evaluate", help="replay policies on the test rows")
    p.add_argument("dataset")
    p.add_argument("policies")
    p.add_argument("--network")
    p.add_argument("--no-clip", action="store_true")
    _shared(p)

    p = sub.add_parser("run", help="run a whole experiment")
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("--network")
    p.add_argument("--profile")
    p.add_argument("--dataset")
    p.add_argument("--ensemble")
    p.add_argument("--days", type=int)
    _shared(p)
    return parser


def _apply_env(args):
    for name in SHARED:
        if getattr(args, name, None) is not None:
            continue
        raw = os.environ.get(ENV_PREFIX + name.upper())
        if raw is None:
            continue
        if name in ("seed", "bins"):
            value = int(raw)
        elif name == "k_range":
            value = parse_k_range(raw)
        else:
            value = raw
        setattr(args, name, value)
    return args


def _file_config(args):
    if not args.config:
        return {}
    with open(args.config) as fh:
        return yaml.safe_load(fh) or {}


def _opt(args, cfg, name, default=None):
    v = getattr(args, name, None)
    if v is not None:
        return v
    return cfg.get(name, default)


def _need_out(args, cfg):
    out = _opt(args, cfg, "out")
    if not out:
        raise ValidationError("--out is required for this command")
    return out


def _scheme(args, cfg):
    return DiscretizationScheme(_opt(args, cfg, "scheme", "quantile"), _opt(args, cfg, "bins"))


def _network(args, cfg):
    return load_network(_opt(args, cfg, "network") or packaged("feeder15.yaml"))


# -- subcommands ------------------------------------------------------------

def cmd_validate(args, cfg):
    net = load_network(args.network)
    validate_network(net, require_agents=args.opf)
    print(f"ok: {net.n_bus} buses, {len(net.lines)} lines, {net.n_agents} controllable")


def cmd_gen_ensemble(args, cfg):
    seed = substream(_opt(args, cfg, "seed", 0), "ensemble")
    if args.kind == "planted":
        ens = planted_comm_ensemble(seed)
    else:
        ens = random_ensemble(_opt(args, cfg, "n_agents", args.n_agents), seed)
    out = _need_out(args, cfg)
    save_ensemble(ens, out)
    print(f"wrote {out}")


def cmd_gen_scenario(args, cfg):
    net = _network(args, cfg)
    path = _opt(args, cfg, "profile") or packaged("feeder15_profile.yaml")
    with open(path) as fh:
        prof = yaml.safe_load(fh) or {}
    prof["seed"] = substream(_opt(args, cfg, "seed", 0), "scenario")
    days = _opt(args, cfg, "days")
    if days is not None:
        prof["days"] = days
    frame = gen_feeder_timeseries(net, profile_spec_from_dict(prof))
    out = _need_out(args, cfg)
    frame.to_csv(out, index=False, float_format="%.17g")
    print(f"wrote {len(frame)} rows to {out}")


def cmd_solve_opf(args, cfg):
    net = _network(args, cfg)
    frame = pd.read_csv(args.injections, float_precision="round_trip")
    ds = label_with_opf(net, frame).with_split(substream(_opt(args, cfg, "seed", 0), "split"))
    out = _need_out(args, cfg)
    ds.save(out)
    if args.solutions:
        p_c, q_c, p_g = injection_arrays(net, ds.frame)
        U = ds.frame[[f"u_star_{a}" for a in net.agents]].to_numpy(dtype=float)
        v = voltage_sensitivity(net).voltages(p_c, q_c, p_g, U)
        solution_frame(net, U, v).to_csv(args.solutions, index=False, float_format="%.17g")
    print(f"labelled {ds.n_rows} rows; wrote {out}")


def cmd_mi(args, cfg):
    ds = TimeSeriesDataset.load(args.dataset)
    rows = ds.rows("train") if args.rows == "train" else None
    mim = build_mi_matrix(ds, _scheme(args, cfg), _opt(args, cfg, "estimator", "plugin-mm"), rows)
    out = _need_out(args, cfg)
    write_mi_matrix(mim, out)
    print(f"wrote {out}")


def cmd_select_comm(args, cfg):
    if args.ensemble:
        oracle = GaussianOracle(load_ensemble(args.ensemble))
    else:
        ds = TimeSeriesDataset.load(args.dataset)
        rows = ds.rows("train") if ds.split is not None else None
        oracle = SampleOracle(ds, _scheme(args, cfg), rows, _opt(args, cfg, "estimator", "plugin-mm"))
    n = len(oracle.candidates(args.agent))
    a, b = _opt(args, cfg, "k_range", (0, min(n, 3)))
    rows = []
    for k in range(a, b + 1):
        if args.method == "greedy":
            res = select_greedy(oracle, args.agent, k)
        elif isinstance(oracle, SampleOracle):
            res, _ = select_with_retry(oracle, args.agent, k)
        else:
            res = select_exhaustive(oracle, args.agent, k)
        rows.append({"agent": res.agent, "k": res.k, "method": res.method, "score": res.score,
                     "members": " ".join(map(str, res.chosen))})
    table = pd.DataFrame(rows)
    out = _opt(args, cfg, "out")
    if out:
        table.to_csv(out, index=False, float_format="%.17g")
    print(table.to_string(index=False))


def cmd_train(args, cfg):
    net = _network(args, cfg)
    ds = TimeSeriesDataset.load(args.dataset)
    if ds.split is None:
        ds = ds.with_split(substream(_opt(args, cfg, "seed", 0), "split"))
    ps = train_policies(ds, net, list(net.agents), _opt(args, cfg, "kernel", args.kernel))
    out = _need_out(args, cfg)
    save_policy_set(ps, out)
    for p in ps.policies:
        print(f"agent {p.agent}: {len(p.theta)} terms, val mse {p.val_mse:.3e}")


def cmd_evaluate(args, cfg):
    net = _network(args, cfg)
    ds = TimeSeriesDataset.load(args.dataset)
    ps = load_policy_set(args.policies)
    report = evaluate_policy_set(ps, ds, net, clip=not args.no_clip)
    out = _opt(args, cfg, "out")
    if out:
        report.save(out)
    s = report.summary
    print(f"objective mean: {s['objective_mean']}")
    print(f"violations: {s['violations']}")
    print(f"gap mean {s['gap_mean']:.4g}, max {s['gap_max']:.4g}")


def cmd_run(args, cfg):
    d = dict(cfg)
    d["experiment"] = args.experiment
    for name in ("seed", "out", "k_range", "estimator", "bins", "scheme",
                 "network", "profile", "dataset", "ensemble", "days"):
        v = getattr(args, name, None)
        if v is not None:
            d[name] = v
    report = run(ExperimentConfig.from_dict(d))
    skip = {"config", "seeds"}
    print(yaml.safe_dump({k: v for k, v in _plain(report.summary).items() if k not in skip},
                         sort_keys=False).rstrip())


COMMANDS = {
    "validate": cmd_validate,
    "gen-ensemble": cmd_gen_ensemble,
    "gen-scenario": cmd_gen_scenario,
    "solve-opf": cmd_solve_opf,
    "mi": cmd_mi,
    "select-comm": cmd_select_comm,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "run": cmd_run,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = _apply_env(parser.parse_args(argv))
    except (ValueError, argparse.ArgumentTypeError) as exc:  # malformed environment override
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        cfg = _file_config(args)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            COMMANDS[args.command](args, cfg)
    except RDPolicyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
