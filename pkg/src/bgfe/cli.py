"""Command-line interface tying the estimation pipeline together.

Subcommands: estimate, forecast, simulate, spc-gfe, pregroup, psm,
partition.  Exit codes: 0 success, 1 runtime failure, 2 usage or input
error.  Options may come from a TOML file (--config); explicit flags
override file values, and every run writes a resolved-config snapshot
next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import chain_io
from .constraints import (
    ConstraintSet,
    constraints_from_pregrouping,
    read_constraints_csv,
    read_pregrouping_csv,
    write_constraints_csv,
)
from .dgp import DgpConfig, run_monte_carlo
from .dp_prior import DpHyper
from .errors import BgfeError, PanelFormatError
from .forecast import forecast as run_forecast
from .gibbs import run_chain
from .mdd import select_c
from .panel import ModelConfig, PanelDataset, add_lag_column, load_panel, split_holdout
from .partition import compute_psm, point_estimate_partition
from .spc_kmeans import KmeansConfig, spc_gfe

USAGE_ERROR = 2
RUNTIME_ERROR = 1


def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_matrix_csv(path, matrix, labels) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["unit"] + [str(u) for u in labels])
        for lab, row in zip(labels, matrix):
            writer.writerow([str(lab)] + [repr(float(v)) for v in row])


def _load_constraints(args, data: PanelDataset, strength: float):
    if getattr(args, "constraints", None):
        return read_constraints_csv(args.constraints, data.unit_ids, strength)
    if getattr(args, "pregroup", None):
        groups = read_pregrouping_csv(args.pregroup, data.unit_ids)
        return constraints_from_pregrouping(groups, args.psi_pl, args.psi_nl,
                                            data.n_units, strength)
    return None


def _resolved_config(args, extra=None) -> dict:
    payload = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    if extra:
        payload.update(extra)
    payload["config_hash"] = chain_io.config_hash(payload)
    return payload


def _prepare_panel(args) -> PanelDataset:
    data = load_panel(args.panel)
    if getattr(args, "make_lag", False):
        data = add_lag_column(data, to_z=getattr(args, "lag_common", False))
    return data


def _write_partition_json(path, partition, vi_score, unit_ids) -> None:
    payload = {
        "groups": {str(u): int(g) + 1 for u, g in zip(unit_ids, partition.g)},
        "k": partition.k,
        "vi_score": vi_score,
    }
    _write_json(path, payload)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_estimate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = _prepare_panel(args)
    model = ModelConfig.for_data(data, heteroskedastic=not args.homoskedastic)
    hyper = DpHyper.default(p=data.n_x, q=data.n_z)
    cs = _load_constraints(args, data, args.c)
    resolved = _resolved_config(args, {"n_units": data.n_units,
                                       "n_periods": data.n_periods})
    _write_json(out / "resolved_config.json", resolved)

    c_value = args.c
    if args.c_grid:
        grid = [float(v) for v in args.c_grid.split(",")]
        mdd = select_c(data, model, hyper, cs, grid, args.burn, args.keep,
                       args.seed, n_jobs=args.threads)
        _write_json(out / "mdd.json", mdd.as_dict())
        c_value = mdd.c_star
        print(f"selected constraint strength c = {c_value}")
    cs_run = cs.with_strength(c_value) if (cs is not None and c_value > 0) else None

    rng = np.random.default_rng(args.seed)
    chain = run_chain(data, model, hyper, args.burn, args.keep, rng,
                      constraints=cs_run)
    chain_io.save_chain(chain, out / "chain.csv", out / "chain_meta.json",
                        extra_meta={"seed": args.seed,
                                    "config_hash": resolved["config_hash"],
                                    "unit_ids": [str(u) for u in data.unit_ids],
                                    "c": c_value})
    psm = compute_psm(chain)
    _write_matrix_csv(out / "psm.csv", psm, data.unit_ids)
    est = point_estimate_partition(chain, psm)
    _write_partition_json(out / "partition.json", est.g_star, est.vi_score,
                          data.unit_ids)
    summary = {
        "avg_k": float(chain.k.mean()),
        "mode_k": int(np.bincount(chain.k).argmax()),
        "avg_a": float(chain.a.mean()),
        "avg_loglik": float(chain.loglik.mean()),
        "c": c_value,
    }
    if chain.gamma is not None:
        summary["gamma_mean"] = [float(v) for v in chain.gamma.mean(axis=0)]
    _write_json(out / "posterior-summary.json", summary)
    print(f"stored {len(chain)} draws; posterior mean groups = {summary['avg_k']:.2f}")
    return 0


def cmd_forecast(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = _prepare_panel(args)
    _write_json(out / "resolved_config.json", _resolved_config(args))
    if args.holdout > 0:
        train, holdout = split_holdout(data, args.holdout)
        x_next = holdout.x[:, 0, :]
        z_next = None if holdout.z is None else holdout.z[:, 0, :]
        y_real = holdout.y[:, 0]
    else:
        train = data
        x_next = data.x[:, -1, :]
        z_next = None if data.z is None else data.z[:, -1, :]
        y_real = None
        print("no holdout supplied; reusing final-period covariate rows, "
              "metrics omitted")

    if args.chain:
        chain = chain_io.load_chain(args.chain,
                                    Path(args.chain).with_name("chain_meta.json")
                                    if args.chain_meta is None else args.chain_meta)
    else:
        model = ModelConfig.for_data(train, heteroskedastic=not args.homoskedastic)
        hyper = DpHyper.default(p=train.n_x, q=train.n_z)
        cs = _load_constraints(args, train, args.c)
        rng = np.random.default_rng(args.seed)
        chain = run_chain(train, model, hyper, args.burn, args.keep, rng,
                          constraints=cs)
    rng_fc = np.random.default_rng(np.random.SeedSequence(args.seed).spawn(1)[0])
    result = run_forecast(chain, x_next, z_next, rng_fc, alpha=args.alpha,
                          y_real=y_real)
    with open(out / "forecast.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["unit", "point", "lower", "upper"])
        for i, unit in enumerate(data.unit_ids):
            writer.writerow([unit, repr(float(result.point[i])),
                             repr(float(result.lower[i])),
                             repr(float(result.upper[i]))])
    if result.metrics is not None:
        _write_json(out / "metrics.json", result.metrics)
        print(" ".join(f"{k}={v:.4f}" for k, v in result.metrics.items()))
    return 0


def cmd_simulate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = DgpConfig(dgp_id=args.dgp, n=args.n, t=args.t,
                       constraint_fraction=args.fraction,
                       mislabel_rate=args.mislabel, strength=args.c)
    estimators = [e.strip() for e in args.estimators.split(",") if e.strip()]
    report = run_monte_carlo(config, estimators, args.reps, args.burn,
                             args.keep, args.seed, n_jobs=args.threads)
    _write_json(out / "resolved_config.json", _resolved_config(args))
    _write_json(out / "mc_aggregate.json",
                {"aggregate": report.aggregate(), "failures": report.failures,
                 "n_reps": report.n_reps})
    with open(out / "mc_replications.csv", "w", newline="", encoding="utf-8") as fh:
        writer = None
        for name in report.estimators:
            for rep, row in enumerate(report.per_rep[name]):
                record = {"estimator": name, "replication": rep, **row}
                if writer is None:
                    writer = csv.DictWriter(fh, fieldnames=list(record))
                    writer.writeheader()
                writer.writerow(record)
    for name, row in report.aggregate().items():
        keys = [k for k in ("rho_rmse", "fc_rmsfe_mean", "pct_k_mean") if k in row]
        line = " ".join(f"{k}={row[k]:.4f}" for k in keys)
        print(f"{name}: {line}")
    return 0


def cmd_spc_gfe(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = _prepare_panel(args)
    _write_json(out / "resolved_config.json", _resolved_config(args))
    cs = _load_constraints(args, data, args.c)
    config = KmeansConfig(k=args.k, c=args.c, w_pl=args.w_pl, w_nl=args.w_nl)
    rng = np.random.default_rng(args.seed)
    result = spc_gfe(data, cs, args.k, config, rng)
    _write_partition_json(out / "partition.json", result.partition,
                          result.objective, data.unit_ids)
    _write_json(out / "coefficients.json", {
        "theta": [float(v) for v in result.theta],
        "alpha_kt": [[float(v) for v in row] for row in result.alpha_kt],
        "objective": result.objective,
        "n_iter": result.n_iter,
    })
    print(f"objective {result.objective:.6f} after {result.n_iter} iterations")
    return 0


def cmd_pregroup(args) -> int:
    data = _prepare_panel(args)
    groups = read_pregrouping_csv(args.pregroup, data.unit_ids)
    if not groups:
        print("warning: empty pre-grouping; writing an empty constraint set")
    cs = constraints_from_pregrouping(groups, args.psi_pl, args.psi_nl,
                                      data.n_units, strength=args.c)
    write_constraints_csv(cs, args.out, data.unit_ids)
    n_pl, n_nl = cs.counts()
    print(f"wrote {n_pl} positive and {n_nl} negative links to {args.out}")
    return 0


def cmd_psm(args) -> int:
    chain = chain_io.load_chain(args.chain, args.chain_meta)
    labels = chain.meta.get("unit_ids", list(range(1, chain.n_units + 1)))
    _write_matrix_csv(args.out, compute_psm(chain), labels)
    return 0


def cmd_partition(args) -> int:
    chain = chain_io.load_chain(args.chain, args.chain_meta)
    labels = chain.meta.get("unit_ids", list(range(1, chain.n_units + 1)))
    est = point_estimate_partition(chain)
    _write_partition_json(args.out, est.g_star, est.vi_score, labels)
    print(f"point estimate has {est.g_star.k} groups (source: {est.candidate_source})")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_common_estimation(sub):
    sub.add_argument("--panel", required=True, help="long-format panel CSV")
    sub.add_argument("--constraints", help="constraint CSV (i,j,type,psi)")
    sub.add_argument("--pregroup", help="pre-grouping CSV (unit,prior_group)")
    sub.add_argument("--psi-pl", type=float, default=0.65)
    sub.add_argument("--psi-nl", type=float, default=0.55)
    sub.add_argument("--c", type=float, default=0.5, help="constraint strength")
    sub.add_argument("--burn", type=int, default=5000)
    sub.add_argument("--keep", type=int, default=5000)
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--homoskedastic", action="store_true")
    sub.add_argument("--make-lag", action="store_true",
                     help="materialize a lag-of-y covariate (drops period 1)")
    sub.add_argument("--lag-common", action="store_true",
                     help="give the materialized lag a common coefficient")
    sub.add_argument("--threads", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bgfe",
        description="Grouped Bayesian panel estimation with soft pairwise constraints",
    )
    parser.add_argument("--config", help="TOML file with option defaults")
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="run the posterior sampler")
    _add_common_estimation(est)
    est.add_argument("--c-grid", help="comma-separated strengths for MDD search")
    est.add_argument("--out", required=True)
    est.set_defaults(func=cmd_estimate)

    fc = sub.add_parser("forecast", help="one-step-ahead forecasts")
    _add_common_estimation(fc)
    fc.add_argument("--chain", help="existing chain.csv (skips estimation)")
    fc.add_argument("--chain-meta", help="sidecar JSON for --chain")
    fc.add_argument("--holdout", type=int, default=1,
                    help="periods held out for evaluation (0: none)")
    fc.add_argument("--alpha", type=float, default=0.05)
    fc.add_argument("--out", required=True)
    fc.set_defaults(func=cmd_forecast)

    sim = sub.add_parser("simulate", help="Monte Carlo harness")
    sim.add_argument("--dgp", type=int, choices=(1, 2, 3), required=True)
    sim.add_argument("--reps", type=int, default=20)
    sim.add_argument("--n", type=int, default=200)
    sim.add_argument("--t", type=int, default=11)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--estimators", default="bgfe,bgfe-cstr,oracle,pooled,flat",
                     help="comma list; append -ho to any name for the "
                          "homoskedastic variant (e.g. bgfe-cstr-ho)")
    sim.add_argument("--burn", type=int, default=5000)
    sim.add_argument("--keep", type=int, default=5000)
    sim.add_argument("--fraction", type=float, default=0.05)
    sim.add_argument("--mislabel", type=float, default=0.2)
    sim.add_argument("--c", type=float, default=0.5)
    sim.add_argument("--threads", type=int, default=1)
    sim.add_argument("--out", required=True)
    sim.set_defaults(func=cmd_simulate)

    gfe = sub.add_parser("spc-gfe", help="constrained grouped fixed-effects")
    _add_common_estimation(gfe)
    gfe.add_argument("--k", type=int, required=True)
    gfe.add_argument("--w-pl", type=float, default=None)
    gfe.add_argument("--w-nl", type=float, default=None)
    gfe.add_argument("--out", required=True)
    gfe.set_defaults(func=cmd_spc_gfe)

    pre = sub.add_parser("pregroup", help="constraints from a pre-grouping")
    pre.add_argument("--panel", required=True)
    pre.add_argument("--pregroup", required=True)
    pre.add_argument("--psi-pl", type=float, default=0.65)
    pre.add_argument("--psi-nl", type=float, default=0.55)
    pre.add_argument("--c", type=float, default=0.5)
    pre.add_argument("--out", required=True)
    pre.set_defaults(func=cmd_pregroup)

    psm = sub.add_parser("psm", help="similarity matrix from a chain")
    psm.add_argument("--chain", required=True)
    psm.add_argument("--chain-meta")
    psm.add_argument("--out", required=True)
    psm.set_defaults(func=cmd_psm)

    part = sub.add_parser("partition", help="partition point estimate from a chain")
    part.add_argument("--chain", required=True)
    part.add_argument("--chain-meta")
    part.add_argument("--out", required=True)
    part.set_defaults(func=cmd_partition)
    return parser


def _apply_config_file(parser, argv):
    """Insert TOML values as defaults; explicit flags still win."""
    if "--config" not in argv:
        return argv
    idx = argv.index("--config")
    path = argv[idx + 1]
    with open(path, "rb") as fh:
        payload = tomllib.load(fh)
    flat = {}
    for key, value in payload.items():
        if isinstance(value, dict):
            flat.update(value)
        else:
            flat[key] = value
    extra = []
    for key, value in flat.items():
        flag = "--" + key.replace("_", "-")
        if flag in argv:
            continue
        if isinstance(value, bool):
            if value:
                extra.append(flag)
        else:
            extra += [flag, str(value)]
    # options must follow the subcommand for argparse subparsers
    return argv[:idx] + argv[idx + 2 :] + extra


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc.filename or exc} not found", file=sys.stderr)
        return USAGE_ERROR
    except (PanelFormatError, BgfeError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except Exception as exc:  # pragma: no cover - unexpected failure path
        print(f"runtime failure: {exc!r}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
