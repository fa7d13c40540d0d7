"""Command-line entry point: ``sro <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .. import generators
from ..certificate import SCHEMA_VERSION, certificate_constants, classify_regime, slack_estimate
from ..geometry import PerturbationBall
from ..losses import DecisionProblem
from ..solvers import RobustConfig, solve
from .data import CLIP, ingest_csv, make_context, preprocess, training_pairs
from .experiments import (aggregate_rows, load_config, read_per_seed, run_backtest,
                          run_controlled, write_aggregate, write_csv, write_outputs)

log = logging.getLogger("sro")


def _robust_from(args, base=None):
    doc = {}
    if getattr(args, "config", None):
        doc = json.loads(Path(args.config).read_text()).get("robust", {})
    cfg = base or RobustConfig(**doc)
    changes = {}
    if args.rho is not None:
        changes["rho"] = args.rho
    if args.seed is not None:
        changes["seed"] = args.seed
    return cfg.replace(**changes) if changes else cfg


def _context(gen, panel_path, t):
    if panel_path is None:
        return np.zeros(gen.context_dim)
    panel = ingest_csv(panel_path)
    d = gen.output_dim
    if len(panel.tickers) != d:
        raise SystemExit(f"panel has {len(panel.tickers)} tickers, generator expects {d}")
    L = gen.context_dim // d
    m = np.zeros(d) if gen.ret_mean is None else gen.ret_mean
    s = np.ones(d) if gen.ret_std is None else gen.ret_std
    t = panel.T if t is None else t
    return make_context(np.clip(panel.returns, -CLIP, CLIP), t, L, m, s)


def cmd_calibrate(args):
    panel = ingest_csv(args.panel)
    rows = panel.T if args.rows is None else args.rows
    _, m, s = preprocess(panel.returns[:rows])
    clipped = np.clip(panel.returns, -CLIP, CLIP)
    X, Y = training_pairs(clipped, args.L, m, s, 0, rows)
    gen = generators.calibrate_affine(Y, X, args.latent_dim, ret_mean=m, ret_std=s)
    gen.meta["tickers"] = list(panel.tickers)
    generators.save(gen, args.out)
    log.info("wrote %s (%d parameters)", args.out, gen.n_params)


def cmd_solve(args):
    gen = generators.load(args.generator)
    cfg = _robust_from(args)
    x = _context(gen, args.panel, args.t)
    problem = DecisionProblem(gen.output_dim, args.lam)
    w, trace = solve(args.solver, gen, x, problem, cfg)
    doc = {"schema_version": SCHEMA_VERSION, "solver": args.solver, "rho": cfg.rho,
           "weights": w.tolist(), "objective": float(trace.objective[-1])}
    if "tickers" in gen.meta:
        doc["tickers"] = gen.meta["tickers"]
    text = json.dumps(doc, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    if args.trace:
        trace.to_csv(args.trace)


def cmd_certify(args):
    oracle = generators.load(args.oracle)
    nominal = generators.load(args.nominal)
    base = _robust_from(args)
    x = _context(nominal, args.panel, args.t)
    xo = _context(oracle, args.panel, args.t)
    problem = DecisionProblem(nominal.output_dim, args.lam)
    rhos = [float(r) for r in args.rhos.split(",")] if args.rhos else [base.rho]
    rows = []
    for rho in rhos:
        cfg = base.replace(rho=rho)
        sl = slack_estimate(oracle, nominal, x, problem, cfg, args.grid, x_oracle=xo,
                            N_oracle=args.n_oracle, N_robust=args.n_robust, seed=cfg.seed,
                            exact=args.exact)
        eps = certificate_constants(nominal, args.lam, args.return_bound,
                                    PerturbationBall(nominal.theta, rho, cfg.p), args.delta, cfg.N,
                                    cfg.blocks)["epsilon_N"]
        rows.append({"rho": rho, "mu_bar": sl.mu_bar, "epsilon_N": eps,
                     "regime": classify_regime(sl.mu_bar, eps), "coverage": int(sl.coverage),
                     "coverage_distance": sl.coverage_distance})
    header = ["rho", "mu_bar", "epsilon_N", "regime", "coverage", "coverage_distance"]
    if args.out:
        write_csv(args.out, header, rows)
    else:
        write_csv("/dev/stdout", header, rows)


def _experiment_cfg(args, mode):
    overrides = {"mode": mode}
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
    if args.rho is not None:
        overrides["rho_grid"] = [args.rho]
    if args.solver is not None:
        overrides["solver"] = args.solver
    if getattr(args, "panel", None):
        overrides["panel"] = args.panel
    return load_config(args.config, **overrides)


def cmd_controlled(args):
    cfg = _experiment_cfg(args, "controlled")
    out = write_outputs(run_controlled(cfg), args.out)
    log.info("controlled study written to %s", out)


def cmd_backtest(args):
    cfg = _experiment_cfg(args, "backtest")
    out = write_outputs(run_backtest(cfg), args.out)
    log.info("backtest written to %s", out)


def cmd_report(args):
    rows = read_per_seed(Path(args.input) / "per_seed_metrics.csv")
    out = Path(args.out or args.input)
    out.mkdir(parents=True, exist_ok=True)
    write_aggregate(out / "aggregate.csv", aggregate_rows(rows))


def build_parser():
    p = argparse.ArgumentParser(prog="sro", description="Sampler-robust portfolio optimization")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, solver_default=None):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--rho", type=float)
        sp.add_argument("--solver", choices=["first-order", "two-timescale"]
                        + (["nominal"] if solver_default else []), default=solver_default)
        sp.add_argument("--out")

    sp = sub.add_parser("calibrate", help="fit an affine generator to a return panel")
    sp.add_argument("--panel", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--L", type=int, default=10)
    sp.add_argument("--latent-dim", type=int, default=8)
    sp.add_argument("--rows", type=int, help="use only the first ROWS rows")
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("solve", help="portfolio weights for one context")
    common(sp, solver_default="two-timescale")
    sp.add_argument("--generator", required=True)
    sp.add_argument("--panel", help="return panel supplying the context window")
    sp.add_argument("--t", type=int, help="decision row (default: after the last row)")
    sp.add_argument("--lam", type=float, default=10.0)
    sp.add_argument("--trace", help="write the solver trace CSV here")
    sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("certify", help="radius sweep of slack, eps_N and regime")
    common(sp)
    sp.add_argument("--oracle", required=True)
    sp.add_argument("--nominal", required=True)
    sp.add_argument("--panel")
    sp.add_argument("--t", type=int)
    sp.add_argument("--rhos", help="comma-separated radii")
    sp.add_argument("--lam", type=float, default=10.0)
    sp.add_argument("--grid", type=int, default=64)
    sp.add_argument("--n-oracle", type=int, default=100_000)
    sp.add_argument("--n-robust", type=int, default=20_000)
    sp.add_argument("--return-bound", type=float, default=CLIP)
    sp.add_argument("--delta", type=float, default=0.05)
    sp.add_argument("--exact", action="store_true", help="closed forms (affine, p=2)")
    sp.set_defaults(func=cmd_certify)

    for name, fn, hlp in (("controlled", cmd_controlled, "oracle-vs-nominal controlled study"),
                          ("backtest", cmd_backtest, "rolling backtest on a return panel")):
        sp = sub.add_parser(name, help=hlp)
        common(sp)
        sp.set_defaults(func=fn)
        if name == "backtest":
            sp.add_argument("--panel")
        sp.set_defaults(out="results")

    sp = sub.add_parser("report", help="aggregate per-seed metrics")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
