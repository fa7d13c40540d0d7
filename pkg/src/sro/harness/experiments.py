"""Controlled generator-to-generator study and rolling backtest."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import generators
from ..certificate import (SCHEMA_VERSION, CertificateReport, certificate_constants, classify_regime,
                           gaps, oracle_utilities, slack_estimate)
from ..generators import calibrate_affine, sample_batch
from ..geometry import PerturbationBall
from ..losses import DecisionProblem, utility
from ..solvers import BatchObjective, RobustConfig, robust_objective, solve, solve_nominal
from .data import (CLIP, PanelError, ingest_csv, make_context, preprocess, simulate_path, synthetic_oracle,
                   synthetic_panel, training_pairs)
from .metrics import METRIC_NAMES, aggregate, metrics, realized_return
from .screen import validity_screen

logger = logging.getLogger(__name__)

SELECTION = ("sharpe", "mean-utility", "cvar5")


@dataclass
class ExperimentConfig:
    mode: str = "controlled"
    n_assets: int = 20
    L: int = 10
    latent_dim: int = 8
    train: int = 800
    val: int = 100
    test: int = 100
    seeds: list = field(default_factory=lambda: list(range(40, 60)))
    rho_grid: list = field(default_factory=lambda: [0.1, 0.3, 0.5])
    selection: str = "sharpe"
    solver: str = "two-timescale"
    lam: float = 10.0
    robust: RobustConfig = field(default_factory=RobustConfig)
    N_oracle: int = 100_000
    slack_grid: int = 64
    slack_N: int = 20_000
    certify_days: int = 1
    return_bound: float = 0.1
    delta: float = 0.05
    oracle: dict = field(default_factory=lambda: {"source": "synthetic", "seed": 0})
    panel: str | None = None
    synthetic_rows: int = 1400
    workers: int = 1

    def __post_init__(self):
        if self.mode not in ("controlled", "backtest"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.selection not in SELECTION:
            raise ValueError(f"selection must be one of {SELECTION}")
        if self.solver not in ("first-order", "two-timescale"):
            raise ValueError(f"solver must be 'first-order' or 'two-timescale', got {self.solver!r}")
        if isinstance(self.robust, dict):
            self.robust = RobustConfig(**self.robust)
        if not (0 < self.L < self.train and self.val >= 2 and self.test >= 2):
            raise ValueError("need 0 < L < train, val >= 2 and test >= 2")
        self.seeds = [int(s) for s in self.seeds]
        self.rho_grid = [float(r) for r in self.rho_grid]

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        doc.pop("schema_version", None)
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self):
        out = asdict(self)
        out["robust"] = asdict(self.robust)
        out["schema_version"] = SCHEMA_VERSION
        return out

    @property
    def horizon(self):
        return self.train + self.val + self.test

    def splits(self):
        """Row index ranges ``(train, val, test)``; each test row is a decision time."""
        a, b = self.train, self.train + self.val
        return range(0, a), range(a, b), range(b, self.horizon)


def load_config(path, **overrides):
    doc = json.loads(Path(path).read_text()) if path else {}
    doc.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(doc)


@dataclass
class SeedResult:
    seed: int
    excluded: bool
    rho: float | None = None
    tickers: list = field(default_factory=list)
    daily: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    certificate: CertificateReport | None = None
    screen: dict = field(default_factory=dict)
    validation: dict = field(default_factory=dict)


@dataclass
class BacktestResult:
    mode: str
    config: ExperimentConfig
    seeds: list

    @property
    def included(self):
        return [s for s in self.seeds if not s.excluded]

    def per_seed_rows(self):
        rows = []
        for s in self.included:
            for method, summ in s.summary.items():
                rows.append({"seed": s.seed, "method": method, "rho": s.rho, **summ})
        return rows

    def aggregate(self):
        return aggregate_rows(self.per_seed_rows())


EXTRA_KEYS = ("empirical_utility", "oracle_utility", "gap")


def aggregate_rows(rows):
    """``{method: {metric: {mean, std, n}}}`` across seeds."""
    out = {}
    for method in dict.fromkeys(r["method"] for r in rows):
        sub = [r for r in rows if r["method"] == method]
        keys = [k for k in METRIC_NAMES + EXTRA_KEYS if any(r.get(k) is not None for r in sub)]
        out[method] = aggregate(sub, keys)
    return out


# -- shared pieces --------------------------------------------------------------

def day_batch(seed, t, cfg):
    return sample_batch([seed, t], cfg.robust.N, cfg.latent_dim)


def _criterion(returns, how, lam):
    r = np.asarray(returns)
    if how == "sharpe":
        v = metrics(r)["sharpe"]
        return -math.inf if v is None else v
    if how == "cvar5":
        return metrics(r)["cvar5"]
    return float(np.mean(utility(r, lam)))


def decide(gen, returns, t, L, m, s, problem, rcfg, method, batch):
    """Decision at time ``t``; reads rows strictly before ``t`` only."""
    x = make_context(returns, t, L, m, s)
    return solve(method, gen, x, problem, rcfg, batch)[0]


def select_rho(cfg, nominal, raw, clipped, m, s, problem, seed, times):
    """Pick the radius with the best validation criterion (first wins ties).

    A single-radius grid needs no validation solves.
    """
    if len(cfg.rho_grid) == 1:
        return cfg.rho_grid[0], {}
    scores = {}
    for rho in cfg.rho_grid:
        rc = cfg.robust.replace(rho=rho)
        rets = [realized_return(decide(nominal, clipped, t, cfg.L, m, s, problem, rc, cfg.solver,
                                       day_batch(seed, t, cfg)), raw[t]) for t in times]
        scores[rho] = _criterion(rets, cfg.selection, cfg.lam)
    best = max(cfg.rho_grid, key=lambda r: (scores[r], -cfg.rho_grid.index(r)))
    return best, {str(k): v for k, v in scores.items()}


def _calibrate(cfg, raw, seed):
    _, m, s = preprocess(raw[:cfg.train])
    clipped = np.clip(raw, -CLIP, CLIP)
    X, Y = training_pairs(clipped, cfg.L, m, s, 0, cfg.train)
    nominal = calibrate_affine(Y, X, cfg.latent_dim, ret_mean=m, ret_std=s)
    screen = validity_screen(nominal, Y, X, seed)
    return nominal, clipped, m, s, screen


# -- controlled study ---------------------------------------------------------------

def build_oracle(cfg):
    src = dict(cfg.oracle)
    kind = src.get("source", "synthetic")
    if kind == "synthetic":
        return synthetic_oracle(cfg.n_assets, cfg.L, cfg.latent_dim, int(src.get("seed", 0)),
                                **{k: v for k, v in src.items() if k not in ("source", "seed")})
    if kind == "file":
        gen = generators.load(src["path"])
    elif kind == "panel":
        panel = ingest_csv(src["path"], min_rows=cfg.L + 2)
        clipped, m, s = preprocess(panel.returns)
        X, Y = training_pairs(clipped, cfg.L, m, s, 0, panel.T)
        gen = calibrate_affine(Y, X, cfg.latent_dim, ret_mean=m, ret_std=s)
    else:
        raise ValueError(f"unknown oracle source {kind!r}")
    if gen.kind != "affine" or gen.output_dim != cfg.n_assets or gen.latent_dim != cfg.latent_dim \
            or gen.context_dim != cfg.L * cfg.n_assets:
        raise ValueError("oracle generator must be affine with dims matching n_assets, L and latent_dim")
    return gen


def _oracle_scaling(gen):
    d = gen.output_dim
    m = np.zeros(d) if gen.ret_mean is None else np.asarray(gen.ret_mean)
    s = np.ones(d) if gen.ret_std is None else np.asarray(gen.ret_std)
    return m, s


def controlled_seed(cfg, oracle, seed):
    problem = DecisionProblem(cfg.n_assets, cfg.lam)
    raw = simulate_path(oracle, cfg.horizon, cfg.L, seed)
    nominal, clipped, m, s, screen = _calibrate(cfg, raw, seed)
    res = SeedResult(seed, excluded=not screen.passed, screen=screen.to_dict())
    if res.excluded:
        logger.warning("seed %d excluded by validity screen: %s", seed, "; ".join(screen.reasons))
        return res
    om, os_ = _oracle_scaling(oracle)
    _, val_times, test_times = cfg.splits()
    rho, scores = select_rho(cfg, nominal, raw, clipped, m, s, problem, seed, val_times)
    res.rho, res.validation = rho, scores
    rc = cfg.robust.replace(rho=rho)

    daily = {k: [] for k in ("nominal", "sro", "oracle")}
    util = {k: [] for k in ("emp_nom", "rob", "orc_nom", "orc_rob", "orc_orc")}
    certs = []
    for i, t in enumerate(test_times):
        batch = day_batch(seed, t, cfg)
        x = make_context(clipped, t, cfg.L, m, s)
        xo = make_context(raw, t, cfg.L, om, os_)
        w_nom = solve_nominal(nominal, x, problem, rc, batch)[0]
        w_rob = solve(cfg.solver, nominal, x, problem, rc, batch)[0]
        w_orc = solve_nominal(oracle, xo, problem, rc, batch)[0]
        emp = BatchObjective(nominal, x, batch.draws, cfg.lam).value(w_nom, nominal.theta)
        rob = robust_objective(nominal, x, problem, w_rob, rc, batch)
        J, _ = oracle_utilities(oracle, xo, cfg.lam, np.array([w_nom, w_rob, w_orc]),
                                cfg.N_oracle, [seed, t, 1])
        for key, v in zip(util, (emp, rob, J[0], J[1], J[2])):
            util[key].append(float(v))
        for key, w in zip(daily, (w_nom, w_rob, w_orc)):
            daily[key].append(realized_return(w, raw[t]))
        if i < cfg.certify_days:
            certs.append(_certify(cfg, oracle, nominal, x, xo, problem, rc, w_nom, w_rob, seed, t))

    mean = {k: float(np.mean(v)) for k, v in util.items()}
    g_nom, g_rob = gaps(mean["emp_nom"], mean["orc_nom"], mean["rob"], mean["orc_rob"])
    c = certs[0] if certs else {}
    if len(certs) > 1:
        c = {k: float(np.mean([d[k] for d in certs])) for k in ("mu_bar", "epsilon_N", "coverage_distance")}
        c["coverage"] = all(d["coverage"] for d in certs)
    res.certificate = CertificateReport(
        empirical_utility_nominal=mean["emp_nom"], robust_objective=mean["rob"],
        oracle_utility_nominal=mean["orc_nom"], oracle_utility_robust=mean["orc_rob"],
        gap_nominal=g_nom, gap_robust=g_rob,
        slack_estimate=c.get("mu_bar", math.nan), epsilon_N=c.get("epsilon_N", math.nan),
        regime=classify_regime(c["mu_bar"], c["epsilon_N"]) if certs else "n/a",
        coverage_flag=bool(c.get("coverage", False)),
        coverage_distance=c.get("coverage_distance", math.nan), N_oracle=cfg.N_oracle)
    res.daily = {k: np.array(v) for k, v in daily.items()}
    extras = {"nominal": (mean["emp_nom"], mean["orc_nom"], g_nom),
              "sro": (mean["rob"], mean["orc_rob"], g_rob),
              "oracle": (None, mean["orc_orc"], None)}
    for method, rets in res.daily.items():
        res.summary[method] = {**metrics(rets), **dict(zip(EXTRA_KEYS, extras[method]))}
    return res


def _certify(cfg, oracle, nominal, x, xo, problem, rc, w_nom, w_rob, seed, t):
    sl = slack_estimate(oracle, nominal, x, problem, rc, cfg.slack_grid, extra=(w_nom, w_rob),
                        x_oracle=xo, N_oracle=cfg.N_oracle, N_robust=cfg.slack_N, seed=seed * 1000 + t)
    ball = PerturbationBall(nominal.theta, rc.rho, rc.p)
    eps = certificate_constants(nominal, cfg.lam, cfg.return_bound, ball, cfg.delta, rc.N,
                                rc.blocks)["epsilon_N"]
    return {"mu_bar": sl.mu_bar, "epsilon_N": eps, "coverage": sl.coverage,
            "coverage_distance": sl.coverage_distance}


def _run_seeds(fn, cfg, *args):
    if cfg.workers > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(cfg.workers) as ex:
            futs = [ex.submit(fn, cfg, *args, s) for s in cfg.seeds]
            return [f.result() for f in futs]
    return [fn(cfg, *args, s) for s in cfg.seeds]


def run_controlled(cfg):
    oracle = build_oracle(cfg)
    return BacktestResult("controlled", cfg, _run_seeds(controlled_seed, cfg, oracle))


# -- real-data style backtest --------------------------------------------------------

def load_panel(cfg):
    if cfg.panel:
        panel = ingest_csv(cfg.panel, min_rows=cfg.L + 2)
    else:
        panel, _ = synthetic_panel(cfg.synthetic_rows, seed=int(cfg.oracle.get("seed", 0)),
                                   L=cfg.L, latent_dim=cfg.latent_dim)
    if panel.T < cfg.horizon:
        raise PanelError(f"backtest needs {cfg.horizon} rows, panel has {panel.T}")
    return panel


def backtest_seed(cfg, panel, seed):
    rng = np.random.default_rng(seed)
    n = len(panel.tickers)
    cols = sorted(rng.choice(n, cfg.n_assets, replace=False).tolist()) if n > cfg.n_assets else list(range(n))
    raw = panel.returns[:cfg.horizon, cols]
    problem = DecisionProblem(len(cols), cfg.lam)
    nominal, clipped, m, s, screen = _calibrate(cfg, raw, seed)
    res = SeedResult(seed, excluded=not screen.passed, tickers=[panel.tickers[j] for j in cols],
                     screen=screen.to_dict())
    if res.excluded:
        logger.warning("seed %d excluded by validity screen: %s", seed, "; ".join(screen.reasons))
        return res
    _, val_times, test_times = cfg.splits()
    rho, scores = select_rho(cfg, nominal, raw, clipped, m, s, problem, seed, val_times)
    res.rho, res.validation = rho, scores
    rc = cfg.robust.replace(rho=rho)
    daily = {"nominal": [], "sro": []}
    emp = {"nominal": [], "sro": []}
    for t in test_times:
        batch = day_batch(seed, t, cfg)
        x = make_context(clipped, t, cfg.L, m, s)
        w_nom = solve_nominal(nominal, x, problem, rc, batch)[0]
        w_rob = solve(cfg.solver, nominal, x, problem, rc, batch)[0]
        emp["nominal"].append(BatchObjective(nominal, x, batch.draws, cfg.lam).value(w_nom, nominal.theta))
        emp["sro"].append(robust_objective(nominal, x, problem, w_rob, rc, batch))
        daily["nominal"].append(realized_return(w_nom, raw[t]))
        daily["sro"].append(realized_return(w_rob, raw[t]))
    res.daily = {k: np.array(v) for k, v in daily.items()}
    for method, rets in res.daily.items():
        res.summary[method] = {**metrics(rets), "empirical_utility": float(np.mean(emp[method]))}
    return res


def run_backtest(cfg):
    panel = load_panel(cfg)
    return BacktestResult("backtest", cfg, _run_seeds(backtest_seed, cfg, panel))


# -- output ----------------------------------------------------------------------

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for r in rows:
            wr.writerow([_fmt(r.get(h)) for h in header])


def write_aggregate(path, agg):
    rows = [{"method": method, "metric": metric, **stats}
            for method, block in agg.items() for metric, stats in block.items()]
    write_csv(path, ["method", "metric", "mean", "std", "n"], rows)


PER_SEED_HEADER = ["seed", "method", "rho", *METRIC_NAMES, *EXTRA_KEYS]


def write_outputs(result, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "per_seed_metrics.csv", PER_SEED_HEADER, result.per_seed_rows())
    write_aggregate(out / "aggregate.csv", result.aggregate())
    daily = [{"seed": s.seed, "step": k, "method": m, "return": float(r)}
             for s in result.included for m, rets in s.daily.items() for k, r in enumerate(rets)]
    write_csv(out / "daily_returns.csv", ["seed", "step", "method", "return"], daily)
    run = {
        "schema_version": SCHEMA_VERSION,
        "mode": result.mode,
        "config": result.config.to_dict(),
        "seeds": [{"seed": s.seed, "excluded": s.excluded, "rho": s.rho, "tickers": s.tickers,
                   "validation": s.validation, "screen": s.screen} for s in result.seeds],
    }
    (out / "run.json").write_text(json.dumps(run, indent=2, sort_keys=True, default=_json_default))
    if result.mode == "controlled":
        certs = {"schema_version": SCHEMA_VERSION,
                 "reports": [{"seed": s.seed, **s.certificate.to_dict()} for s in result.included]}
        (out / "certificates.json").write_text(
            json.dumps(certs, indent=2, sort_keys=True, default=_json_default))
    return out


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


def read_per_seed(path):
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            row = {"seed": int(r["seed"]), "method": r["method"]}
            for k, v in r.items():
                if k in ("seed", "method"):
                    continue
                row[k] = float(v) if v not in ("", None) else None
            rows.append(row)
    return rows
