"""Return panels: CSV I/O, preprocessing, context windows, synthetic data."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from importlib import resources

import numpy as np

from ..generators import affine_from_blocks

CLIP = 0.1
NORM_ROWS = 100


class PanelError(ValueError):
    pass


@dataclass(frozen=True)
class ReturnPanel:
    """Daily log returns, one row per date."""

    dates: tuple
    tickers: tuple
    returns: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.returns, dtype=float)
        if r.shape != (len(self.dates), len(self.tickers)):
            raise PanelError(f"returns shape {r.shape} does not match "
                             f"{len(self.dates)} dates x {len(self.tickers)} tickers")
        if not np.all(np.isfinite(r)):
            raise PanelError("panel contains non-finite returns")
        if any(b <= a for a, b in zip(self.dates, self.dates[1:])):
            raise PanelError("dates must be strictly increasing")
        object.__setattr__(self, "returns", r)

    @property
    def T(self):
        return self.returns.shape[0]

    def select(self, columns):
        cols = list(columns)
        return ReturnPanel(self.dates, tuple(self.tickers[j] for j in cols), self.returns[:, cols])

    def rows(self, start, stop):
        return ReturnPanel(self.dates[start:stop], self.tickers, self.returns[start:stop])


def universe():
    text = resources.files("sro").joinpath("data/universe.txt").read_text()
    return [t for t in text.split() if t]


def ingest_csv(path, min_rows=3):
    """Read ``date,<ticker>,...`` CSV; every cell must be a finite number."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or len(rows[0]) < 2 or rows[0][0].strip().lower() != "date":
        raise PanelError(f"{path}: header must start with 'date' followed by tickers")
    tickers = tuple(h.strip() for h in rows[0][1:])
    dates, values = [], []
    seen = set()
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(tickers) + 1:
            raise PanelError(f"{path}: row {lineno} has {len(row)} cells, expected {len(tickers) + 1}")
        date = row[0].strip()
        try:
            vals = [float(c) for c in row[1:]]
        except ValueError:
            raise PanelError(f"{path}: row {lineno} has a missing or non-numeric cell") from None
        if not all(math.isfinite(v) for v in vals):
            raise PanelError(f"{path}: row {lineno} has a non-finite value")
        if date in seen:
            raise PanelError(f"{path}: row {lineno} duplicates date {date}")
        if dates and date <= dates[-1]:
            raise PanelError(f"{path}: row {lineno} date {date} is not after {dates[-1]}")
        seen.add(date)
        dates.append(date)
        values.append(vals)
    if len(dates) < min_rows:
        raise PanelError(f"{path}: need at least {min_rows} rows, found {len(dates)}")
    return ReturnPanel(tuple(dates), tickers, np.array(values))


def emit_csv(panel, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["date", *panel.tickers])
        for date, row in zip(panel.dates, panel.returns):
            wr.writerow([date, *(repr(float(v)) for v in row)])


def preprocess(returns, clip=CLIP, norm_rows=NORM_ROWS):
    """Clip to ``[-clip, clip]``; mean/std from the first ``norm_rows`` rows only."""
    r = np.asarray(returns, dtype=float)
    if r.shape[0] < norm_rows:
        raise PanelError(f"need at least {norm_rows} rows to standardize, got {r.shape[0]}")
    clipped = np.clip(r, -clip, clip)
    head = clipped[:norm_rows]
    return clipped, head.mean(axis=0), np.maximum(head.std(axis=0, ddof=1), 1e-8)


def make_context(returns, t, L, mean, std):
    """Standardized window of rows ``t-L .. t-1``, flattened time-major."""
    if t < L:
        raise PanelError(f"decision time {t} precedes a full window of {L} rows")
    if t > len(returns):
        raise PanelError(f"decision time {t} is past the end of the panel ({len(returns)} rows)")
    window = (np.asarray(returns[t - L:t], dtype=float) - mean) / std
    return window.ravel()


def training_pairs(returns, L, mean, std, start, stop):
    """Contexts and next-row targets for decision times ``start .. stop-1``."""
    start = max(start, L)
    X = np.array([make_context(returns, t, L, mean, std) for t in range(start, stop)])
    return X, np.asarray(returns[start:stop], dtype=float)


# -- synthetic oracle / panels --------------------------------------------------------

def synthetic_oracle(d, L=10, latent_dim=8, seed=0, persistence=0.25, vol=(0.01, 0.025),
                     drift=0.04, corr=0.3):
    """Stationary affine generator on standardized returns with a raw-scale map.

    Lag coefficients are scaled so every row of ``A`` has absolute sum
    ``persistence`` (< 1 keeps the rollout stationary).
    """
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((d, L * d))
    A *= persistence / np.abs(A).sum(axis=1, keepdims=True)
    C = np.full((d, d), corr) + (1 - corr) * np.eye(d)
    if latent_dim >= d:
        B = np.zeros((d, latent_dim))
        B[:, :d] = np.linalg.cholesky(C)
    else:
        vals, vecs = np.linalg.eigh(C)
        top = np.argsort(vals)[::-1][:latent_dim]
        B = vecs[:, top] * np.sqrt(vals[top])
    c = drift * (1.0 + 0.5 * rng.standard_normal(d))
    std = rng.uniform(vol[0], vol[1], size=d)
    return affine_from_blocks(A, B, c, ret_mean=np.zeros(d), ret_std=std,
                              meta={"source": "synthetic", "seed": seed})


def simulate_path(gen, T, L, seed, burn_in=200):
    """Autoregressive rollout: each draw is appended to the rolling context.

    The generator's own output map doubles as its input standardization.
    """
    d = gen.output_dim
    m = np.zeros(d) if gen.ret_mean is None else gen.ret_mean
    s = np.ones(d) if gen.ret_std is None else gen.ret_std
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((burn_in + T, gen.latent_dim))
    path = np.tile(m, (L, 1))
    out = np.empty((burn_in + T, d))
    hist = list(path)
    for k in range(burn_in + T):
        x = ((np.array(hist[-L:]) - m) / s).ravel()
        y = gen.forward_batch(Z[k:k + 1], x)[0]
        out[k] = y
        hist.append(y)
    return out[burn_in:]


def synthetic_panel(T, n_assets=None, seed=0, L=10, latent_dim=8, **oracle_kw):
    """Panel simulated from a synthetic oracle, labelled with the bundled universe."""
    names = universe()
    d = len(names) if n_assets is None else n_assets
    if d > len(names):
        names = names + [f"S{j:03d}" for j in range(len(names), d)]
    gen = synthetic_oracle(d, L, latent_dim, seed, **oracle_kw)
    r = simulate_path(gen, T, L, seed + 1)
    dates = tuple(f"d{t:05d}" for t in range(T))
    return ReturnPanel(dates, tuple(names[:d]), r), gen
