"""Posterior summaries and pointwise credible bands for the speed-flow curve."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .io import atomic_open, write_json
from .mcmc import ChainSet
from .model import PARAM_NAMES, SpeedFlowParams, predict_speed

__all__ = [
    "ParamSummary",
    "PosteriorSummary",
    "CredibleBand",
    "summarize",
    "summarize_samples",
    "credible_band",
    "skewness",
    "shape_tag",
    "histogram",
]

NORMAL_SKEW = 0.5
EXPONENTIAL_SKEW = 1.0
MIN_BINS = 20


def skewness(x) -> float:
    """Sample skewness ``m3 / m2**1.5`` (NaN for constant samples)."""
    x = np.asarray(x, dtype=float)
    d = x - x.mean()
    m2 = float(np.mean(d * d))
    if m2 == 0:
        return math.nan
    return float(np.mean(d**3)) / m2**1.5


def shape_tag(skew: float) -> str:
    """``"normal-like"`` below |skew| 0.5, ``"exponential-like"`` from 1.0, nearer threshold between."""
    if not math.isfinite(skew):
        return "normal-like"
    s = abs(skew)
    if s < NORMAL_SKEW:
        return "normal-like"
    if s >= EXPONENTIAL_SKEW:
        return "exponential-like"
    return "normal-like" if s - NORMAL_SKEW < EXPONENTIAL_SKEW - s else "exponential-like"


def histogram(x, min_bins: int = MIN_BINS) -> tuple[np.ndarray, np.ndarray]:
    """Freedman-Diaconis histogram with at least ``min_bins`` bins."""
    x = np.asarray(x, dtype=float)
    edges = np.histogram_bin_edges(x, bins="fd")
    if edges.size - 1 < min_bins:
        edges = np.histogram_bin_edges(x, bins=min_bins)
    counts, edges = np.histogram(x, bins=edges)
    return edges, counts


@dataclass
class ParamSummary:
    mean: float
    std: float
    q025: float
    q975: float
    skew: float
    shape: str
    degenerate: bool
    n: int
    bin_edges: np.ndarray
    counts: np.ndarray

    def as_dict(self) -> dict:
        return {
            "mean": self.mean,
            "std": self.std,
            "q025": self.q025,
            "q975": self.q975,
            "skew": None if math.isnan(self.skew) else self.skew,
            "shape": self.shape,
            "degenerate": self.degenerate,
            "n": self.n,
        }


@dataclass
class PosteriorSummary:
    params: dict
    k_c: float = math.nan

    def __getitem__(self, name: str) -> ParamSummary:
        return self.params[name]

    def means(self) -> dict:
        return {name: s.mean for name, s in self.params.items()}

    def representative(self) -> SpeedFlowParams:
        """Posterior means as a curve."""
        m = self.means()
        return SpeedFlowParams(m["u_f"], m["q_c"], m["bp"], m["alpha"], self.k_c)

    def as_dict(self) -> dict:
        out = {"k_c": self.k_c, "params": {n: s.as_dict() for n, s in self.params.items()}}
        if all(n in self.params for n in PARAM_NAMES) and math.isfinite(self.k_c):
            out["speed_at_capacity"] = self.params["q_c"].mean / self.k_c
        return out

    def write(self, directory) -> list:
        """``summary.json`` plus ``hist_<param>.csv`` per parameter."""
        from pathlib import Path

        directory = Path(directory)
        paths = [directory / "summary.json"]
        write_json(paths[0], self.as_dict())
        for name, s in self.params.items():
            path = directory / f"hist_{name}.csv"
            with atomic_open(path) as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["bin_lower", "bin_upper", "count"])
                for lo, hi, c in zip(s.bin_edges[:-1], s.bin_edges[1:], s.counts):
                    w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
            paths.append(path)
        return paths


def summarize_samples(x) -> ParamSummary:
    x = np.asarray(x, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("cannot summarize an empty sample")
    mean = float(np.mean(x))
    std = float(np.std(x, ddof=1)) if x.size > 1 else 0.0
    # inverted-CDF quantiles depend only on the empirical distribution, so
    # replicating chains leaves them unchanged
    q025, q975 = (float(v) for v in np.quantile(x, [0.025, 0.975], method="inverted_cdf"))
    skew = skewness(x)
    edges, counts = histogram(x)
    degenerate = bool(np.all(x == x[0]))
    return ParamSummary(mean, std, q025, q975, skew, shape_tag(skew), degenerate, int(x.size), edges, counts)


def summarize(chains: ChainSet) -> PosteriorSummary:
    """Pool every chain and summarize each parameter."""
    if chains.n_kept == 0:
        raise ValueError("chains hold no kept samples")
    return PosteriorSummary({name: summarize_samples(chains.pooled(name)) for name in chains.names},
                            k_c=chains.k_c)


@dataclass
class CredibleBand:
    """Pointwise band; ``lower``/``upper`` are NaN where no draw reaches ``q``.

    Where some draws are skipped (``n_draws`` below the subsample size) the
    band describes only draws whose capacity reaches ``q``, so near the
    capacity end the central curve may sit slightly outside it.
    """

    q: np.ndarray
    lower: np.ndarray
    central: np.ndarray
    upper: np.ndarray
    n_draws: np.ndarray
    level: tuple = (2.5, 97.5)

    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def write_csv(self, path) -> None:
        with atomic_open(path) as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["q", "lower", "central", "upper", "n_draws"])
            for row in zip(self.q, self.lower, self.central, self.upper, self.n_draws):
                w.writerow([repr(float(v)) for v in row[:4]] + [int(row[4])])


def credible_band(chains: ChainSet, k_c: Optional[float] = None, grid_size: int = 101, *,
                  n_draws: Optional[int] = 2000, seed: int = 0,
                  level: tuple = (2.5, 97.5)) -> CredibleBand:
    """Pointwise credible band of the speed-flow curve on ``[0, mean q_c]``.

    At each grid flow, speeds are predicted by a seeded subsample of posterior
    draws (``n_draws=None`` uses every draw); draws whose own capacity lies
    below the grid flow are skipped.  The central curve uses the posterior
    means.
    """
    if grid_size < 2:
        raise ValueError("grid_size must be >= 2")
    lo_pct, hi_pct = level
    if not 0 <= lo_pct < hi_pct <= 100:
        raise ValueError("level must be an increasing pair of percentages")
    k_c = chains.k_c if k_c is None else k_c
    draws = chains.draws()
    means = draws.mean(axis=0)
    if draws.shape[0] < 100:
        raise ValueError("credible band needs at least 100 pooled draws")
    if n_draws is not None and n_draws < draws.shape[0]:
        idx = np.sort(np.random.default_rng(seed).choice(draws.shape[0], n_draws, replace=False))
        draws = draws[idx]

    centre = SpeedFlowParams.from_vector(means, k_c)
    grid = np.linspace(0.0, means[1], grid_size)
    central = predict_speed(centre, grid)

    u_f, q_c, bp, alpha = draws.T
    q = grid[:, None]
    frac = np.clip((q - bp) / (q_c - bp), 0.0, None)
    speeds = np.where(q <= bp, u_f, u_f - (u_f - q_c / k_c) * frac**alpha)
    valid = q <= q_c
    speeds = np.where(valid, speeds, np.nan)
    counts = valid.sum(axis=1)
    lower = np.full(grid_size, np.nan)
    upper = np.full(grid_size, np.nan)
    ok = counts > 0
    if np.any(ok):
        lower[ok] = np.nanpercentile(speeds[ok], lo_pct, axis=1)
        upper[ok] = np.nanpercentile(speeds[ok], hi_pct, axis=1)
    return CredibleBand(grid, lower, central, upper, counts, tuple(level))
