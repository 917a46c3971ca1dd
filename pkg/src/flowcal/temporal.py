"""Monthly versus annual calibration comparison.

Observations are split into calendar months; months with enough data are
calibrated separately and their posteriors are compared with the annual
posterior by two-sided two-sample Kolmogorov-Smirnov tests.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .ingest import Observation
from .mcmc import ChainSet
from .model import PARAM_NAMES

__all__ = [
    "PeriodSlice",
    "KsResult",
    "BoxplotStats",
    "TemporalReport",
    "REFERENCE_P_VALUES",
    "partition_months",
    "ks_statistic",
    "kolmogorov_sf",
    "ks_two_sample",
    "boxplot_stats",
    "temporal_report",
]

#: Reference monthly-vs-annual p-values, kept for context in reports.
REFERENCE_P_VALUES = {"u_f": 0.9926, "q_c": 0.9943, "bp": 0.9322, "alpha": 0.2955}

_SERIES_TOL = 1e-10


@dataclass
class PeriodSlice:
    label: str
    observations: list
    eligible: bool

    @property
    def size(self) -> int:
        return len(self.observations)


def partition_months(obs: Iterable[Observation], min_obs: int = 2000) -> list[PeriodSlice]:
    """Calendar-month slices in chronological order, flagged eligible at ``min_obs``."""
    groups = defaultdict(list)
    for o in obs:
        groups[(o.timestamp.year, o.timestamp.month)].append(o)
    return [
        PeriodSlice(f"{y:04d}-{m:02d}", groups[(y, m)], len(groups[(y, m)]) >= min_obs)
        for y, m in sorted(groups)
    ]


@dataclass(frozen=True)
class KsResult:
    statistic: float
    p_value: float
    n: int
    m: int

    def verdict(self, significance: float = 0.01) -> str:
        """``"identical"`` unless the null is rejected at ``significance``."""
        return "different" if self.p_value < significance else "identical"


def ks_statistic(a, b) -> float:
    """Largest gap between the two empirical CDFs.

    Computed from integer counts so that swapping the samples gives the
    same value bit for bit.
    """
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    n, m = a.size, b.size
    if n == 0 or m == 0:
        raise ValueError("KS test needs two non-empty samples")
    points = np.concatenate([a, b])
    ca = np.searchsorted(a, points, side="right").astype(np.int64)
    cb = np.searchsorted(b, points, side="right").astype(np.int64)
    gap = int(np.max(np.abs(ca * m - cb * n)))
    return gap / (n * m)


def kolmogorov_sf(lam: float) -> float:
    """Survival function of the limiting Kolmogorov distribution.

    ``Q(lam) = 2 * sum_{j>=1} (-1)^(j-1) exp(-2 j^2 lam^2)``, summed until a
    term falls below 1e-10.  For ``lam < 1`` that series converges slowly, so
    the equivalent theta-function form of the CDF is summed instead.
    """
    if lam <= 0:
        return 1.0
    if lam < 1.0:
        total = 0.0
        j = 1
        while True:
            term = math.exp(-((2 * j - 1) ** 2) * math.pi**2 / (8 * lam * lam))
            total += term
            if term < _SERIES_TOL:
                break
            j += 1
        return min(1.0, max(0.0, 1.0 - math.sqrt(2 * math.pi) / lam * total))
    total = 0.0
    j = 1
    while True:
        term = math.exp(-2.0 * j * j * lam * lam)
        total += term if j % 2 else -term
        if term < _SERIES_TOL:
            break
        j += 1
    return min(1.0, max(0.0, 2.0 * total))


def ks_two_sample(a, b) -> KsResult:
    """Two-sided two-sample KS test with the asymptotic p-value.

    The p-value is ``Q(sqrt(ne) * D)`` with ``ne = n m / (n + m)``.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    d = ks_statistic(a, b)
    n, m = a.size, b.size
    ne = n * m / (n + m)
    return KsResult(d, kolmogorov_sf(math.sqrt(ne) * d), n, m)


@dataclass
class BoxplotStats:
    """Quartiles by linear interpolation; whiskers end at the most extreme
    points within 1.5 IQR of the box, anything beyond is an outlier."""

    min: float
    q25: float
    median: float
    q75: float
    max: float
    outliers: list = field(default_factory=list)


def boxplot_stats(values) -> BoxplotStats:
    x = np.sort(np.asarray(values, dtype=float).ravel())
    if x.size == 0:
        raise ValueError("boxplot of an empty sample")
    q25, med, q75 = (float(v) for v in np.percentile(x, [25, 50, 75]))
    iqr = q75 - q25
    lo_fence, hi_fence = q25 - 1.5 * iqr, q75 + 1.5 * iqr
    inside = x[(x >= lo_fence) & (x <= hi_fence)]
    outliers = [float(v) for v in x if v < lo_fence or v > hi_fence]
    return BoxplotStats(float(inside.min()), q25, med, q75, float(inside.max()), outliers)


@dataclass
class TemporalReport:
    ks: dict
    verdicts: dict
    boxplots: dict
    monthly_means: dict
    annual_means: dict
    significance: float
    mode: str
    scope: str
    reference_p_values: dict = field(default_factory=lambda: dict(REFERENCE_P_VALUES))

    def as_dict(self) -> dict:
        return {
            "significance": self.significance,
            "mode": self.mode,
            "scope": self.scope,
            "ks": {name: asdict(r) for name, r in self.ks.items()},
            "verdicts": self.verdicts,
            "boxplots": {site: {p: asdict(b) for p, b in per.items()} for site, per in self.boxplots.items()},
            "monthly_means": self.monthly_means,
            "annual_means": self.annual_means,
            "reference_p_values": self.reference_p_values,
        }

    def boxplot_rows(self) -> list:
        rows = []
        for site in sorted(self.boxplots):
            for name, b in self.boxplots[site].items():
                rows.append([site, name, b.min, b.q25, b.median, b.q75, b.max,
                             ";".join(repr(v) for v in b.outliers)])
        return rows


_MODES = ("pools", "means")


def temporal_report(monthly_summaries: Mapping[str, ChainSet], annual_summary: ChainSet, *,
                    mode: str = "pools", significance: float = 0.01,
                    site: str = "site") -> TemporalReport:
    """KS comparison of monthly and annual posteriors for one site.

    ``mode="pools"`` tests the pooled monthly posterior samples against the
    annual posterior samples; ``mode="means"`` tests the monthly posterior
    means against the annual posterior samples.
    """
    return global_temporal_report({site: (monthly_summaries, annual_summary)}, mode=mode,
                                  significance=significance, scope="site")


def global_temporal_report(sites: Mapping[str, tuple], *, mode: str = "pools",
                           significance: float = 0.01, scope: str = "global") -> TemporalReport:
    """KS comparison pooled across sites.

    ``sites`` maps a site id to ``(monthly chain sets by label, annual chain set)``.
    """
    if mode not in _MODES:
        raise ValueError(f"mode must be one of {_MODES}")
    if not 0 < significance < 1:
        raise ValueError("significance must be in (0, 1)")
    monthly_pool = defaultdict(list)
    annual_pool = defaultdict(list)
    boxplots, monthly_means, annual_means = {}, {}, {}
    for site_id in sorted(sites):
        monthly, annual = sites[site_id]
        if len(monthly) < 2:
            raise ValueError(f"site {site_id}: need at least 2 calibrated months, got {len(monthly)}")
        labels = sorted(monthly)
        monthly_means[site_id] = {
            label: {name: float(np.mean(monthly[label].pooled(name))) for name in PARAM_NAMES}
            for label in labels
        }
        annual_means[site_id] = {name: float(np.mean(annual.pooled(name))) for name in PARAM_NAMES}
        boxplots[site_id] = {
            name: boxplot_stats([monthly_means[site_id][label][name] for label in labels])
            for name in PARAM_NAMES
        }
        for name in PARAM_NAMES:
            annual_pool[name].append(annual.pooled(name))
            if mode == "pools":
                monthly_pool[name].extend(monthly[label].pooled(name) for label in labels)
            else:
                monthly_pool[name].append(np.array([monthly_means[site_id][l][name] for l in labels]))

    ks, verdicts = {}, {}
    for name in PARAM_NAMES:
        result = ks_two_sample(np.concatenate(monthly_pool[name]), np.concatenate(annual_pool[name]))
        ks[name] = result
        verdicts[name] = result.verdict(significance)
    return TemporalReport(ks, verdicts, boxplots, monthly_means, annual_means, significance, mode, scope)
