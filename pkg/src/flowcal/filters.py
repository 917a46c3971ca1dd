"""Cleaning rules that reduce detector data to a calibration-ready set.

A record survives only if it comes from the leftmost lane, carries no heavy
vehicles, has a plausible speed, and lies in the free-flow regime (density at
or below the density at capacity for the site's land use).  Each dropped
record is charged to the first rule it fails, in the order lane, heavy
vehicle, anomaly, congested.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

from .ingest import Observation, SiteMeta

__all__ = ["FilterConfig", "FilterReport", "apply_filters", "regime_split", "density_at_capacity"]


@dataclass(frozen=True)
class FilterConfig:
    k_c_rural: float = 26.0
    k_c_urban: float = 25.0
    max_speed: float = 180.0
    leftmost_lane_only: bool = True
    heavy_share_max: float = 0.0

    def __post_init__(self):
        if not (self.k_c_rural > 0 and self.k_c_urban > 0):
            raise ValueError("densities at capacity must be positive")
        if not self.max_speed > 0:
            raise ValueError("max_speed must be positive")
        if self.heavy_share_max < 0:
            raise ValueError("heavy_share_max must be >= 0")


def density_at_capacity(land_use: str, cfg: FilterConfig = FilterConfig()) -> float:
    if land_use == "rural":
        return cfg.k_c_rural
    if land_use == "urban":
        return cfg.k_c_urban
    raise ValueError(f"unknown land use {land_use!r}")


@dataclass
class FilterReport:
    input_size: int = 0
    retained: int = 0
    dropped: dict = field(default_factory=lambda: {
        "lane": 0, "heavy_vehicle": 0, "anomaly": 0, "congested": 0})
    k_c: float = math.nan

    @property
    def empty(self) -> bool:
        return self.retained == 0

    def reconciles(self) -> bool:
        return self.retained + sum(self.dropped.values()) == self.input_size

    def as_dict(self) -> dict:
        out = asdict(self)
        out["empty"] = self.empty
        return out


def _is_anomaly(o: Observation, max_speed: float) -> bool:
    u, q = o.u, o.q
    if not (math.isfinite(u) and math.isfinite(q)):
        return True
    # negative speed, u above the plausibility bound, zero flow reported with a
    # speed, or positive flow without a positive speed
    if not 0 < u <= max_speed:
        return True
    return q == 0 or q < 0


def apply_filters(obs: Iterable[Observation], site: SiteMeta,
                  cfg: FilterConfig = FilterConfig()) -> tuple[list[Observation], FilterReport]:
    """Apply the cleaning rules; returns the retained observations and a report."""
    k_c = density_at_capacity(site.land_use, cfg)
    report = FilterReport(k_c=k_c)
    kept = []
    for o in obs:
        report.input_size += 1
        if cfg.leftmost_lane_only and o.lane != 1:
            report.dropped["lane"] += 1
        elif o.heavy_share > cfg.heavy_share_max:
            report.dropped["heavy_vehicle"] += 1
        elif _is_anomaly(o, cfg.max_speed):
            report.dropped["anomaly"] += 1
        elif o.q / o.u > k_c:
            report.dropped["congested"] += 1
        else:
            if o.k is None:
                o = Observation(o.timestamp, o.q, o.u, o.heavy_share, o.q / o.u, o.lane)
            kept.append(o)
    report.retained = len(kept)
    return kept, report


def regime_split(obs: Sequence[Observation], k_c: float) -> tuple[list[Observation], list[Observation]]:
    """Partition by density: ``k <= k_c`` is free flow, ``k > k_c`` congested."""
    free, congested = [], []
    for o in obs:
        if o.k is None:
            raise ValueError(f"observation at {o.timestamp} has no density")
        (free if o.k <= k_c else congested).append(o)
    return free, congested
