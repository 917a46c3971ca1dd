"""Reference curves and the flow-binned free-flow speed estimate.

Reference parameter sets live in a CSV constants file
(``scheme,ffs,q_c,bp,alpha``).  The bundled file carries the HCM 2016 basic
freeway and multilane curves; other schemes (for example local
calibrations) can be supplied in a file of the same layout.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Optional, Union

import numpy as np

from .ingest import Observation
from .model import SpeedFlowParams, speed_at_capacity

__all__ = [
    "BaselineCurve",
    "load_constants",
    "lookup",
    "estimate_ffs_binned",
    "hcm2016_curve",
    "compare",
    "FFS_FLOW_RANGE",
]

FFS_FLOW_RANGE = (50.0, 350.0)


@dataclass(frozen=True)
class BaselineCurve:
    u_f: float
    q_c: float
    bp: float
    alpha: float
    k_c: float
    scheme: str = "fixture"

    def params(self) -> SpeedFlowParams:
        return SpeedFlowParams(self.u_f, self.q_c, self.bp, self.alpha, self.k_c)


def load_constants(path=None) -> dict:
    """Rows per scheme, sorted by FFS: ``{scheme: [(ffs, q_c, bp, alpha), ...]}``."""
    if path is None:
        text = resources.files("flowcal").joinpath("data/hcm_constants.csv").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    table: dict = {}
    for i, row in enumerate(csv.DictReader(lines), start=2):
        try:
            entry = (float(row["ffs"]), float(row["q_c"]), float(row["bp"]), float(row["alpha"]))
        except (KeyError, TypeError, ValueError):
            raise ValueError(f"constants row {i}: expected scheme,ffs,q_c,bp,alpha, got {row}") from None
        table.setdefault(row["scheme"].strip(), []).append(entry)
    return {scheme: sorted(rows) for scheme, rows in table.items()}


def lookup(scheme: str, ffs: float, k_c: float, constants: Optional[Mapping] = None) -> BaselineCurve:
    """Curve for ``ffs`` in ``scheme``; linear between tabulated FFS rows."""
    table = load_constants() if constants is None else constants
    if scheme not in table:
        raise KeyError(f"unknown scheme {scheme!r}; available: {sorted(table)}")
    rows = np.asarray(table[scheme], dtype=float)
    ffs_col = rows[:, 0]
    if not ffs_col[0] - 1e-9 <= ffs <= ffs_col[-1] + 1e-9:
        raise ValueError(
            f"FFS {ffs:g} km/h outside the {scheme} table range "
            f"[{ffs_col[0]:g}, {ffs_col[-1]:g}]"
        )
    q_c, bp, alpha = (float(np.interp(ffs, ffs_col, rows[:, c])) for c in (1, 2, 3))
    curve = BaselineCurve(float(ffs), q_c, bp, alpha, float(k_c), scheme)
    curve.params().validate()
    return curve


def hcm2016_curve(ffs: float, highway_type: str, k_c: float, constants: Optional[Mapping] = None) -> BaselineCurve:
    """HCM 2016 curve for a basic ``"freeway"`` or ``"multilane"`` segment."""
    if highway_type not in ("freeway", "multilane"):
        raise ValueError(f"unknown highway type {highway_type!r}")
    return lookup(f"hcm2016_{highway_type}", ffs, k_c, constants)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def estimate_ffs_binned(obs: Union[Iterable[Observation], tuple]) -> int:
    """Mean speed of observations with flows in [50, 350] pc/h/lane, rounded to km/h.

    The flow window is treated as one pooled bin.
    """
    if isinstance(obs, tuple) and len(obs) == 2:
        q, u = (np.asarray(a, dtype=float) for a in obs)
    else:
        obs = list(obs)
        q = np.array([o.q for o in obs], dtype=float)
        u = np.array([o.u for o in obs], dtype=float)
    lo, hi = FFS_FLOW_RANGE
    mask = (q >= lo) & (q <= hi)
    if not np.any(mask):
        raise ValueError(f"no observations with flow in [{lo:g}, {hi:g}] pc/h/lane")
    return _round_half_up(math.fsum(u[mask]) / int(mask.sum()))


def _as_params(x) -> SpeedFlowParams:
    return x.params() if isinstance(x, BaselineCurve) else x


def compare(params, baseline) -> dict:
    """Signed differences ``params - baseline`` per parameter and for speed at capacity."""
    a, b = _as_params(params), _as_params(baseline)
    return {
        "u_f": a.u_f - b.u_f,
        "q_c": a.q_c - b.q_c,
        "bp": a.bp - b.bp,
        "alpha": a.alpha - b.alpha,
        "u_c": speed_at_capacity(a) - speed_at_capacity(b),
    }
