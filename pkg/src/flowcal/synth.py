"""Synthetic flow/speed observations drawn around a known curve."""
from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timedelta
from typing import Optional, Sequence

import numpy as np

from .ingest import Observation
from .model import SpeedFlowParams, predict_speed

__all__ = ["GeneratorSpec", "generate", "generate_arrays"]


@dataclass(frozen=True)
class GeneratorSpec:
    """What to generate.

    ``flow_distribution`` is ``"uniform"`` (flows uniform on ``[0, q_c]``) or
    ``"empirical"``, in which case ``flow_weights`` gives relative frequencies
    of equal-width flow bins spanning ``[0, q_c]``.  Observations are spaced
    ``step_minutes`` apart starting at ``start``.
    """

    truth: SpeedFlowParams
    sigma: float
    n: int
    flow_distribution: str = "uniform"
    seed: int = 0
    flow_weights: Optional[Sequence[float]] = None
    start: datetime = datetime(2011, 7, 1)
    step_minutes: float = 5.0

    def __post_init__(self):
        self.truth.validate()
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.flow_distribution not in ("uniform", "empirical"):
            raise ValueError(f"unknown flow distribution {self.flow_distribution!r}")
        if self.flow_distribution == "empirical":
            w = np.asarray(self.flow_weights if self.flow_weights is not None else [], dtype=float)
            if w.size == 0 or np.any(w < 0) or not w.sum() > 0:
                raise ValueError("empirical flows need non-negative weights with a positive sum")


def generate_arrays(spec: GeneratorSpec) -> tuple[np.ndarray, np.ndarray]:
    """Flows and speeds as arrays, the fast path used by tests and benchmarks."""
    rng = np.random.default_rng(spec.seed)
    q_c = spec.truth.q_c
    if spec.flow_distribution == "uniform":
        q = rng.uniform(0.0, q_c, spec.n)
    else:
        w = np.asarray(spec.flow_weights, dtype=float)
        edges = np.linspace(0.0, q_c, w.size + 1)
        bins = rng.choice(w.size, size=spec.n, p=w / w.sum())
        q = rng.uniform(edges[bins], edges[bins + 1])
    mean = predict_speed(spec.truth, q)
    u = mean + rng.normal(0.0, spec.sigma, spec.n)
    bad = u <= 0
    # resample non-positive speeds instead of clamping them
    while np.any(bad):
        u[bad] = mean[bad] + rng.normal(0.0, spec.sigma, int(bad.sum()))
        bad = u <= 0
    return q, u


def generate(spec: GeneratorSpec) -> list[Observation]:
    q, u = generate_arrays(spec)
    step = timedelta(minutes=spec.step_minutes)
    return [
        Observation(spec.start + i * step, float(qi), float(ui), 0.0, float(qi / ui), 1)
        for i, (qi, ui) in enumerate(zip(q, u))
    ]
