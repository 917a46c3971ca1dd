"""Piecewise speed-flow relationship for freeways and multilane highways.

The curve has a constant free-flow plateau up to the breakpoint and a
power-law decline from the breakpoint to capacity, where it reaches the
speed at capacity ``q_c / k_c``.  Flows are hourly rates per lane.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

__all__ = [
    "DomainError",
    "SpeedFlowParams",
    "TrafficState",
    "PARAM_NAMES",
    "predict_speed",
    "speed_at_capacity",
    "density",
]

#: Order of the calibrated parameters everywhere a vector is used.
PARAM_NAMES = ("u_f", "q_c", "bp", "alpha")


class DomainError(ValueError):
    """Raised when a model quantity is requested outside its domain."""


@dataclass(frozen=True)
class SpeedFlowParams:
    """Calibrated curve parameters plus the fixed density at capacity.

    Construction does not validate, so that a sampler can represent (and
    reject) proposals that break the invariants.  Use :meth:`validate` or
    :attr:`is_valid`.
    """

    u_f: float
    q_c: float
    bp: float
    alpha: float
    k_c: float = 26.0

    @classmethod
    def from_vector(cls, theta, k_c: float) -> "SpeedFlowParams":
        u_f, q_c, bp, alpha = (float(v) for v in theta)
        return cls(u_f, q_c, bp, alpha, float(k_c))

    def as_vector(self) -> np.ndarray:
        return np.array([self.u_f, self.q_c, self.bp, self.alpha], dtype=float)

    def as_dict(self) -> dict:
        return asdict(self)

    def violations(self) -> list[str]:
        problems = []
        if not self.u_f > 0:
            problems.append("u_f must be > 0")
        if not self.q_c > 0:
            problems.append("q_c must be > 0")
        if not self.k_c > 0:
            problems.append("k_c must be > 0")
        if not self.alpha >= 1:
            problems.append("alpha must be >= 1")
        if not 0 <= self.bp < self.q_c:
            problems.append("bp must satisfy 0 <= bp < q_c")
        if self.k_c > 0 and not self.q_c / self.k_c < self.u_f:
            problems.append("speed at capacity q_c/k_c must be below u_f")
        return problems

    @property
    def is_valid(self) -> bool:
        return not self.violations()

    def validate(self) -> "SpeedFlowParams":
        problems = self.violations()
        if problems:
            raise DomainError("invalid speed-flow parameters: " + "; ".join(problems))
        return self


@dataclass(frozen=True)
class TrafficState:
    """Flow (pc/h/lane), speed (km/h) and the implied density (pc/km/lane)."""

    q: float
    u: float

    @property
    def k(self) -> float:
        return density(self.q, self.u)


def speed_at_capacity(params: SpeedFlowParams) -> float:
    """Speed at the capacity end of the curve, ``q_c / k_c``."""
    return params.q_c / params.k_c


def predict_speed(params: SpeedFlowParams, q):
    """Mean speed predicted for flow rate(s) ``q``.

    Parameters
    ----------
    params : SpeedFlowParams
        Must satisfy the parameter invariants.
    q : float or array_like
        Hourly flow rate per lane, ``0 <= q <= q_c``.

    Returns
    -------
    float or ndarray
        Speed in km/h, same shape as ``q``.
    """
    params.validate()
    q_arr = np.asarray(q, dtype=float)
    if np.any(np.isnan(q_arr)):
        raise DomainError("flow rate is NaN")
    if np.any(q_arr < 0):
        raise DomainError("flow rate must be non-negative")
    if np.any(q_arr > params.q_c):
        raise DomainError("flow beyond capacity; congested branch not modeled")

    u_f, q_c, bp, alpha = params.u_f, params.q_c, params.bp, params.alpha
    drop = u_f - q_c / params.k_c
    frac = np.clip((q_arr - bp) / (q_c - bp), 0.0, None)
    speed = np.where(q_arr <= bp, u_f, u_f - drop * frac**alpha)
    if speed.ndim == 0:
        return float(speed)
    return speed


def density(q, u):
    """Density ``q / u`` in pc/km/lane; speed must be positive."""
    q_arr = np.asarray(q, dtype=float)
    u_arr = np.asarray(u, dtype=float)
    if np.any(u_arr <= 0):
        raise DomainError("density undefined for non-positive speed")
    if np.any(q_arr < 0):
        raise DomainError("flow rate must be non-negative")
    k = q_arr / u_arr
    if k.ndim == 0:
        return float(k)
    return k
