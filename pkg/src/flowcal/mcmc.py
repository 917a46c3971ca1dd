"""Multi-chain random-walk Metropolis calibration of the speed-flow curve.

The posterior over ``(u_f, q_c, bp, alpha)`` combines uniform priors with a
Normal likelihood for observed speeds around the curve.  The likelihood
standard deviation is a plug-in value (by default the standard deviation of
the observed speeds), and the density at capacity is fixed by land use.

Chains use joint Gaussian proposals.  During burn-in the proposal covariance
and a global step scale are adapted; both are frozen once burn-in ends, so the
kept samples come from a fixed Metropolis kernel.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .ingest import Observation
from .io import atomic_open, write_json
from .model import PARAM_NAMES, SpeedFlowParams

__all__ = [
    "ConfigError",
    "ConvergenceError",
    "PriorSpec",
    "LikelihoodSpec",
    "McmcConfig",
    "FlowSpeedData",
    "ChainSet",
    "MCMC_CONFIGURATIONS",
    "log_posterior",
    "run_chains",
    "gelman_rubin",
    "psrf",
    "autocorrelation",
    "effective_sample_size",
    "kept_length",
    "start_points",
]

#: Iterations, burn-in and thin of the three reference run lengths.
MCMC_CONFIGURATIONS = {
    1: (20000, 0, 0),
    2: (30000, 10000, 0),
    3: (50000, 30000, 0),
}

_OPTIMAL_RW_SCALE = 2.38


class ConfigError(ValueError):
    """Invalid sampler, prior or likelihood configuration."""


class ConvergenceError(RuntimeError):
    """A chain failed to move; the proposal scales need changing."""


@dataclass(frozen=True)
class PriorSpec:
    """Independent uniform priors, ``(lower, upper)`` per parameter."""

    u_f: tuple = (0.0, 160.0)
    q_c: tuple = (0.0, 2800.0)
    bp: tuple = (0.0, 2000.0)
    alpha: tuple = (1.0, 3.0)

    def __post_init__(self):
        for name in PARAM_NAMES:
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ConfigError(f"prior for {name}: lower {lo} must be below upper {hi}")

    @property
    def lower(self) -> np.ndarray:
        return np.array([getattr(self, n)[0] for n in PARAM_NAMES], dtype=float)

    @property
    def upper(self) -> np.ndarray:
        return np.array([getattr(self, n)[1] for n in PARAM_NAMES], dtype=float)

    @property
    def log_density(self) -> float:
        """Log prior density inside the box."""
        return -float(np.sum(np.log(self.upper - self.lower)))

    def contains(self, theta) -> bool:
        theta = np.asarray(theta, dtype=float)
        return bool(np.all(theta >= self.lower) and np.all(theta <= self.upper))

    def as_dict(self) -> dict:
        return {n: list(getattr(self, n)) for n in PARAM_NAMES}

    @classmethod
    def from_dict(cls, d: Mapping) -> "PriorSpec":
        return cls(**{n: tuple(d[n]) for n in PARAM_NAMES})


@dataclass(frozen=True)
class LikelihoodSpec:
    """Normal observation model for speeds; ``sigma`` in km/h.

    With ``source="from_data"`` and no ``sigma``, the standard deviation of
    the observed speeds is used.
    """

    sigma: Optional[float] = None
    source: str = "from_data"

    def __post_init__(self):
        if self.source not in ("from_data", "fixed"):
            raise ConfigError(f"unknown likelihood source {self.source!r}")
        if self.source == "fixed" and self.sigma is None:
            raise ConfigError("fixed likelihood needs sigma")
        if self.sigma is not None and not self.sigma > 0:
            raise ConfigError("sigma must be positive")

    @classmethod
    def fixed(cls, sigma: float) -> "LikelihoodSpec":
        return cls(sigma=float(sigma), source="fixed")

    def resolve(self, data: "FlowSpeedData") -> float:
        if self.sigma is not None:
            return float(self.sigma)
        if data.n < 2:
            raise ConfigError("sigma from data needs at least two observations")
        sigma = float(np.std(data.u, ddof=1))
        if not sigma > 0:
            raise ConfigError("observed speeds have zero spread; use a fixed sigma")
        return sigma


@dataclass(frozen=True)
class McmcConfig:
    """Sampler settings.

    ``thin`` counts discarded iterations between kept ones (0 keeps every
    post-burn-in iteration).  A zero entry in ``proposal_scales`` holds that
    parameter fixed at its start value.
    """

    n_chains: int = 3
    iterations: int = 50000
    burn_in: int = 30000
    thin: int = 0
    seed: int = 0
    proposal_scales: Optional[tuple] = None
    adapt: bool = True
    target_accept: float = 0.234
    initial: Optional[tuple] = None
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.n_chains < 2:
            raise ConfigError("n_chains must be >= 2 for the Gelman-Rubin diagnostic")
        if self.iterations < 1:
            raise ConfigError("iterations must be positive")
        if self.burn_in < 0:
            raise ConfigError("burn_in must be >= 0")
        if not self.burn_in < self.iterations:
            raise ConfigError(f"burn_in ({self.burn_in}) must be below iterations ({self.iterations})")
        if self.thin < 0:
            raise ConfigError("thin must be >= 0")
        if not 0 < self.target_accept < 1:
            raise ConfigError("target_accept must be in (0, 1)")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.proposal_scales is not None:
            scales = np.asarray(self.proposal_scales, dtype=float)
            if scales.shape != (len(PARAM_NAMES),) or np.any(scales < 0) or not np.all(np.isfinite(scales)):
                raise ConfigError("proposal_scales must be four finite non-negative numbers")
        if self.initial is not None:
            init = np.asarray(self.initial, dtype=float)
            if init.shape != (self.n_chains, len(PARAM_NAMES)):
                raise ConfigError(f"initial must have shape ({self.n_chains}, {len(PARAM_NAMES)})")

    @classmethod
    def reference(cls, number: int, **overrides) -> "McmcConfig":
        """One of the three reference run lengths (1, 2 or 3)."""
        iterations, burn_in, thin = MCMC_CONFIGURATIONS[number]
        return cls(iterations=iterations, burn_in=burn_in, thin=thin, **overrides)

    def as_dict(self) -> dict:
        d = asdict(self)
        for key in ("proposal_scales", "initial"):
            if d[key] is not None:
                d[key] = np.asarray(d[key], dtype=float).tolist()
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "McmcConfig":
        d = dict(d)
        if d.get("proposal_scales") is not None:
            d["proposal_scales"] = tuple(d["proposal_scales"])
        if d.get("initial") is not None:
            d["initial"] = tuple(tuple(row) for row in d["initial"])
        return cls(**d)


def kept_length(iterations: int, burn_in: int, thin: int) -> int:
    return (iterations - burn_in) // (thin + 1)


@dataclass(frozen=True)
class FlowSpeedData:
    """Flow/speed pairs as arrays."""

    q: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        u = np.asarray(self.u, dtype=float)
        if q.shape != u.shape or q.ndim != 1:
            raise ValueError("q and u must be 1-D arrays of equal length")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "u", u)

    @property
    def n(self) -> int:
        return self.q.size

    @classmethod
    def from_observations(cls, obs: Sequence[Observation]) -> "FlowSpeedData":
        return cls(np.array([o.q for o in obs], dtype=float), np.array([o.u for o in obs], dtype=float))

    @classmethod
    def coerce(cls, data) -> "FlowSpeedData":
        if isinstance(data, cls):
            return data
        if isinstance(data, tuple) and len(data) == 2:
            return cls(*data)
        return cls.from_observations(list(data))


class _LogPosterior:
    """Fast evaluator of the unnormalized log posterior on a parameter vector."""

    def __init__(self, data: FlowSpeedData, prior: PriorSpec, sigma: float, k_c: float):
        if data.n == 0:
            raise ValueError("log posterior undefined for empty data")
        order = np.argsort(data.q, kind="stable")
        self.q = data.q[order]
        self.u_mean = float(np.mean(data.u))
        self.u = data.u[order]
        centred = self.u - self.u_mean
        self.s1 = np.concatenate(([0.0], np.cumsum(centred)))
        self.s2 = np.concatenate(([0.0], np.cumsum(centred * centred)))
        self.q_max = float(self.q[-1])
        self.lower = prior.lower
        self.upper = prior.upper
        self.k_c = float(k_c)
        self.inv_var = 1.0 / (sigma * sigma)
        self.const = -0.5 * data.n * math.log(2.0 * math.pi * sigma * sigma) + prior.log_density

    def sse(self, u_f, q_c, bp, alpha) -> float:
        i = int(np.searchsorted(self.q, bp, side="right"))
        shift = u_f - self.u_mean
        plateau = self.s2[i] - 2.0 * shift * self.s1[i] + i * shift * shift
        if i == self.q.size:
            return max(plateau, 0.0)
        frac = (self.q[i:] - bp) / (q_c - bp)
        resid = self.u[i:] - u_f + (u_f - q_c / self.k_c) * frac**alpha
        return max(plateau, 0.0) + float(np.dot(resid, resid))

    def __call__(self, theta) -> float:
        u_f, q_c, bp, alpha = theta
        lo, hi = self.lower, self.upper
        if not (lo[0] <= u_f <= hi[0] and lo[1] <= q_c <= hi[1]
                and lo[2] <= bp <= hi[2] and lo[3] <= alpha <= hi[3]):
            return -math.inf
        if not (u_f > 0 and q_c > 0 and alpha >= 1 and 0 <= bp < q_c and q_c / self.k_c < u_f):
            return -math.inf
        if self.q_max > q_c:
            return -math.inf
        return self.const - 0.5 * self.inv_var * self.sse(u_f, q_c, bp, alpha)


def log_posterior(params: SpeedFlowParams, data, prior: PriorSpec = PriorSpec(),
                  lik: LikelihoodSpec = LikelihoodSpec()) -> float:
    """Unnormalized log posterior of ``params`` given flow/speed data.

    Returns ``-inf`` outside the prior box, for parameters that break the
    curve invariants, or when any observed flow exceeds ``q_c``.
    """
    data = FlowSpeedData.coerce(data)
    if data.n == 0:
        raise ValueError("log posterior undefined for empty data")
    sigma = lik.resolve(data)
    return _LogPosterior(data, prior, sigma, params.k_c)(params.as_vector())


def start_points(n_chains: int, prior: PriorSpec, k_c: float, q_max: float = 0.0) -> np.ndarray:
    """Deterministic, distinct, feasible start vectors.

    Chain ``c`` places parameter ``j`` at level ``(c + j) mod n`` of the
    evenly spaced interior levels ``1/(n+1), ..., n/(n+1)`` (the quartiles
    for three chains).  Levels are applied within the feasible part of each
    prior range: ``q_c`` above the largest observed flow, ``bp`` below
    ``q_c`` and ``u_f`` above the speed at capacity.
    """
    levels = np.arange(1, n_chains + 1) / (n_chains + 1)
    lo, hi = prior.lower, prior.upper
    qc_lo = max(lo[1], q_max)
    if not qc_lo < hi[1]:
        raise ConfigError(f"largest observed flow {q_max:g} exceeds the capacity prior")
    points = np.empty((n_chains, len(PARAM_NAMES)))
    for c in range(n_chains):
        lvl = [levels[(c + j) % n_chains] for j in range(len(PARAM_NAMES))]
        q_c = qc_lo + lvl[1] * (hi[1] - qc_lo)
        bp_hi = min(hi[2], q_c)
        bp = lo[2] + lvl[2] * (bp_hi - lo[2])
        uf_lo = max(lo[0], q_c / k_c)
        if not uf_lo < hi[0]:
            raise ConfigError("no free-flow speed in the prior lies above the speed at capacity")
        u_f = uf_lo + lvl[0] * (hi[0] - uf_lo)
        alpha = lo[3] + lvl[3] * (hi[3] - lo[3])
        points[c] = (u_f, q_c, bp, alpha)
    return points


@dataclass
class ChainSet:
    """Kept samples of every chain, ``traces[name]`` shaped ``(n_chains, n_kept)``."""

    traces: dict
    acceptance: np.ndarray = field(default_factory=lambda: np.array([]))
    config: Optional[McmcConfig] = None
    k_c: float = math.nan
    sigma: float = math.nan
    prior: PriorSpec = field(default_factory=PriorSpec)

    def __post_init__(self):
        self.traces = {name: np.atleast_2d(np.asarray(v, dtype=float)) for name, v in self.traces.items()}
        shapes = {v.shape for v in self.traces.values()}
        if len(shapes) > 1:
            raise ValueError(f"all traces must share one shape, got {sorted(shapes)}")

    @property
    def n_chains(self) -> int:
        return next(iter(self.traces.values())).shape[0]

    @property
    def n_kept(self) -> int:
        return next(iter(self.traces.values())).shape[1]

    @property
    def names(self) -> tuple:
        return tuple(self.traces)

    def pooled(self, name: str) -> np.ndarray:
        return self.traces[name].reshape(-1)

    def draws(self) -> np.ndarray:
        """Pooled parameter vectors, shape ``(n_chains * n_kept, 4)``."""
        return np.column_stack([self.pooled(n) for n in PARAM_NAMES])

    def save(self, directory) -> list[Path]:
        """Write ``trace_<param>.csv`` files and ``chains.json``; returns the paths."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        written = []
        for name, matrix in self.traces.items():
            path = directory / f"trace_{name}.csv"
            with atomic_open(path) as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow([f"chain_{c}" for c in range(matrix.shape[0])])
                writer.writerows([repr(float(v)) for v in row] for row in matrix.T)
            written.append(path)
        meta = {
            "params": list(self.traces),
            "n_chains": self.n_chains,
            "n_kept": self.n_kept,
            "acceptance": [float(a) for a in self.acceptance],
            "k_c": self.k_c,
            "sigma": self.sigma,
            "prior": self.prior.as_dict(),
            "config": self.config.as_dict() if self.config else None,
        }
        path = directory / "chains.json"
        write_json(path, meta)
        written.append(path)
        return written

    @classmethod
    def load(cls, directory) -> "ChainSet":
        directory = Path(directory)
        meta = json.loads((directory / "chains.json").read_text(encoding="utf-8"))
        traces = {}
        for name in meta["params"]:
            data = np.loadtxt(directory / f"trace_{name}.csv", delimiter=",", skiprows=1, ndmin=2)
            traces[name] = data.T
        return cls(
            traces=traces,
            acceptance=np.asarray(meta["acceptance"], dtype=float),
            config=McmcConfig.from_dict(meta["config"]) if meta.get("config") else None,
            k_c=meta["k_c"],
            sigma=meta["sigma"],
            prior=PriorSpec.from_dict(meta["prior"]),
        )


def _adapt_interval(burn_in: int) -> int:
    return max(50, min(500, burn_in // 8))


def _run_chain(logp: _LogPosterior, x0: np.ndarray, cfg: McmcConfig, scales: np.ndarray,
               seed_seq: np.random.SeedSequence) -> tuple[np.ndarray, float, float]:
    rng = np.random.default_rng(seed_seq)
    free = np.flatnonzero(scales > 0)
    k = free.size
    n_keep = kept_length(cfg.iterations, cfg.burn_in, cfg.thin)
    kept = np.empty((n_keep, x0.size))

    x = x0.astype(float).copy()
    lp = logp(x)
    if not math.isfinite(lp):
        raise ConfigError(f"start point {x.tolist()} has zero posterior density")

    z = rng.standard_normal((cfg.iterations, k))
    log_u = np.log(rng.random(cfg.iterations))
    chol = np.diag(scales[free])
    log_lam = 0.0
    adapting = cfg.adapt and cfg.burn_in > 0 and k > 0
    interval = _adapt_interval(cfg.burn_in)
    history = np.empty((cfg.burn_in, k)) if adapting else None
    since_update = 0
    accepted_burn = 0
    accepted_main = 0
    j = 0

    for t in range(cfg.burn_in):
        prop = x.copy()
        if k:
            prop[free] += math.exp(log_lam) * (chol @ z[t])
        lp_prop = logp(prop)
        diff = lp_prop - lp
        if log_u[t] < diff:
            x, lp = prop, lp_prop
            accepted_burn += 1
        if adapting:
            history[t] = x[free]
            since_update += 1
            accept_prob = 1.0 if diff >= 0 else math.exp(diff)
            log_lam += since_update ** -0.6 * (accept_prob - cfg.target_accept)
            if (t + 1) % interval == 0 and t + 1 >= 2 * interval:
                window = history[(t + 1) // 2: t + 1]
                cov = np.atleast_2d(np.cov(window, rowvar=False))
                try:
                    new_chol = np.linalg.cholesky(cov * (_OPTIMAL_RW_SCALE**2 / k))
                except np.linalg.LinAlgError:
                    new_chol = None
                if new_chol is not None and np.all(np.isfinite(new_chol)):
                    chol = new_chol
                    log_lam = 0.0
                    since_update = 0

    main = cfg.iterations - cfg.burn_in
    steps = np.zeros((main, x0.size))
    if k:
        steps[:, free] = math.exp(log_lam) * (z[cfg.burn_in:] @ chol.T)
    log_u_main = log_u[cfg.burn_in:]
    stride = cfg.thin + 1
    for s in range(main):
        prop = x + steps[s]
        lp_prop = logp(prop)
        if log_u_main[s] < lp_prop - lp:
            x, lp = prop, lp_prop
            accepted_main += 1
        if s % stride == 0 and j < n_keep:
            kept[j] = x
            j += 1

    if k and main > 0 and accepted_main == 0:
        raise ConvergenceError(
            "chain accepted no proposals after warm-up; reduce proposal_scales "
            "or lengthen burn-in so the proposal can adapt"
        )
    rate = accepted_main / main if main else 0.0
    return kept, rate, accepted_burn / cfg.burn_in if cfg.burn_in else rate


def run_chains(data, prior: PriorSpec = PriorSpec(), lik: LikelihoodSpec = LikelihoodSpec(),
               cfg: McmcConfig = McmcConfig(), *, k_c: float = 26.0) -> ChainSet:
    """Run ``cfg.n_chains`` independent Metropolis chains.

    Chain ``c`` draws from its own stream seeded by ``(cfg.seed, c)``, so the
    result does not depend on ``cfg.workers`` or scheduling.
    """
    cfg.validate()
    data = FlowSpeedData.coerce(data)
    if data.n == 0:
        raise ValueError("cannot calibrate on empty data")
    sigma = lik.resolve(data)
    logp = _LogPosterior(data, prior, sigma, k_c)

    if cfg.proposal_scales is None:
        scales = 0.02 * (prior.upper - prior.lower)
    else:
        scales = np.asarray(cfg.proposal_scales, dtype=float)
    if cfg.initial is not None:
        starts = np.asarray(cfg.initial, dtype=float)
    else:
        starts = start_points(cfg.n_chains, prior, k_c, logp.q_max)

    root = np.random.SeedSequence(cfg.seed)

    def one(c: int):
        seq = np.random.SeedSequence(root.entropy, spawn_key=(c,))
        return _run_chain(logp, starts[c], cfg, scales, seq)

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=min(cfg.workers, cfg.n_chains)) as pool:
            results = list(pool.map(one, range(cfg.n_chains)))
    else:
        results = [one(c) for c in range(cfg.n_chains)]

    stacked = np.stack([r[0] for r in results])
    traces = {name: stacked[:, :, i].copy() for i, name in enumerate(PARAM_NAMES)}
    return ChainSet(
        traces=traces,
        acceptance=np.array([r[1] for r in results]),
        config=cfg,
        k_c=float(k_c),
        sigma=sigma,
        prior=prior,
    )


def psrf(chains) -> float:
    """Potential scale reduction factor for one parameter.

    ``chains`` has shape ``(m, n)``.  Uses ``V = (n-1)/n W + B/n`` and
    ``R = sqrt(V / W)`` with no degrees-of-freedom correction.
    """
    chains = np.asarray(chains, dtype=float)
    m, n = chains.shape
    if m < 2 or n < 2:
        raise ValueError("Gelman-Rubin needs at least 2 chains of length >= 2")
    W = float(np.mean(np.var(chains, axis=1, ddof=1)))
    B = n * float(np.var(np.mean(chains, axis=1), ddof=1))
    if W == 0:
        warnings.warn("zero within-chain variance; Gelman-Rubin is degenerate, reporting 1.0",
                      RuntimeWarning, stacklevel=2)
        return 1.0
    V = (n - 1) / n * W + B / n
    return math.sqrt(V / W)


def gelman_rubin(chains) -> dict:
    """Per-parameter R-hat for a :class:`ChainSet` or a mapping of ``(m, n)`` arrays."""
    traces = chains.traces if isinstance(chains, ChainSet) else chains
    return {name: psrf(matrix) for name, matrix in traces.items()}


def autocorrelation(samples, max_lag: int) -> np.ndarray:
    """Normalized autocorrelation for lags ``0..max_lag``.

    The lag-``l`` autocovariance is averaged over its ``n - l`` pairs, so a
    perfectly alternating sequence gives exactly -1 at lag 1.
    """
    x = np.asarray(samples, dtype=float).ravel()
    n = x.size
    if max_lag < 0 or n <= max_lag:
        raise ValueError(f"need more than max_lag={max_lag} samples, got {n}")
    d = x - x.mean()
    var = float(np.dot(d, d)) / n
    if var == 0:
        raise ValueError("autocorrelation undefined for a zero-variance chain")
    size = 1 << (2 * n - 1).bit_length()
    spec = np.fft.rfft(d, size)
    acov = np.fft.irfft(spec * np.conj(spec), size)[: max_lag + 1]
    lags = np.arange(max_lag + 1)
    rho = acov / (n - lags) / var
    rho[0] = 1.0
    return rho


def effective_sample_size(chains) -> float:
    """Effective sample size pooled over chains, Geyer initial positive sequence."""
    chains = np.atleast_2d(np.asarray(chains, dtype=float))
    total = 0.0
    for x in chains:
        n = x.size
        d = x - x.mean()
        var = float(np.dot(d, d)) / n
        if var == 0:
            continue
        size = 1 << (2 * n - 1).bit_length()
        spec = np.fft.rfft(d, size)
        rho = np.fft.irfft(spec * np.conj(spec), size)[:n] / (n * var)
        tau = -1.0
        for lag in range(0, n - 1, 2):
            pair = rho[lag] + rho[lag + 1]
            if pair <= 0:
                break
            tau += 2.0 * pair
        total += n / max(tau, 1.0 / n)
    return total
