"""
Bounded CMA-ES minimizer.

Standard (mu/mu_w, lambda)-CMA-ES with log recombination weights, cumulative step-size
adaptation and rank-one plus rank-mu covariance updates. The search runs in
box-normalized coordinates (every variable mapped onto [0, 1]); candidates are clamped
into the box and the clamped point is what gets evaluated and recombined.
"""
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from apps.common.exceptions import ConfigError, InvalidStartingPointError
from apps.common.utils import dumps

logger = logging.getLogger(__name__)

TERMINATION_REASONS = ('maxiter', 'ftol', 'xtol')
TINY = np.finfo(np.float64).tiny


def default_popsize(n):
    """lambda = 4 + floor(3 ln n)."""
    if n < 1:
        raise ConfigError('Population size needs a dimension of at least 1', errors={'n': n})
    return 4 + int(math.floor(3.0 * math.log(n)))


def repair_to_bounds(x, bounds):
    bounds = np.asarray(bounds, dtype=np.float64)
    return np.minimum(np.maximum(np.asarray(x, dtype=np.float64), bounds[:, 0]), bounds[:, 1])


@dataclass(frozen=True)
class OptConfig:
    maxiter: int = 100
    popsize: int = None
    sigma0: float = 0.15
    bounds: tuple = None
    seed: int = 0
    diagonal_only: bool = False
    ftol: float = 1e-8
    xtol: float = 1e-10
    telemetry_path: str = None

    def __post_init__(self):
        errors = {}
        if self.maxiter < 1:
            errors['maxiter'] = 'maxiter must be at least 1'
        if self.popsize is not None and self.popsize < 4:
            errors['popsize'] = 'popsize must be at least 4'
        if not self.sigma0 > 0:
            errors['sigma0'] = 'sigma0 must be positive'
        if self.ftol < 0 or self.xtol < 0:
            errors['tolerance'] = 'tolerances must be non-negative'
        if self.bounds is not None:
            bounds = np.asarray(self.bounds, dtype=np.float64)
            if bounds.ndim != 2 or bounds.shape[1] != 2:
                errors['bounds'] = 'bounds must be a list of [lo, hi] pairs'
            elif not np.all(bounds[:, 0] < bounds[:, 1]):
                errors['bounds'] = 'every bound needs lo < hi'
            else:
                object.__setattr__(self, 'bounds', tuple(tuple(pair) for pair in bounds.tolist()))
        if errors:
            raise ConfigError('Invalid optimizer configuration', errors=errors)

    def with_bounds(self, bounds):
        return dataclasses.replace(self, bounds=bounds)

    @classmethod
    def from_dict(cls, payload):
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{key: value for key, value in payload.items() if key in names})


@dataclass
class OptResult:
    x_best: np.ndarray
    f_best: float
    evaluations: int
    termination_reason: str
    history: list = field(default_factory=list)
    running_min: list = field(default_factory=list)
    sigma_history: list = field(default_factory=list)
    generations: int = 0
    x_mean: np.ndarray = None

    def as_dict(self):
        return {
            'x_best': self.x_best.tolist(),
            'f_best': self.f_best,
            'evaluations': self.evaluations,
            'termination_reason': self.termination_reason,
            'generations': self.generations,
            'history': list(self.history),
        }


class StrategyParameters:
    """Static strategy constants for dimension ``n`` and population ``lam``."""

    def __init__(self, n, lam, diagonal_only=False):
        self.n = n
        self.lam = lam
        self.mu = lam // 2
        raw = np.log(lam / 2.0 + 0.5) - np.log(np.arange(1, self.mu + 1))
        self.weights = raw / raw.sum()
        self.mueff = 1.0 / np.sum(self.weights ** 2)

        self.cc = (4 + self.mueff / n) / (n + 4 + 2 * self.mueff / n)
        self.cs = (self.mueff + 2) / (n + self.mueff + 5)
        self.c1 = 2 / ((n + 1.3) ** 2 + self.mueff)
        self.cmu = min(1 - self.c1, 2 * (self.mueff - 2 + 1 / self.mueff) / ((n + 2) ** 2 + self.mueff))
        if diagonal_only:
            # separable variant learns n variances only, so it can afford faster rates
            scale = (n + 1.5) / 3.0
            self.c1 = min(1.0, self.c1 * scale)
            self.cmu = min(1 - self.c1, self.cmu * scale)
        self.damps = 1 + 2 * max(0.0, math.sqrt((self.mueff - 1) / (n + 1)) - 1) + self.cs
        self.chiN = math.sqrt(n) * (1 - 1.0 / (4 * n) + 1.0 / (21 * n ** 2))


class CMAES:
    """
    Ask/tell CMA-ES state in normalized coordinates.
    """

    def __init__(self, mean, sigma, lam, rng, diagonal_only=False):
        n = len(mean)
        self.params = StrategyParameters(n, lam, diagonal_only)
        self.diagonal_only = diagonal_only
        self.mean = np.array(mean, dtype=np.float64)
        self.sigma = float(sigma)
        self.rng = rng
        self.pc = np.zeros(n)
        self.ps = np.zeros(n)
        self.C = np.ones(n) if diagonal_only else np.eye(n)
        self.generation = 0
        self._decompose()

    def _decompose(self):
        if self.diagonal_only:
            self.B = None
            self.D = np.sqrt(self.C)
            self.invsqrt = 1.0 / self.D
            return
        self.C = (self.C + self.C.T) / 2.0
        eigenvalues, self.B = np.linalg.eigh(self.C)
        self.D = np.sqrt(np.maximum(eigenvalues, TINY))
        self.invsqrt = self.B @ np.diag(1.0 / self.D) @ self.B.T

    @property
    def max_axis(self):
        return float(self.D.max())

    def ask(self):
        """Sample lambda candidates m + sigma * B D z."""
        z = self.rng.standard_normal((self.params.lam, len(self.mean)))
        if self.diagonal_only:
            steps = z * self.D
        else:
            steps = (z * self.D) @ self.B.T
        return self.mean + self.sigma * steps

    def tell(self, candidates, values):
        par = self.params
        self.generation += 1
        order = np.argsort(values, kind='stable')
        selected = candidates[order[:par.mu]]
        old = self.mean
        self.mean = par.weights @ selected

        y = (self.mean - old) / self.sigma
        z = self.invsqrt * y if self.diagonal_only else self.invsqrt @ y
        self.ps = (1 - par.cs) * self.ps + math.sqrt(par.cs * (2 - par.cs) * par.mueff) * z
        norm_ps = float(np.linalg.norm(self.ps))
        hsig = (norm_ps / math.sqrt(1 - (1 - par.cs) ** (2 * self.generation)) / par.chiN
                < 1.4 + 2.0 / (par.n + 1))
        self.pc = (1 - par.cc) * self.pc + hsig * math.sqrt(par.cc * (2 - par.cc) * par.mueff) * y

        steps = (selected - old) / self.sigma
        c1a = par.c1 * (1 - (1 - hsig) * par.cc * (2 - par.cc))
        if self.diagonal_only:
            rank_one = self.pc ** 2
            rank_mu = par.weights @ steps ** 2
        else:
            rank_one = np.outer(self.pc, self.pc)
            rank_mu = (steps.T * par.weights) @ steps
        self.C = (1 - c1a - par.cmu) * self.C + par.c1 * rank_one + par.cmu * rank_mu

        self.sigma *= math.exp(min(1.0, (par.cs / par.damps) * (norm_ps / par.chiN - 1)))
        self._decompose()


def _evaluate(f, points, map_fn):
    values = list(map_fn(f, points)) if map_fn is not None else [f(x) for x in points]
    values = np.asarray(values, dtype=np.float64)
    bad = ~np.isfinite(values)
    if bad.any():
        logger.warning(f"{int(bad.sum())} candidates returned non-finite values; ranking them last")
        values[bad] = np.inf
    return values


def minimize(f, x0, cfg, map_fn=None):
    """
    Minimize ``f`` inside ``cfg.bounds`` starting from ``x0``.

    ``map_fn(f, points)`` may evaluate a generation in parallel; it must return values
    in input order. The best point seen (``x0`` included) is returned.
    """
    if cfg.bounds is None:
        raise ConfigError('CMA-ES needs bounds', errors={'bounds': 'required'})
    bounds = np.asarray(cfg.bounds, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    n = len(x0)
    if len(bounds) != n:
        raise ConfigError('Bounds do not match the parameter count', errors={'bounds': f'expected {n} pairs'})
    if np.any(x0 < bounds[:, 0]) or np.any(x0 > bounds[:, 1]):
        raise ConfigError('Starting point lies outside the bounds', errors={'x0': x0.tolist()})
    lam = cfg.popsize or default_popsize(n)

    lo = bounds[:, 0]
    width = bounds[:, 1] - lo

    def to_box(u):
        return lo + width * u

    f0 = float(f(x0))
    if not np.isfinite(f0):
        raise InvalidStartingPointError(f_value=f0)

    es = CMAES((x0 - lo) / width, cfg.sigma0, lam, np.random.default_rng(cfg.seed), cfg.diagonal_only)
    x_best, f_best = x0.copy(), f0
    evaluations = 1
    history, running_min, sigma_history = [], [], []
    reason = 'maxiter'
    telemetry = None
    if cfg.telemetry_path:
        Path(cfg.telemetry_path).parent.mkdir(parents=True, exist_ok=True)
        telemetry = open(cfg.telemetry_path, 'w', encoding='utf-8')

    try:
        for generation in range(1, cfg.maxiter + 1):
            candidates = np.clip(es.ask(), 0.0, 1.0)
            points = to_box(candidates)
            points = repair_to_bounds(points, bounds)
            values = _evaluate(f, points, map_fn)
            evaluations += len(values)

            best = int(np.argmin(values))
            if values[best] < f_best:
                x_best, f_best = points[best].copy(), float(values[best])
            history.append(float(values[best]))
            running_min.append(f_best)

            es.tell(candidates, values)
            sigma_history.append(es.sigma)
            if telemetry:
                telemetry.write(dumps({
                    'generation': generation,
                    'best': float(values[best]),
                    'f_best': f_best,
                    'sigma': es.sigma,
                    'evaluations': evaluations,
                }) + '\n')

            finite = values[np.isfinite(values)]
            if len(finite) == len(values) and finite.max() - finite.min() <= cfg.ftol * max(abs(finite.min()), TINY):
                reason = 'ftol'
                break
            if es.sigma * es.max_axis * width.max() < cfg.xtol:
                reason = 'xtol'
                break
    finally:
        if telemetry:
            telemetry.close()

    logger.info(f"CMA-ES stopped by {reason} after {es.generation} generations "
                f"({evaluations} evaluations), f_best={f_best:.6g}")
    return OptResult(
        x_best=x_best,
        f_best=f_best,
        evaluations=evaluations,
        termination_reason=reason,
        history=history,
        running_min=running_min,
        sigma_history=sigma_history,
        generations=es.generation,
        x_mean=to_box(es.mean),
    )
