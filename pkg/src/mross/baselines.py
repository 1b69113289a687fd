"""Competitor estimators: uniform Poisson subsampling and plain optimal IPW
subsampling over the whole stream."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .estimator import EstimatingEquation, confidence_intervals
from .losses import LossSpec
from .sampler import InclusionRule, RuleKind, _blocks, scan
from .solver import DEFAULT_MAX_ITER, DEFAULT_TOL, PilotFit, SolveReport, WeightedSample, fit_weighted


class Method(str, enum.Enum):
    UNIF = "unif"
    OSMAC = "osmac"
    MROSS = "mross"


@dataclass(frozen=True)
class BaselineEstimate:
    method: Method
    theta: np.ndarray
    report: SolveReport
    realized_r: int
    covariance: np.ndarray | None = None
    intervals: np.ndarray | None = None


def _stream_length(stream, n):
    n = n if n is not None else getattr(stream, "n_hint", None)
    if n is None:
        raise ValueError("pass n or a stream that knows its length")
    return int(n)


def _finish(method, eq, report, variance, level, finite_population):
    cov = ints = None
    if variance:
        cov = eq.covariance(report.theta, finite_population)
        ints = confidence_intervals(report.theta, cov, level)
    return BaselineEstimate(Method(method), report.theta, report, eq.y_sub.size, cov, ints)


def unif_fit(stream, budget: float, loss: LossSpec, rng: np.random.Generator, *,
             n: int | None = None, variance: bool = True, level: float = 0.95,
             finite_population: bool = True, tol: float = DEFAULT_TOL,
             max_iter: int = DEFAULT_MAX_ITER) -> BaselineEstimate:
    """Keep each point with probability ``budget / n`` and fit the selected points.

    The constant IPW weight cancels from the score, so the fit is unweighted.
    """
    n = _stream_length(stream, n)
    if not 0 < budget <= n:
        raise ValueError(f"budget {budget} must lie in (0, n={n}]")
    pi = budget / n
    xs, ys = [], []
    for X, y in _blocks(stream):
        sel = rng.random(X.shape[0]) < pi
        xs.append(X[sel])
        ys.append(y[sel])
    X_sub, y_sub = np.concatenate(xs), np.concatenate(ys)
    if y_sub.size == 0:
        raise ValueError("uniform subsample is empty")
    report = fit_weighted(loss, WeightedSample(X_sub, y_sub, np.ones(y_sub.size)), tol=tol, max_iter=max_iter)
    d = X_sub.shape[1]
    eq = EstimatingEquation(loss, n, np.empty((0, d)), np.empty(0), X_sub, y_sub,
                            np.full(y_sub.size, pi), np.ones(y_sub.size))
    return _finish(Method.UNIF, eq, report, variance, level, finite_population)


def osmac_fit(stream, pilot: PilotFit, r: float, loss: LossSpec, rng: np.random.Generator, *,
              n: int | None = None, rule: str | RuleKind = RuleKind.LOPT, variance: bool = True,
              level: float = 0.95, finite_population: bool = True, tol: float = DEFAULT_TOL,
              max_iter: int = DEFAULT_MAX_ITER) -> BaselineEstimate:
    """Optimal-probability Poisson subsample of the whole stream, IPW fit.

    ``stream`` holds the points after the pilot.  The pilot enters the
    estimating equation with weight ``1 / (n + r0)`` and selected points with
    ``1 / ((n + r0) pi)``, the same pooling used by the multi-resolution
    estimator, so the two coincide once its region summaries and projection
    are switched off.
    """
    n = _stream_length(stream, n)
    summary = scan(stream, pilot, InclusionRule(rule, r, math.inf), loss, None, rng, n=n)
    if summary.realized_r == 0:
        raise ValueError("optimal subsample is empty")
    eq = EstimatingEquation(loss, summary.n_total, pilot.X, pilot.y, summary.X_sub, summary.y_sub,
                            summary.pi_sub, np.ones(summary.realized_r))
    report = eq.solve(pilot.theta, tol, max_iter)
    return _finish(Method.OSMAC, eq, report, variance, level, finite_population)
