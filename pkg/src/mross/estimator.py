"""Multi-resolution estimating equation: pilot points, corrected subsample
scores and region centroids combined into one Z-estimation problem."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import norm

from .data import split_head
from .losses import LabeledPoint, LossKind, LossSpec, scores, weighted_hessian, weighted_score
from .sampler import InclusionRule, RuleKind, ScanSummary, scan, truncation_level
from .solver import DEFAULT_MAX_ITER, DEFAULT_TOL, PilotFit, SolveReport, fit_pilot, solve_score

GRAM_RIDGE = 1e-10
CLASSIC_THRESHOLDS = {LossKind.LOGISTIC: 6.9, LossKind.DWD: 5.9}


class SingularProjection(UserWarning):
    """IPW Gram matrix of the projection features could not be inverted."""


@dataclass(frozen=True)
class ProjectionBasis:
    """Features ``g(x, y) = (1, y, phi'(y x'theta_pilot) y x)``, length d + 2."""

    pilot: PilotFit
    loss: LossSpec

    @property
    def d_g(self) -> int:
        return self.pilot.d + 2

    def __call__(self, X, y) -> np.ndarray:
        X = np.atleast_2d(X)
        y = np.asarray(y, dtype=float)
        G = np.empty((len(y), self.d_g))
        G[:, 0] = 1.0
        G[:, 1] = y
        np.multiply(self.row_coef(y, X @ self.pilot.theta)[:, None], X, out=G[:, 2:])
        return G

    def row_coef(self, y, T) -> np.ndarray:
        """Scalar ``phi'(y T) y`` multiplying ``x`` in the last d features."""
        return self.loss.dphi(y * T) * y

    def sum_rows(self, X, y, mask, T=None) -> np.ndarray:
        T = X @ self.pilot.theta if T is None else T
        m = mask.astype(float)
        return np.concatenate([[m.sum(), (y * m).sum()], X.T @ (self.row_coef(y, T) * m)])


def g_features(basis: ProjectionBasis, p: LabeledPoint) -> np.ndarray:
    return basis(p.x[None, :], [p.y])[0]


def _gram_solve(G, w, rhs):
    """Solve ``(sum_i w_i g_i g_i') c = rhs`` with a relative ridge."""
    gram = (G.T * w) @ G
    gram = gram + GRAM_RIDGE * np.trace(gram) / gram.shape[0] * np.eye(gram.shape[0])
    if not np.all(np.isfinite(gram)) or np.linalg.cond(gram) > 1e14:
        return None
    return np.linalg.solve(gram, rhs)


def _rb_parts(summary: ScanSummary, basis: ProjectionBasis):
    if summary.realized_r == 0:
        raise ValueError("empty subsample")
    if summary.gbar is None:
        raise ValueError("scan summary carries no g-mean; rescan with a projection basis")
    n = summary.n_total
    G = basis(summary.X_sub, summary.y_sub)
    w = 1.0 / (n * summary.pi_sub)
    gap = G.T @ w - (summary.n_s / n) * summary.gbar
    c = _gram_solve(G, w, gap)
    if c is None:
        warnings.warn("singular projection Gram matrix; using the plain IPW score", SingularProjection)
        return np.ones(summary.realized_r), None
    return 1.0 - G @ c, G


def rb_factors(summary: ScanSummary, basis: ProjectionBasis) -> tuple[np.ndarray, bool]:
    """Per-subsample-point correction factors of the projected score.

    ``1 - (sum_l w_l g_l - n^-1 sum_{l in S} g_l)' Gram^-1 g_i`` with IPW
    weights ``w_l = 1 / (n pi_l)``; both g-sums run over the sampling
    region.  Returns ``(factors, ok)``; on a singular Gram matrix the
    factors are all one (plain IPW) and ``ok`` is False.
    """
    factors, G = _rb_parts(summary, basis)
    return factors, G is not None


def rb_region_score(theta, summary: ScanSummary, basis: ProjectionBasis) -> np.ndarray:
    f, _ = rb_factors(summary, basis)
    w = f / (summary.n_total * summary.pi_sub)
    return weighted_score(basis.loss, np.asarray(theta, float), summary.X_sub, summary.y_sub, w)


def centroid_score(theta, summary: ScanSummary, loss: LossSpec) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    n = summary.n_total
    out = np.zeros_like(theta)
    if summary.n_plus:
        xp = summary.xbar_plus
        out += summary.n_plus / n * loss.dphi(xp @ theta) * xp
    if summary.n_minus:
        xm = summary.xbar_minus
        out -= summary.n_minus / n * loss.dphi(-(xm @ theta)) * xm
    return out


def combined_score(theta, pilot: PilotFit, summary: ScanSummary, basis: ProjectionBasis) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    n, r0 = summary.n_total, pilot.r0
    pilot_part = weighted_score(basis.loss, theta, pilot.X, pilot.y, np.ones(r0))
    region = rb_region_score(theta, summary, basis) + centroid_score(theta, summary, basis.loss)
    return pilot_part / (n + r0) + n / (n + r0) * region


def combined_jacobian(theta, pilot: PilotFit, summary: ScanSummary, basis: ProjectionBasis) -> np.ndarray:
    """Analytic Jacobian of :func:`combined_score` (``phi''`` in place of ``phi'``)."""
    theta = np.asarray(theta, dtype=float)
    loss = basis.loss
    n, r0 = summary.n_total, pilot.r0
    f, _ = rb_factors(summary, basis)
    J = weighted_hessian(loss, theta, pilot.X, pilot.y, np.ones(r0)) / (n + r0)
    region = weighted_hessian(loss, theta, summary.X_sub, summary.y_sub, f / (n * summary.pi_sub))
    if summary.n_plus:
        xp = summary.xbar_plus
        region += summary.n_plus / n * loss.ddphi(xp @ theta) * np.outer(xp, xp)
    if summary.n_minus:
        xm = summary.xbar_minus
        region += summary.n_minus / n * loss.ddphi(-(xm @ theta)) * np.outer(xm, xm)
    return J + n / (n + r0) * region


@dataclass
class EstimatingEquation:
    """Weighted score equation over pilot, subsample and centroid rows.

    Every piece of the combined equation is a weighted sum of per-row
    scores, so the equation is stored as stacked rows with weights.  With
    ``G_sub`` set the subsample rows carry projection corrections and the
    covariance uses projection residuals.
    """

    loss: LossSpec
    n: int
    X_pilot: np.ndarray
    y_pilot: np.ndarray
    X_sub: np.ndarray
    y_sub: np.ndarray
    pi_sub: np.ndarray
    factors: np.ndarray
    G_sub: np.ndarray | None = None
    centroids: tuple = ()  # (x, y, count) triples
    _stack: tuple = field(init=False, repr=False)

    def __post_init__(self):
        n, r0 = self.n, self.y_pilot.size
        N = n + r0
        rows = [self.X_pilot, self.X_sub]
        labels = [self.y_pilot, self.y_sub]
        weights = [np.full(r0, 1.0 / N), self.factors / (N * self.pi_sub)]
        for x, y, count in self.centroids:
            if count:
                rows.append(x[None, :])
                labels.append(np.array([y], dtype=float))
                weights.append(np.array([count / N]))
        self._stack = (np.concatenate(rows), np.concatenate(labels), np.concatenate(weights))

    @property
    def r0(self) -> int:
        return self.y_pilot.size

    def score(self, theta) -> np.ndarray:
        return weighted_score(self.loss, theta, *self._stack)

    def jacobian(self, theta) -> np.ndarray:
        return weighted_hessian(self.loss, theta, *self._stack)

    def solve(self, init, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER) -> SolveReport:
        return solve_score(self.score, self.jacobian, init, tol, max_iter)

    def covariance(self, theta, finite_population: bool = True) -> np.ndarray:
        """Sandwich covariance ``J^-1 M J^-T`` of the root at ``theta``.

        ``M`` is the Poisson-sampling variance of the IPW subsample term,
        ``sum (1 - pi) / (n pi)^2 a a'`` with ``a`` the (projection
        residual) scores.  With ``finite_population`` the variance of the
        full-data score around the risk minimizer is added; without it the
        ``(1 - pi)`` factor is dropped and the result is the conditional,
        ``r / n -> 0`` form.
        """
        theta = np.asarray(theta, dtype=float)
        n, r0 = self.n, self.r0
        N = n + r0
        psi_sub = scores(self.loss, theta, self.X_sub, self.y_sub)
        resid = psi_sub
        if self.G_sub is not None:
            w = 1.0 / (n * self.pi_sub)
            B = _gram_solve(self.G_sub, w, (self.G_sub.T * w) @ psi_sub)
            if B is not None:
                resid = psi_sub - self.G_sub @ B
        keep = (1.0 - self.pi_sub) if finite_population else np.ones_like(self.pi_sub)
        a = resid * (np.sqrt(keep) / (n * self.pi_sub))[:, None]
        middle = (n / N) ** 2 * (a.T @ a)
        if finite_population:
            second = psi_sub.T @ (psi_sub / (n * self.pi_sub)[:, None]) * n
            if r0:
                psi_p = scores(self.loss, theta, self.X_pilot, self.y_pilot)
                second += psi_p.T @ psi_p
            for x, y, count in self.centroids:
                if count:
                    s = self.loss.dphi(y * (x @ theta)) * y * x
                    second += count * np.outer(s, s)
            middle += second / N**2
        J = self.jacobian(theta)
        J_inv = np.linalg.inv(J)
        V = J_inv @ middle @ J_inv.T
        return (V + V.T) / 2


def build_equation(pilot: PilotFit, summary: ScanSummary, basis: ProjectionBasis,
                   correct: bool = True) -> tuple[EstimatingEquation, bool]:
    """Stack the combined equation; returns it and whether the correction held."""
    ok = True
    G = None
    if correct:
        factors, G = _rb_parts(summary, basis)
        ok = G is not None
    else:
        if summary.realized_r == 0:
            raise ValueError("empty subsample")
        factors = np.ones(summary.realized_r)
    centroids = ((summary.xbar_plus, 1.0, summary.n_plus), (summary.xbar_minus, -1.0, summary.n_minus))
    eq = EstimatingEquation(basis.loss, summary.n_total, pilot.X, pilot.y, summary.X_sub,
                            summary.y_sub, summary.pi_sub, factors, G, centroids)
    return eq, ok


def confidence_intervals(theta, covariance, level: float = 0.95) -> np.ndarray:
    """Per-coordinate normal intervals, shape ``(d, 2)``."""
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    var = np.diag(np.asarray(covariance, dtype=float))
    if np.any(var < 0):
        raise ValueError("covariance has a negative diagonal entry")
    half = norm.ppf((1 + level) / 2) * np.sqrt(var)
    theta = np.asarray(theta, dtype=float)
    return np.column_stack([theta - half, theta + half])


@dataclass(frozen=True)
class MrossEstimate:
    theta: np.ndarray
    covariance: np.ndarray
    intervals: np.ndarray
    level: float
    report: SolveReport
    diagnostics: dict


def plugin_variance(theta, pilot: PilotFit, summary: ScanSummary, basis: ProjectionBasis,
                    loss: LossSpec | None = None, *, correct: bool = True,
                    finite_population: bool = True) -> np.ndarray:
    if loss is not None and loss != basis.loss:
        raise ValueError("loss differs from the projection basis loss")
    eq, _ = build_equation(pilot, summary, basis, correct)
    return eq.covariance(theta, finite_population)


def solve_mross(pilot: PilotFit, summary: ScanSummary, basis: ProjectionBasis,
                tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER, *,
                correct: bool = True, level: float = 0.95, variance: bool = True,
                finite_population: bool = True) -> MrossEstimate:
    """Root of the combined equation, started at the pilot estimate.

    ``correct=False`` drops the projection correction (plain IPW weights),
    ``variance=False`` skips the covariance (used for timing).
    """
    eq, ok = build_equation(pilot, summary, basis, correct)
    report = eq.solve(pilot.theta, tol, max_iter)
    d = pilot.d
    if variance:
        cov = eq.covariance(report.theta, finite_population)
        intervals = confidence_intervals(report.theta, cov, level)
    else:
        cov = np.full((d, d), np.nan)
        intervals = np.full((d, 2), np.nan)
    diagnostics = dict(n_plus=summary.n_plus, n_minus=summary.n_minus, n_s=summary.n_s,
                       realized_r=summary.realized_r, pi_sum=summary.pi_sum,
                       normalizer=summary.normalizer, weight_sum=summary.weight_sum,
                       threshold_C=summary.threshold_C, projection_ok=ok)
    return MrossEstimate(report.theta, cov, intervals, level, report, diagnostics)


# ---------------------------------------------------------------------------
# Threshold policies
# ---------------------------------------------------------------------------


def eta_threshold(loss: LossSpec, eta: float = 0.99) -> float:
    """Threshold at which the working model's fitted P(Y=1|x) reaches ``eta``.

    Logistic: ``log(eta / (1 - eta))``.  DWD: ``gamma * sqrt(eta / (1 - eta))``.
    Squared hinge: 1, beyond which the score vanishes exactly.
    """
    if not 0.5 < eta < 1:
        raise ValueError("eta must lie in (0.5, 1)")
    odds = eta / (1 - eta)
    if loss.kind is LossKind.LOGISTIC:
        return math.log(odds)
    if loss.kind is LossKind.DWD:
        return loss.gamma * math.sqrt(odds)
    return 1.0


def rate_threshold(loss: LossSpec, r0: int, kappa: float = 0.5, exponent_gap: float = 0.05) -> float:
    """Asymptotic threshold orders: ``kappa (log r0 - log log r0)`` for the
    logistic loss and ``kappa r0^(1/4 - exponent_gap)`` for DWD.  These are
    conservative; prefer :func:`eta_threshold` in practice."""
    if loss.kind is LossKind.LOGISTIC:
        return kappa * (math.log(r0) - math.log(math.log(r0)))
    if loss.kind is LossKind.DWD:
        if not 0 < exponent_gap < 0.25:
            raise ValueError("exponent_gap must lie in (0, 1/4)")
        return kappa * r0 ** (0.25 - exponent_gap)
    raise ValueError(f"no asymptotic threshold order for {loss}")


def fit_mross(stream, loss: LossSpec, r0: int, r: float, rng: np.random.Generator, *,
              rule: str | RuleKind = RuleKind.LOPT, threshold: float | None = None,
              eta: float = 0.99, truncate: bool = False, level: float = 0.95,
              tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
              variance: bool = True, finite_population: bool = True) -> MrossEstimate:
    """End-to-end fit: pilot from the first ``r0`` points, one scan of the rest.

    ``threshold=None`` uses :func:`eta_threshold` at level ``eta``.
    """
    if stream.n_hint is None:
        raise ValueError("stream must know its length")
    Xp, yp, rest = split_head(stream.blocks(), r0)
    pilot = fit_pilot(loss, Xp, yp, tol=tol, max_iter=max_iter)
    C = eta_threshold(loss, eta) if threshold is None else threshold
    inc = InclusionRule(rule, r, C)
    if truncate:
        inc = replace(inc, truncation_M=truncation_level(inc, loss, pilot))
    basis = ProjectionBasis(pilot, loss)
    summary = scan(rest, pilot, inc, loss, basis, rng, n=stream.n_hint - r0)
    return solve_mross(pilot, summary, basis, tol, max_iter, level=level,
                       variance=variance, finite_population=finite_population)
