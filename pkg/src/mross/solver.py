"""Damped Newton iteration for weighted score equations (Z-estimation)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .losses import LabeledPoint, LossSpec, weighted_hessian, weighted_loss, weighted_score

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 100
MAX_HALVINGS = 30
COND_LIMIT = 1e12


class SingularSystem(np.linalg.LinAlgError):
    """Newton system stays singular after ridge regularization."""


class NonConvergence(RuntimeError):
    pass


@dataclass(frozen=True)
class SolveReport:
    theta: np.ndarray
    iterations: int
    final_score_norm: float
    converged: bool
    diverging: bool = False
    # 2-norm of the score after each accepted step, starting at init.
    history: tuple = field(default=(), repr=False)


def regularized_solve(J, s) -> np.ndarray:
    """Solve ``J x = s``, adding a small ridge when ``J`` is ill-conditioned.

    A Jacobian that vanishes entirely (every margin on a linear piece of the
    loss, e.g. DWD started at zero) gives a unit-length step along ``s``.
    """
    J = np.asarray(J, dtype=float)
    s = np.asarray(s, dtype=float)
    d = J.shape[0]
    if not np.all(np.isfinite(J)):
        raise SingularSystem("Jacobian has non-finite entries")
    if not np.any(J):
        norm = np.linalg.norm(s)
        return s / norm if norm > 0 else np.zeros_like(s)
    if np.linalg.cond(J) > COND_LIMIT:
        lam = 1e-8 * np.trace(J) / d
        if not lam > 0:
            raise SingularSystem("Jacobian is singular and has no positive trace to regularize with")
        J = J + lam * np.eye(d)
        if np.linalg.cond(J) > 1e15:
            raise SingularSystem("Jacobian is singular after regularization")
    try:
        return np.linalg.solve(J, s)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from None


def solve_score(score_fn: Callable, jacobian_fn: Callable, init, tol: float = DEFAULT_TOL,
                max_iter: int = DEFAULT_MAX_ITER, step_tol: float = 1e-4,
                objective_fn: Callable | None = None) -> SolveReport:
    """Find a root of ``score_fn`` by Newton steps with step halving.

    A step is accepted once the score's 2-norm decreases, halving it up to
    30 times.  When the score is the gradient of ``objective_fn`` a step is
    also accepted if the norm stays level while the objective drops (flat
    stretches of a piecewise-linear loss), and never if the objective
    rises.  Convergence requires ``max|score| <= tol`` and a Newton step
    below ``step_tol * (1 + max|theta|)``; the second test keeps divergent
    problems (separable data) from looking converged as the score decays.
    Hitting ``max_iter`` returns a non-converged report rather than raising.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    theta = np.array(init, dtype=float)
    s = np.asarray(score_fn(theta), dtype=float)
    if s.shape != theta.shape:
        raise ValueError(f"score has shape {s.shape}, parameter has {theta.shape}")
    norm = np.linalg.norm(s)
    f = objective_fn(theta) if objective_fn is not None else None
    history = [norm]
    theta_norms = [np.linalg.norm(theta)]
    converged = False
    it = 0
    while True:
        step = regularized_solve(jacobian_fn(theta), s)
        if np.max(np.abs(s)) <= tol and np.max(np.abs(step)) <= step_tol * (1 + np.max(np.abs(theta))):
            converged = True
            break
        if it >= max_iter:
            break
        t = 1.0
        for _ in range(MAX_HALVINGS + 1):
            cand = theta - t * step
            s_c = np.asarray(score_fn(cand), dtype=float)
            n_c = np.linalg.norm(s_c)
            if objective_fn is None:
                if np.isfinite(n_c) and n_c < norm:
                    break
            elif np.isfinite(n_c) and n_c <= norm:
                f_c = objective_fn(cand)
                # rounding slack on the objective so the last Newton steps are not refused
                if f_c <= f + 1e-13 * (1 + abs(f)) and (n_c < norm or f_c < f):
                    break
            t *= 0.5
        else:
            # no decrease possible; we are at rounding level or stuck
            converged = bool(np.max(np.abs(s)) <= tol)
            break
        theta, s, norm = cand, s_c, n_c
        if objective_fn is not None:
            f = f_c
        it += 1
        history.append(norm)
        theta_norms.append(np.linalg.norm(theta))

    diverging = (not converged and it >= 10 and theta_norms[-1] > 10
                 and theta_norms[-1] >= 1.5 * theta_norms[it // 2])
    return SolveReport(theta, it, float(np.max(np.abs(s))), converged, diverging, tuple(history))


@dataclass(frozen=True)
class WeightedSample:
    X: np.ndarray
    y: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        y = np.asarray(self.y, dtype=float)
        w = np.asarray(self.w, dtype=float)
        if not (X.shape[0] == y.shape[0] == w.shape[0]):
            raise ValueError("points and weights differ in length")
        if not np.all(np.isfinite(w)) or np.any(w < 0) or not np.any(w > 0):
            raise ValueError("weights must be finite, non-negative and not all zero")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "w", w)

    @classmethod
    def from_points(cls, points: list[LabeledPoint], weights) -> "WeightedSample":
        return cls(np.array([p.x for p in points]), np.array([p.y for p in points]), weights)


def fit_weighted(loss: LossSpec, sample: WeightedSample, init=None, tol: float = DEFAULT_TOL,
                 max_iter: int = DEFAULT_MAX_ITER) -> SolveReport:
    """Minimizer of ``sum_i w_i phi(y_i x_i'theta)``: root of the weighted score."""
    X, y, w = sample.X, sample.y, sample.w
    init = np.zeros(X.shape[1]) if init is None else init
    return solve_score(lambda t: weighted_score(loss, t, X, y, w),
                       lambda t: weighted_hessian(loss, t, X, y, w),
                       init, tol, max_iter, objective_fn=lambda t: weighted_loss(loss, t, X, y, w))


def fit_stream(loss: LossSpec, stream, init=None, tol: float = DEFAULT_TOL,
               max_iter: int = DEFAULT_MAX_ITER) -> SolveReport:
    """Full-data M-estimate, accumulating the mean score block by block."""

    def accumulate(theta, part):
        total, n = 0.0, 0
        for X, y in stream.blocks():
            total = total + part(loss, theta, X, y, np.ones(X.shape[0]))
            n += X.shape[0]
        return total / n

    init = np.zeros(stream.d) if init is None else init
    return solve_score(lambda t: accumulate(t, weighted_score), lambda t: accumulate(t, weighted_hessian),
                       init, tol, max_iter, objective_fn=lambda t: accumulate(t, weighted_loss))


@dataclass(frozen=True)
class PilotFit:
    theta: np.ndarray
    hessian: np.ndarray
    X: np.ndarray
    y: np.ndarray
    report: SolveReport | None = None

    @property
    def r0(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.theta.size


def pilot_hessian(loss: LossSpec, theta, X, y) -> np.ndarray:
    H = weighted_hessian(loss, theta, X, y, np.full(X.shape[0], 1.0 / X.shape[0]))
    H = (H + H.T) / 2
    if np.linalg.eigvalsh(H)[0] <= 0 or np.linalg.cond(H) > COND_LIMIT:
        H = H + 1e-8 * max(np.trace(H), 1e-300) / H.shape[0] * np.eye(H.shape[0])
    return H


def fit_pilot(loss: LossSpec, X, y=None, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> PilotFit:
    """Unweighted fit on the pilot sample plus its Hessian estimate.

    ``X`` is an ``(r0, d)`` array with labels ``y``, or a list of
    :class:`LabeledPoint` when ``y`` is omitted.
    """
    if y is None:
        X, y = np.array([p.x for p in X]), np.array([float(p.y) for p in X])
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    r0, d = X.shape
    if r0 < 10 * d:
        raise ValueError(f"pilot size {r0} is below 10*d = {10 * d}")
    report = fit_weighted(loss, WeightedSample(X, y, np.full(r0, 1.0 / r0)), tol=tol, max_iter=max_iter)
    if not report.converged:
        raise NonConvergence(f"pilot fit did not converge ({report.iterations} iterations, "
                             f"score {report.final_score_norm:.3g}); try a larger pilot sample")
    return PilotFit(report.theta, pilot_hessian(loss, report.theta, X, y), X, y, report)
