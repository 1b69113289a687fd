"""Convex classification-calibrated losses and per-point score/Hessian terms.

Every loss is a function of the margin ``z = y * x @ theta``.  The array
methods on :class:`LossSpec` are vectorized and used by the solvers; the
module-level ``eval_*`` functions are the checked scalar entry points.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit


class LossKind(str, enum.Enum):
    LOGISTIC = "logistic"
    SQUARED_HINGE = "squared_hinge"
    DWD = "dwd"


@dataclass(frozen=True)
class LossSpec:
    """A margin loss ``phi`` together with its first two derivatives.

    ``gamma`` is the DWD margin parameter and is ignored by the other kinds.
    """

    kind: LossKind = LossKind.LOGISTIC
    gamma: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "kind", LossKind(self.kind))
        if self.kind is LossKind.DWD and not (self.gamma > 0 and math.isfinite(self.gamma)):
            raise ValueError(f"DWD loss needs a positive finite gamma, got {self.gamma!r}")

    @classmethod
    def logistic(cls) -> "LossSpec":
        return cls(LossKind.LOGISTIC)

    @classmethod
    def squared_hinge(cls) -> "LossSpec":
        return cls(LossKind.SQUARED_HINGE)

    @classmethod
    def dwd(cls, gamma: float = 0.5) -> "LossSpec":
        return cls(LossKind.DWD, gamma)

    def __str__(self):
        if self.kind is LossKind.DWD:
            return f"dwd(gamma={self.gamma:g})"
        return self.kind.value

    def phi(self, z):
        z = np.asarray(z, dtype=float)
        if self.kind is LossKind.LOGISTIC:
            return np.logaddexp(0.0, -z)
        if self.kind is LossKind.SQUARED_HINGE:
            return np.square(np.maximum(1.0 - z, 0.0))
        g = self.gamma
        safe = np.where(z >= g, z, 1.0)
        return np.where(z >= g, 1.0 / safe, 2.0 / g - z / g**2)

    def dphi(self, z):
        z = np.asarray(z, dtype=float)
        if self.kind is LossKind.LOGISTIC:
            return -expit(-z)
        if self.kind is LossKind.SQUARED_HINGE:
            return -2.0 * np.maximum(1.0 - z, 0.0)
        g = self.gamma
        # z == gamma takes the left branch; both branches agree there.
        safe = np.where(z > g, z, 1.0)
        return np.where(z > g, -1.0 / safe**2, -1.0 / g**2)

    def ddphi(self, z):
        z = np.asarray(z, dtype=float)
        if self.kind is LossKind.LOGISTIC:
            return expit(z) * expit(-z)
        if self.kind is LossKind.SQUARED_HINGE:
            return np.where(z < 1.0, 2.0, 0.0)
        g = self.gamma
        # z == gamma takes the right branch 2/z**3.
        safe = np.where(z >= g, z, 1.0)
        return np.where(z >= g, 2.0 / safe**3, 0.0)


def _check_margin(z) -> float:
    z = float(z)
    if not math.isfinite(z):
        raise ValueError(f"loss evaluated at non-finite margin {z!r}")
    return z


def eval_loss(spec: LossSpec, z: float) -> float:
    return float(spec.phi(_check_margin(z)))


def eval_dloss(spec: LossSpec, z: float) -> float:
    return float(spec.dphi(_check_margin(z)))


def eval_ddloss(spec: LossSpec, z: float) -> float:
    return float(spec.ddphi(_check_margin(z)))


@dataclass(frozen=True)
class LabeledPoint:
    """Feature vector with a leading intercept entry and a label in {-1, +1}."""

    x: np.ndarray
    y: int

    def __post_init__(self):
        x = np.array(self.x, dtype=float)
        x.setflags(write=False)
        if x.ndim != 1 or x.size < 1:
            raise ValueError("x must be a non-empty 1-d vector")
        if not np.all(np.isfinite(x)):
            raise ValueError("x has non-finite entries")
        if x[0] != 1.0:
            raise ValueError(f"x[0] must be the intercept 1, got {x[0]!r}")
        if self.y not in (-1, 1):
            raise ValueError(f"label must be -1 or +1, got {self.y!r}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", int(self.y))

    @property
    def d(self) -> int:
        return self.x.size


def _margin(theta, p: LabeledPoint) -> float:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != p.x.shape:
        raise ValueError(f"dimension mismatch: theta has shape {theta.shape}, x has {p.x.shape}")
    return p.y * float(p.x @ theta)


def point_score(spec: LossSpec, theta, p: LabeledPoint) -> np.ndarray:
    """Gradient of ``theta -> phi(y x'theta)`` at one point."""
    return spec.dphi(_margin(theta, p)) * p.y * p.x


def point_hessian(spec: LossSpec, theta, p: LabeledPoint) -> np.ndarray:
    return spec.ddphi(_margin(theta, p)) * np.outer(p.x, p.x)


def scores(spec: LossSpec, theta, X, y) -> np.ndarray:
    """Row-wise scores ``phi'(y_i x_i'theta) y_i x_i`` for a block of points."""
    m = y * (X @ theta)
    return (spec.dphi(m) * y)[:, None] * X


def weighted_loss(spec: LossSpec, theta, X, y, w) -> float:
    return float(w @ spec.phi(y * (X @ theta)))


def weighted_score(spec: LossSpec, theta, X, y, w) -> np.ndarray:
    m = y * (X @ theta)
    return X.T @ (w * spec.dphi(m) * y)


def weighted_hessian(spec: LossSpec, theta, X, y, w) -> np.ndarray:
    m = y * (X @ theta)
    return (X.T * (w * spec.ddphi(m))) @ X
