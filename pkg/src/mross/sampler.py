"""Single-pass Poisson subsampling with region partition and streaming summaries.

Points whose pilot linear score is beyond ``+C`` (label +1) or below ``-C``
(label -1) are summarized by running centroids.  Everything else is the
sampling region ``S``: it feeds the running mean of the projection features
``g`` and is Poisson-sampled with optimal inclusion probabilities.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .losses import LabeledPoint, LossSpec
from .solver import COND_LIMIT, PilotFit


class RuleKind(str, enum.Enum):
    UNIFORM = "uniform"
    LOPT = "lopt"
    AOPT = "aopt"


@dataclass(frozen=True)
class InclusionRule:
    kind: RuleKind
    budget_r: float
    threshold_C: float = math.inf
    truncation_M: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", RuleKind(self.kind))
        if not self.budget_r >= 1:
            raise ValueError("budget_r must be at least 1")
        if not self.threshold_C > 0:
            raise ValueError("threshold_C must be positive")
        if self.truncation_M is not None and not self.truncation_M > 0:
            raise ValueError("truncation_M must be positive")


class RegionTag(enum.Enum):
    PLUS = 1
    MINUS = -1
    S = 0


def region_codes(theta, C: float, X, y, T=None) -> np.ndarray:
    """Vectorized region labels: +1 (plus), -1 (minus), 0 (sampling region)."""
    T = X @ theta if T is None else T
    codes = np.zeros(len(y), dtype=np.int8)
    if math.isinf(C):
        return codes
    codes[(T > C) & (y > 0)] = 1
    codes[(T < -C) & (y < 0)] = -1
    return codes


def classify_region(pilot: PilotFit, C: float, p: LabeledPoint) -> RegionTag:
    if not C > 0:
        raise ValueError("threshold must be positive")
    code = region_codes(pilot.theta, C, p.x[None, :], np.array([p.y]))[0]
    return RegionTag(int(code))


def _inverse_hessian(pilot: PilotFit) -> np.ndarray:
    H = pilot.hessian
    if not np.all(np.isfinite(H)) or np.linalg.cond(H) > COND_LIMIT:
        raise np.linalg.LinAlgError("pilot Hessian is singular; A-optimal weights undefined")
    return np.linalg.inv(H)


def raw_weights(rule: InclusionRule, loss: LossSpec, pilot: PilotFit, X, y, T=None, H_inv=None,
                dphi=None) -> np.ndarray:
    """Untruncated sampling weights ``|phi'(y x'theta)| h(x)`` for a block.

    ``T`` (linear scores) and ``dphi`` (loss derivative at the margins) may be
    passed in when the caller already has them.
    """
    if rule.kind is RuleKind.UNIFORM:
        return np.ones(len(y))
    if dphi is None:
        T = X @ pilot.theta if T is None else T
        dphi = loss.dphi(y * T)
    g = np.abs(dphi)
    if rule.kind is RuleKind.LOPT:
        return g * np.sqrt(np.einsum("ij,ij->i", X, X))
    H_inv = _inverse_hessian(pilot) if H_inv is None else H_inv
    return g * np.linalg.norm(X @ H_inv.T, axis=1)


def block_weights(rule, loss, pilot, X, y, T=None, H_inv=None, dphi=None) -> np.ndarray:
    w = raw_weights(rule, loss, pilot, X, y, T, H_inv, dphi)
    if rule.truncation_M is not None:
        w = np.minimum(w, rule.truncation_M)
    return w


def sampling_weight(rule: InclusionRule, loss: LossSpec, pilot: PilotFit, p: LabeledPoint) -> float:
    return float(block_weights(rule, loss, pilot, p.x[None, :], np.array([float(p.y)]))[0])


def truncation_level(rule: InclusionRule, loss: LossSpec, pilot: PilotFit, q: float = 0.95) -> float:
    """Empirical ``q`` quantile of the pilot's sampling-region weights."""
    in_s = region_codes(pilot.theta, rule.threshold_C, pilot.X, pilot.y) == 0
    if not in_s.any():
        raise ValueError("no pilot point falls in the sampling region")
    w = raw_weights(rule, loss, pilot, pilot.X[in_s], pilot.y[in_s])
    return float(np.quantile(w, q))


def estimate_normalizer(pilot: PilotFit, rule: InclusionRule, loss: LossSpec, n: int) -> float:
    """Pilot estimate of the sampling-region weight total over ``n`` points.

    The exact total needs a full pass before sampling; scaling the pilot
    mean of ``w * 1(S)`` by ``n`` keeps the scan to one pass.
    """
    in_s = region_codes(pilot.theta, rule.threshold_C, pilot.X, pilot.y) == 0
    if not in_s.any():
        raise ValueError("no pilot point falls in the sampling region; increase C or the pilot size")
    w = block_weights(rule, loss, pilot, pilot.X[in_s], pilot.y[in_s])
    total = n * w.sum() / pilot.r0
    if not total > 0:
        raise ValueError("pilot sampling weights are all zero; increase C or the pilot size")
    return float(total)


def inclusion_probability(rule: InclusionRule, weight, normalizer: float):
    if not normalizer > 0:
        raise ValueError("normalizer must be positive")
    return np.minimum(rule.budget_r * np.asarray(weight, dtype=float) / normalizer, 1.0)


@dataclass(frozen=True)
class ScanSummary:
    xbar_plus: np.ndarray
    n_plus: int
    xbar_minus: np.ndarray
    n_minus: int
    gbar: np.ndarray | None
    n_s: int
    n_total: int
    X_sub: np.ndarray
    y_sub: np.ndarray
    pi_sub: np.ndarray
    pi_sum: float
    weight_sum: float
    normalizer: float
    threshold_C: float
    rule: InclusionRule = field(repr=False)

    @property
    def realized_r(self) -> int:
        return self.y_sub.size

    @property
    def subsample(self) -> list[tuple[LabeledPoint, float]]:
        return [(LabeledPoint(x, int(y)), float(p)) for x, y, p in zip(self.X_sub, self.y_sub, self.pi_sub)]


def _blocks(source):
    return source.blocks() if hasattr(source, "blocks") else iter(source)


def _merge_mean(mean, count, block_sum, block_count):
    if block_count == 0:
        return mean
    return mean + (block_sum - block_count * mean) / (count + block_count)


def scan(stream, pilot: PilotFit, rule: InclusionRule, loss: LossSpec, g_map=None,
         rng: np.random.Generator | None = None, *, n: int | None = None,
         normalizer: float | None = None) -> ScanSummary:
    """One pass over ``stream``: partition, summarize, and Poisson-sample.

    ``stream`` is a :class:`~mross.data.DatasetStream` or any iterable of
    ``(X, y)`` blocks.  ``g_map`` maps a block of sampling-region points to
    their projection features (an object with a ``sum_rows`` method is
    summed without materializing them); ``None`` skips the g-mean.  Every
    point of a block consumes one uniform draw, kept or not.  The
    normalizer defaults to the pilot estimate over ``n`` points, where ``n``
    falls back to ``stream.n_hint``.  Only selected points are stored.
    """
    if rng is None:
        raise ValueError("scan needs an explicit random generator")
    d = pilot.d
    theta = pilot.theta
    C = rule.threshold_C
    if normalizer is None:
        n = n if n is not None else getattr(stream, "n_hint", None)
        if n is None:
            raise ValueError("pass n (or a stream with n_hint) to estimate the normalizer")
        normalizer = estimate_normalizer(pilot, rule, loss, n)
    H_inv = _inverse_hessian(pilot) if rule.kind is RuleKind.AOPT else None
    scale = rule.budget_r / normalizer
    fused = g_map is not None and hasattr(g_map, "row_coef")
    finite_C = not math.isinf(C)

    xbar_p = np.zeros(d)
    xbar_m = np.zeros(d)
    gbar = None
    n_p = n_m = n_s = n_tot = 0
    pi_sum = w_sum = 0.0
    xs, ys, ps = [], [], []

    for X, y in _blocks(stream):
        if X.shape[1] != d:
            raise ValueError(f"stream dimension {X.shape[1]} differs from pilot dimension {d}")
        m = X.shape[0]
        T = X @ theta
        margin = y * T
        dp = loss.dphi(margin)
        if finite_C:
            # y*T > C is exactly "plus or minus"; the label decides which
            extreme = margin > C
            plus = extreme & (y > 0)
            minus = extreme & ~plus
            s_mask = ~extreme
            bp, bm = int(plus.sum()), int(minus.sum())
            bs = m - bp - bm
        else:
            s_mask = None
            bp = bm = 0
            bs = m
        g_sum = sums = None
        if fused and bs:
            coef = dp * y
            if s_mask is None:
                sums = None
                g_last = X.T @ coef
                ysum = y.sum()
            else:
                # one product gives both centroid sums and the g-sum of region S;
                # the zero fourth column puts OpenBLAS on its faster even-width kernel
                cols = np.zeros((m, 4))
                cols[:, 0] = plus
                cols[:, 1] = minus
                np.multiply(coef, s_mask, out=cols[:, 2])
                sums = X.T @ cols
                g_last = sums[:, 2]
                ysum = y.sum() - bp + bm  # plus points have y = 1, minus y = -1
            g_sum = np.concatenate([[bs, ysum], g_last])
        else:
            if bp or bm:
                sums = X.T @ np.column_stack([plus, minus]).astype(float)
            if g_map is not None and bs:
                full = np.ones(m, dtype=bool) if s_mask is None else s_mask
                if hasattr(g_map, "sum_rows"):
                    g_sum = g_map.sum_rows(X, y, full, T)
                else:
                    g_sum = np.asarray(g_map(X[full], y[full])).sum(axis=0)
        if bp or bm:
            xbar_p = _merge_mean(xbar_p, n_p, sums[:, 0], bp)
            xbar_m = _merge_mean(xbar_m, n_m, sums[:, 1], bm)
        if g_sum is not None:
            gbar = _merge_mean(np.zeros_like(g_sum) if gbar is None else gbar, n_s, g_sum, bs)
        n_p += bp
        n_m += bm
        n_tot += m

        if bs:
            # weights and uniforms for the whole block; zero weight outside
            # region S means those points can never be selected
            w = block_weights(rule, loss, pilot, X, y, T, H_inv, dp)
            if bs < m:
                w *= s_mask
            pi = np.minimum(scale * w, 1.0)
            sel = rng.random(m) < pi
            pi_sum += pi.sum()
            w_sum += w.sum()
            if sel.any():
                xs.append(X[sel])
                ys.append(y[sel])
                ps.append(pi[sel])
        n_s += bs

    if xs:
        X_sub, y_sub, pi_sub = np.concatenate(xs), np.concatenate(ys), np.concatenate(ps)
    else:
        X_sub, y_sub, pi_sub = np.empty((0, d)), np.empty(0), np.empty(0)
    return ScanSummary(xbar_p, n_p, xbar_m, n_m, gbar, n_s, n_tot, X_sub, y_sub, pi_sub,
                       float(pi_sum), float(w_sum), float(normalizer), float(C), rule)


# Binary spill: one row per selected point, d + 2 little-endian float64
# values (x_1..x_d, y, pi).


def write_spill(path, summary: ScanSummary) -> None:
    rows = np.column_stack([summary.X_sub, summary.y_sub, summary.pi_sub])
    rows.astype("<f8").tofile(path)


def read_spill(path, d: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    flat = np.fromfile(path, dtype="<f8")
    if flat.size % (d + 2):
        raise ValueError(f"{path}: size is not a multiple of d + 2 = {d + 2} values")
    rows = flat.reshape(-1, d + 2)
    return rows[:, :d].copy(), rows[:, d].copy(), rows[:, d + 1].copy()
