"""Synthetic simulation cases, CSV ingestion and re-playable data streams.

A :class:`DatasetStream` yields ``(X, y)`` blocks: ``X`` is ``(m, d)`` with
a leading column of ones and ``y`` holds labels in {-1, +1}.  Every call to
:meth:`DatasetStream.blocks` restarts the producer, so a stream can be
traversed any number of times and always replays the same sequence.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator

import numpy as np
from scipy.special import expit

from .losses import LabeledPoint, LossSpec

BLOCK_SIZE = 8192

Block = tuple[np.ndarray, np.ndarray]


def _role_key(role) -> int:
    digest = hashlib.blake2b(str(role).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def substream(seed: int, *roles) -> np.random.Generator:
    """Philox generator for the substream named by ``(seed, *roles)``."""
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=[_role_key(r) for r in roles])
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *roles) -> int:
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=[_role_key(r) for r in roles])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


class DatasetStream:
    """Re-playable sequential producer of labeled points in blocks."""

    def __init__(self, d: int, n_hint: int | None, make_blocks: Callable[[], Iterator[Block]]):
        self.d = int(d)
        self.n_hint = n_hint
        self._make_blocks = make_blocks

    def blocks(self) -> Iterator[Block]:
        for X, y in self._make_blocks():
            if X.shape[1] != self.d:
                raise ValueError(f"block has {X.shape[1]} columns, stream declares d={self.d}")
            yield X, y

    def __iter__(self) -> Iterator[LabeledPoint]:
        for X, y in self.blocks():
            for xi, yi in zip(X, y):
                yield LabeledPoint(xi, int(yi))

    def materialize(self) -> "DatasetStream":
        X, y = self.to_arrays()
        return from_arrays(X, y)

    def to_arrays(self) -> Block:
        parts = list(self.blocks())
        if not parts:
            return np.empty((0, self.d)), np.empty(0)
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def from_arrays(X, y, block_size: int = BLOCK_SIZE) -> DatasetStream:
    X = np.ascontiguousarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ValueError("X must be (n, d) and y must be (n,)")
    if X.shape[0] and not np.all(X[:, 0] == 1.0):
        raise ValueError("first column of X must be the intercept 1")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise ValueError("labels must be -1 or +1")

    def make():
        for start in range(0, X.shape[0], block_size):
            yield X[start:start + block_size], y[start:start + block_size]

    return DatasetStream(X.shape[1], X.shape[0], make)


def split_head(blocks: Iterable[Block], k: int) -> tuple[np.ndarray, np.ndarray, Iterator[Block]]:
    """Take the first ``k`` points off a block iterator.

    Returns the head as arrays plus an iterator over everything after it,
    so a pilot sample and the scan share a single traversal.
    """
    it = iter(blocks)
    xs, ys, got = [], [], 0
    leftover = None
    for X, y in it:
        need = k - got
        if X.shape[0] <= need:
            xs.append(X)
            ys.append(y)
            got += X.shape[0]
        else:
            xs.append(X[:need])
            ys.append(y[:need])
            got = k
            leftover = (X[need:], y[need:])
        if got == k:
            break
    if got < k:
        raise ValueError(f"stream holds only {got} points, {k} requested")
    d = xs[0].shape[1] if xs else 0

    def rest():
        if leftover is not None:
            yield leftover
        yield from it

    Xh = np.concatenate(xs) if xs else np.empty((0, d))
    yh = np.concatenate(ys) if ys else np.empty(0)
    return Xh, yh, rest()


# ---------------------------------------------------------------------------
# Simulation cases
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CaseSpec:
    case_id: int
    n: int
    d: int = 21
    seed: int = 0

    def __post_init__(self):
        if self.case_id not in range(1, 7):
            raise ValueError(f"unknown case_id {self.case_id!r}; expected 1..6")
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if self.d < 2:
            raise ValueError("d must be at least 2 (intercept plus one feature)")
        if self.case_id in (5, 6):
            _check_block_case(self.case_id, self.d - 1)


def ar_cov(p: int, rho: float = 0.5) -> np.ndarray:
    idx = np.arange(p)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def equicorr_cov(p: int, rho: float = 0.5) -> np.ndarray:
    return np.where(np.eye(p, dtype=bool), 1.0, rho)


def true_theta(case_id: int, d: int) -> np.ndarray | None:
    """Data-generating parameter for the well-specified logistic cases."""
    if case_id in (1, 2, 3):
        return np.concatenate([[0.0], np.full(d - 1, 0.5)])
    return None


def _cholesky(sigma) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1] or not np.allclose(sigma, sigma.T):
        raise ValueError("sigma must be a symmetric square matrix")
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        raise ValueError("sigma is not positive definite") from None


def _mvt_rows(rng: np.random.Generator, m: int, df: float, mu, chol) -> np.ndarray:
    z = rng.standard_normal((m, chol.shape[0])) @ chol.T
    if math.isinf(df):
        return z + mu
    w = rng.chisquare(df, size=m)
    return mu + z * np.sqrt(df / w)[:, None]


def sample_mvt(df: float, mu, sigma, rng: np.random.Generator) -> np.ndarray:
    """One draw from the multivariate t distribution ``t_df(mu, sigma)``.

    ``df = inf`` gives the Gaussian ``N(mu, sigma)``.
    """
    if not df > 0:
        raise ValueError("df must be positive")
    mu = np.asarray(mu, dtype=float)
    chol = _cholesky(sigma)
    if mu.shape != (chol.shape[0],):
        raise ValueError("mu and sigma dimensions differ")
    return _mvt_rows(rng, 1, df, mu, chol)[0]


def _balanced_labels(rng, m):
    y = np.ones(m)
    y[m // 2:] = -1.0
    if m % 2:
        y[-1] = rng.choice((-1.0, 1.0))
    return rng.permutation(y)


BLOCK_CASE_FEATURES = 20


def _check_block_case(case_id: int, p: int):
    # the mixture means of cases 5 and 6 are given in 10-length blocks, so
    # they are only defined for 20 features (d = 21)
    if p != BLOCK_CASE_FEATURES:
        raise ValueError(f"case {case_id} is defined for d = {BLOCK_CASE_FEATURES + 1} only, got d = {p + 1}")


def _case5_means(p: int):
    _check_block_case(5, p)
    h = p // 2
    z, o = np.zeros(h), np.ones(h)
    plus = [np.r_[z, o], np.r_[-o, 2 * o], -np.r_[o, o]]
    minus = [np.r_[z, -o], np.r_[o, -2 * o], np.r_[o, 2 * o]]
    return plus, minus


def _case_sampler(case_id: int, p: int) -> Callable[[np.random.Generator, int], Block]:
    L1 = _cholesky(ar_cov(p))
    L2 = _cholesky(equicorr_cov(p))
    theta = true_theta(1, p + 1)

    def with_intercept(Z):
        return np.hstack([np.ones((Z.shape[0], 1)), Z])

    def logistic_labels(rng, X):
        return np.where(rng.random(X.shape[0]) < expit(X @ theta), 1.0, -1.0)

    if case_id == 1:
        def draw(rng, m):
            X = with_intercept(rng.standard_normal((m, p)) @ L1.T)
            return X, logistic_labels(rng, X)
    elif case_id == 2:
        def draw(rng, m):
            E = rng.standard_normal((m, p))
            first = rng.random(m) < 0.5
            Z = np.where(first[:, None], E @ L1.T, E @ L2.T)
            X = with_intercept(Z)
            return X, logistic_labels(rng, X)
    elif case_id == 3:
        def draw(rng, m):
            X = with_intercept(_mvt_rows(rng, m, 3.0, 0.0, L1))
            return X, logistic_labels(rng, X)
    elif case_id == 4:
        def draw(rng, m):
            y = _balanced_labels(rng, m)
            E = rng.standard_normal((m, p))
            Z = np.where((y > 0)[:, None], 0.5 + E @ L1.T, -0.5 + E @ L2.T)
            return with_intercept(Z), y
    elif case_id == 5:
        mu_plus, mu_minus = _case5_means(p)

        def draw(rng, m):
            y = _balanced_labels(rng, m)
            comp = rng.choice(3, size=m, p=(0.5, 0.25, 0.25))
            means = np.where((y > 0)[:, None], np.asarray(mu_plus)[comp], np.asarray(mu_minus)[comp])
            Z = means + rng.standard_normal((m, p)) @ L1.T
            return with_intercept(Z), y
    else:
        _check_block_case(6, p)
        h = p // 2
        mu1 = np.r_[np.zeros(h), np.ones(h)]
        mu2 = np.r_[np.zeros(h), -np.ones(h)]

        def draw(rng, m):
            y = np.where(rng.random(m) < 0.8, 1.0, -1.0)
            Z = _mvt_rows(rng, m, 3.0, 0.0, L1) + np.where((y > 0)[:, None], mu1, mu2)
            return with_intercept(Z), y

    return draw


def gen_case(spec: CaseSpec, role: str = "data", block_size: int = BLOCK_SIZE) -> DatasetStream:
    """Stream of ``spec.n`` points from simulation case ``spec.case_id``.

    ``role`` names an independent substream of ``spec.seed``; the reference
    fit uses its own role so it never shares draws with the data it judges.
    """
    draw = _case_sampler(spec.case_id, spec.d - 1)

    def make():
        rng = substream(spec.seed, "case", spec.case_id, spec.d, role)
        left = spec.n
        while left > 0:
            m = min(block_size, left)
            yield draw(rng, m)
            left -= m

    return DatasetStream(spec.d, spec.n, make)


IN_MEMORY_LIMIT = 512 * 2**20


def reference_theta(spec: CaseSpec, loss: LossSpec, scale: int = 10, **solver_kw) -> np.ndarray:
    """Empirical M-estimate on a fresh dataset ``scale`` times larger.

    Stands in for the risk minimizer when it has no closed form.
    """
    from .solver import NonConvergence, fit_stream

    big = CaseSpec(spec.case_id, scale * spec.n, spec.d, spec.seed)
    stream = gen_case(big, role="reference")
    if big.n * big.d * 8 <= IN_MEMORY_LIMIT:
        stream = stream.materialize()
    report = fit_stream(loss, stream, **solver_kw)
    if not report.converged:
        raise NonConvergence(f"reference fit did not converge: {report}")
    return report.theta


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


def _parse_csv(path, label_column: int, header: bool | None):
    """Validate the whole file once; returns (header line or 0, row width, n)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        skip = 0
        width = None
        labels = set()
        n = 0
        for lineno, row in enumerate(reader, start=1):
            if not row or all(not f.strip() for f in row):
                continue
            if n == 0 and skip == 0:
                # a header has some non-empty field that is not a number
                textual = False
                for f in row:
                    try:
                        float(f)
                    except ValueError:
                        textual = textual or bool(f.strip())
                if header or (header is None and textual):
                    skip = lineno
                    continue
            if width is None:
                width = len(row)
                if not 0 <= label_column < width:
                    raise ValueError(f"line {lineno}: label column {label_column} out of range")
            if len(row) != width or any(not f.strip() for f in row):
                raise ValueError(f"line {lineno}: expected {width} non-empty fields, got {row!r}")
            try:
                vals = [float(f) for f in row]
            except ValueError as exc:
                raise ValueError(f"line {lineno}: {exc}") from None
            if not all(math.isfinite(v) for v in vals):
                raise ValueError(f"line {lineno}: non-finite value")
            lab = vals[label_column]
            if lab not in (-1.0, 0.0, 1.0):
                raise ValueError(f"line {lineno}: label {lab!r} is not binary")
            labels.add(lab)
            n += 1
    if n == 0:
        raise ValueError(f"{path}: no data rows")
    if {-1.0, 0.0} <= labels:
        raise ValueError(f"{path}: labels mix -1 and 0; use either {{-1,+1}} or {{0,1}}")
    return skip, width, n


def read_csv(path, label_column: int = 0, add_intercept: bool = True,
             header: bool | None = None, block_size: int = BLOCK_SIZE) -> DatasetStream:
    """Stream labeled points from a numeric CSV file.

    Labels may be coded {-1, +1} or {0, 1}; 0 maps to -1.  ``header=None``
    detects a non-numeric first row.  The file is validated up front, so
    malformed rows raise here with their line number.
    """
    skip, width, n = _parse_csv(path, label_column, header)
    d = width - 1 + int(add_intercept)

    def make():
        with open(path, newline="", encoding="utf-8") as fh:
            rows = []
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if lineno == skip or not row or all(not f.strip() for f in row):
                    continue
                rows.append([float(f) for f in row])
                if len(rows) == block_size:
                    yield _rows_to_block(rows, label_column, add_intercept)
                    rows = []
            if rows:
                yield _rows_to_block(rows, label_column, add_intercept)

    stream = DatasetStream(d, n, make)
    if not add_intercept:
        X, _ = next(stream.blocks())
        if not np.all(X[:, 0] == 1.0):
            raise ValueError("add_intercept=False but the first feature column is not all ones")
    return stream


def _rows_to_block(rows, label_column, add_intercept):
    a = np.asarray(rows, dtype=float)
    y = a[:, label_column]
    y = np.where(y == 0.0, -1.0, y)
    X = np.delete(a, label_column, axis=1)
    if add_intercept:
        X = np.hstack([np.ones((X.shape[0], 1)), X])
    return X, y
