"""Simulation harness: MSE curves, interval coverage and timing tables as CSV.

Output schemas (header row always present):

* ``mse``:      ``method,r,mse,sd,n_ok,n_failed``
* ``coverage``: ``method,r,coord,cp,mean_length,n_ok,n_failed``
* ``timing``:   ``method,r,mean_s,sd_s,repeats``

Config files are flat ``key = value`` text; lists are comma separated
(``r_list = 2000,3000,4000,5000``) and ``#`` starts a comment.
"""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .baselines import Method, osmac_fit, unif_fit
from .data import CaseSpec, derive_seed, from_arrays, gen_case, reference_theta, split_head, substream, true_theta
from .estimator import CLASSIC_THRESHOLDS, eta_threshold, fit_mross, rate_threshold
from .losses import LossKind, LossSpec
from .solver import fit_pilot

MSE_HEADER = ("method", "r", "mse", "sd", "n_ok", "n_failed")
COVERAGE_HEADER = ("method", "r", "coord", "cp", "mean_length", "n_ok", "n_failed")
TIMING_HEADER = ("method", "r", "mean_s", "sd_s", "repeats")

PROFILES = {
    "desk": dict(n=50_000, r0=500, S=200),
    "paper": dict(n=500_000, r0=1000, S=500),
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    case_id: int = 1
    n: int = 50_000
    d: int = 21
    r0: int = 500
    r_list: tuple = (2000, 3000, 4000, 5000)
    S: int = 200
    loss: str = "logistic"
    gamma: float = 0.5
    threshold: str = "eta"  # eta | fixed | classic | rate
    C: float | None = None
    eta: float = 0.99
    methods: tuple = ("unif", "osmac", "mross")
    seed: int = 0
    out: str | None = None
    workers: int = 1
    level: float = 0.95
    coords: tuple = (0, 1)
    timing_repeats: int = 100
    finite_population: bool = True
    reference_scale: int = 10

    def __post_init__(self):
        if self.S < 0:
            raise ConfigError("S must be non-negative")
        if not self.r_list:
            raise ConfigError("r_list must not be empty")
        if self.r0 < 10 * self.d:
            raise ConfigError(f"r0={self.r0} is below 10*d={10 * self.d}")
        if self.r0 + max(self.r_list) >= self.n:
            raise ConfigError("r0 + max(r_list) must be below n")
        bad = set(self.methods) - {m.value for m in Method}
        if bad or not self.methods:
            raise ConfigError(f"unknown methods {sorted(bad)}; choose from unif, osmac, mross")
        if self.threshold not in ("eta", "fixed", "classic", "rate"):
            raise ConfigError(f"unknown threshold policy {self.threshold!r}")
        if self.threshold == "fixed" and not (self.C is not None and self.C > 0):
            raise ConfigError("threshold = fixed needs a positive C")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if any(not 0 <= j < self.d for j in self.coords):
            raise ConfigError("coords out of range")
        try:
            self.loss_spec()
            CaseSpec(self.case_id, self.n, self.d, self.seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def loss_spec(self) -> LossSpec:
        return LossSpec(self.loss, self.gamma)

    def threshold_value(self) -> float:
        loss = self.loss_spec()
        if self.threshold == "fixed":
            return float(self.C)
        if self.threshold == "classic":
            if loss.kind not in CLASSIC_THRESHOLDS:
                raise ConfigError(f"no classic fixed threshold for {loss}")
            return CLASSIC_THRESHOLDS[loss.kind]
        if self.threshold == "rate":
            return rate_threshold(loss, self.r0)
        return eta_threshold(loss, self.eta)


_LIST_KEYS = {"r_list": int, "methods": str, "coords": int}


def _convert(key: str, raw: str):
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    if key in _LIST_KEYS:
        conv = _LIST_KEYS[key]
        return tuple(conv(v.strip()) for v in raw.split(",") if v.strip())
    if key in ("C",):
        return None if raw.lower() in ("", "none") else float(raw)
    if key == "out":
        return raw or None
    if key == "finite_population":
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    default = getattr(ExperimentConfig, key)
    if isinstance(default, bool):
        return raw.lower() in ("true", "1", "yes")
    if isinstance(default, int):
        return int(float(raw)) if float(raw).is_integer() else int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        try:
            out[key] = _convert(key, raw)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    return out


def load_config(path=None, profile: str = "desk", **overrides) -> ExperimentConfig:
    """Profile defaults, then the config file, then explicit overrides."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    values = dict(PROFILES[profile])
    if path is not None:
        values.update(parse_config(Path(path).read_text(encoding="utf-8")))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**values)


# ---------------------------------------------------------------------------
# Replications
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ResultRow:
    method: str
    r: int
    replicate: int
    status: str = "ok"
    mse_contrib: float = math.nan
    wall_time_s: float = math.nan
    realized_r: int = 0
    covers: tuple = field(default=())
    lengths: tuple = field(default=())


def replicate_data(config: ExperimentConfig, rep: int):
    spec = CaseSpec(config.case_id, config.n, config.d, derive_seed(config.seed, "data", rep))
    return from_arrays(*gen_case(spec).to_arrays())


def fit_method(method: str, stream, config: ExperimentConfig, r: int, rng, variance: bool = True):
    """Fit one method end to end; returns (theta, intervals or None, realized_r, converged)."""
    loss = config.loss_spec()
    kw = dict(variance=variance, level=config.level, finite_population=config.finite_population)
    if method == Method.UNIF.value:
        est = unif_fit(stream, config.r0 + r, loss, rng, **kw)
        return est.theta, est.intervals, est.realized_r, est.report.converged
    if method == Method.OSMAC.value:
        Xp, yp, rest = split_head(stream.blocks(), config.r0)
        pilot = fit_pilot(loss, Xp, yp)
        est = osmac_fit(rest, pilot, r, loss, rng, n=stream.n_hint - config.r0, **kw)
        return est.theta, est.intervals, est.realized_r, est.report.converged
    est = fit_mross(stream, loss, config.r0, r, rng, threshold=config.threshold_value(), **kw)
    return est.theta, est.intervals, est.diagnostics["realized_r"], est.report.converged


def run_replicate(config: ExperimentConfig, theta_t, rep: int, variance: bool) -> list[ResultRow]:
    """All (method, r) cells of one replicate on one shared dataset."""
    stream = replicate_data(config, rep)
    rows = []
    for r in config.r_list:
        for method in config.methods:
            rng = substream(config.seed, "sample", method, r, rep)
            t0 = time.perf_counter()
            try:
                theta, ints, rr, ok = fit_method(method, stream, config, r, rng, variance)
            except Exception as exc:  # recorded, not raised
                rows.append(ResultRow(method, r, rep, f"error: {type(exc).__name__}: {exc}"))
                continue
            elapsed = time.perf_counter() - t0
            covers, lengths = (), ()
            if ints is not None:
                lo, hi = ints[list(config.coords)].T
                tt = theta_t[list(config.coords)]
                covers = tuple(bool(v) for v in (lo <= tt) & (tt <= hi))
                lengths = tuple(float(v) for v in hi - lo)
            rows.append(ResultRow(method, r, rep, "ok" if ok else "not_converged",
                                  float(np.sum((theta - theta_t) ** 2)), elapsed, rr, covers, lengths))
    return rows


def _worker(args):
    config, theta_t, rep, variance = args
    return run_replicate(config, theta_t, rep, variance)


def run_replicates(config: ExperimentConfig, theta_t, variance: bool = False) -> list[ResultRow]:
    jobs = [(config, theta_t, rep, variance) for rep in range(config.S)]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            chunks = list(pool.map(_worker, jobs))
    else:
        chunks = [_worker(j) for j in jobs]
    rows = [row for chunk in chunks for row in chunk]
    return sorted(rows, key=lambda row: (row.method, row.r, row.replicate))


def reference_parameter(config: ExperimentConfig, cache_dir=None) -> np.ndarray:
    """Target parameter for MSE and coverage.

    The well-specified logistic cases use their generating parameter.
    Otherwise a large independent fit is used and cached as JSON.
    """
    loss = config.loss_spec()
    truth = true_theta(config.case_id, config.d)
    if truth is not None and loss.kind is LossKind.LOGISTIC:
        return truth
    key = f"case{config.case_id}_d{config.d}_seed{config.seed}_{loss}_n{config.n}_x{config.reference_scale}"
    cache = None
    if cache_dir is not None:
        cache = Path(cache_dir) / "reference_theta.json"
        if cache.exists():
            stored = json.loads(cache.read_text(encoding="utf-8"))
            if key in stored:
                return np.array(stored[key])
    theta = reference_theta(CaseSpec(config.case_id, config.n, config.d, config.seed), loss,
                            scale=config.reference_scale)
    if cache is not None:
        stored = json.loads(cache.read_text(encoding="utf-8")) if cache.exists() else {}
        stored[key] = [float(v) for v in theta]
        cache.write_text(json.dumps(stored, indent=1, sort_keys=True), encoding="utf-8")
    return theta


def _fmt(v) -> str:
    if isinstance(v, float):  # includes np.float64, whose repr is not a bare number
        return repr(float(v)) if math.isfinite(v) else "nan"
    return str(v)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(row[h]) for h in header])


def _cells(config, rows):
    for method in config.methods:
        for r in config.r_list:
            yield method, r, [row for row in rows if row.method == method and row.r == r]


def _cache_dir(config):
    return Path(config.out).parent if config.out else None


def aggregate_mse(config: ExperimentConfig, rows) -> list[dict]:
    table = []
    for method, r, cell in _cells(config, rows):
        ok = np.array([row.mse_contrib for row in cell if row.status == "ok"])
        table.append(dict(method=method, r=r,
                          mse=float(ok.mean()) if ok.size else math.nan,
                          sd=float(ok.std(ddof=1)) if ok.size > 1 else math.nan,
                          n_ok=int(ok.size), n_failed=len(cell) - int(ok.size)))
    return table


def aggregate_coverage(config: ExperimentConfig, rows) -> list[dict]:
    table = []
    for method, r, cell in _cells(config, rows):
        ok = [row for row in cell if row.status == "ok" and row.covers]
        for k, j in enumerate(config.coords):
            cov = np.array([row.covers[k] for row in ok], dtype=float)
            ln = np.array([row.lengths[k] for row in ok])
            table.append(dict(method=method, r=r, coord=j,
                              cp=float(cov.mean()) if ok else math.nan,
                              mean_length=float(ln.mean()) if ok else math.nan,
                              n_ok=len(ok), n_failed=len(cell) - len(ok)))
    return table


def run_mse(config: ExperimentConfig) -> list[dict]:
    theta_t = reference_parameter(config, _cache_dir(config))
    table = aggregate_mse(config, run_replicates(config, theta_t, variance=False))
    if config.out:
        write_csv(config.out, MSE_HEADER, table)
    return table


def run_coverage(config: ExperimentConfig, level: float | None = None, coords=None) -> list[dict]:
    config = replace(config, level=level if level is not None else config.level,
                     coords=tuple(coords) if coords is not None else config.coords)
    theta_t = reference_parameter(config, _cache_dir(config))
    table = aggregate_coverage(config, run_replicates(config, theta_t, variance=True))
    if config.out:
        write_csv(config.out, COVERAGE_HEADER, table)
    return table


def run_timing(config: ExperimentConfig, repeats: int | None = None) -> list[dict]:
    """Wall-clock seconds per end-to-end fit (pilot, scan and solve).

    Data generation is excluded.  Runs serially whatever ``workers`` says,
    and alternates methods inside each repeat so drift hits all alike.
    """
    repeats = config.timing_repeats if repeats is None else repeats
    if config.S == 0 or repeats == 0:
        if config.out:
            write_csv(config.out, TIMING_HEADER, [])
        return []
    times = {(m, r): [] for m in config.methods for r in config.r_list}
    for k in range(repeats):
        stream = replicate_data(config, k)
        for r in config.r_list:
            for method in config.methods:
                rng = substream(config.seed, "timing", method, r, k)
                t0 = time.perf_counter()
                fit_method(method, stream, config, r, rng, variance=False)
                times[method, r].append(time.perf_counter() - t0)
    table = []
    for (method, r), ts in times.items():
        ts = np.array(ts)
        table.append(dict(method=method, r=r, mean_s=float(ts.mean()),
                          sd_s=float(ts.std(ddof=1)) if ts.size > 1 else 0.0, repeats=int(ts.size)))
    if config.out:
        write_csv(config.out, TIMING_HEADER, table)
    return table


def summary_rows(rows) -> list[dict]:
    """Flatten replicate rows for ad hoc inspection."""
    return [asdict(row) for row in rows]
