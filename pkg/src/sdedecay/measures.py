"""Empirical measures, distances between them and law-level checks.

Distances
---------
* :func:`wasserstein_1d`: exact in one dimension through quantile functions.
* :func:`wasserstein_assignment`: exact optimal assignment for ``n <= 512``.
* :func:`wasserstein_sliced`: average over random directions of 1-d costs.
* :func:`weighted_tv_1d`: histogram surrogate of ``int (1 + W) d|a - b|``.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .errors import CapabilityError
from .lyapunov import DEFAULT_X_RANGE, check_drift_condition
from .models import CoefficientSet, limiting_model
from .sensitivity import fit_decay_rate
from .simulate import (
    TimeGrid, init_rng, run_states, simulate_paths, simulate_two_leg, steps_between,
)
from .stats import batch_means_stderr, ks_2samp_stat, ks_threshold, mean_stderr, tree_mean
from .tables import CheckTable, format_cell, jsonable

__all__ = [
    "EmpiricalMeasure",
    "InvariantEstimate",
    "WTVResult",
    "CKResult",
    "wasserstein_1d",
    "wasserstein_assignment",
    "wasserstein_sliced",
    "sliced_directions",
    "weighted_tv_1d",
    "estimate_invariant",
    "convergence_profile",
    "ck_consistency",
    "limiting_comparison",
    "ASSIGNMENT_MAX_N",
]

ASSIGNMENT_MAX_N = 512
_WEIGHT_TOL = 1e-12


# ---------------------------------------------------------------------------
# Empirical measures
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Weighted point cloud ``sum_i w_i delta_{x_i}`` in ``R^d``.

    ``weights=None`` means uniform weights ``1/n``.
    """

    samples: np.ndarray
    weights: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.array(self.samples, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if x.ndim != 2 or x.shape[0] == 0:
            raise ValueError("samples must be a non-empty (n, d) array")
        if not np.all(np.isfinite(x)):
            raise ValueError("samples must be finite")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)
        if self.weights is not None:
            w = np.array(self.weights, dtype=np.float64).reshape(-1)
            if w.shape[0] != x.shape[0]:
                raise ValueError("need one weight per sample")
            if np.any(w < 0) or not np.all(np.isfinite(w)):
                raise ValueError("weights must be finite and >= 0")
            if abs(w.sum() - 1.0) > _WEIGHT_TOL:
                raise ValueError(f"weights must sum to 1 within {_WEIGHT_TOL}, got {w.sum()!r}")
            w.setflags(write=False)
            object.__setattr__(self, "weights", w)
        object.__setattr__(self, "meta", dict(self.meta))

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    @property
    def uniform(self) -> bool:
        return self.weights is None

    def probabilities(self) -> np.ndarray:
        return np.full(self.n, 1.0 / self.n) if self.weights is None else self.weights

    def mean(self) -> np.ndarray:
        if self.weights is None:
            return np.array([tree_mean(c) for c in self.samples.T])
        return self.weights @ self.samples

    def cov(self) -> np.ndarray:
        p = self.probabilities()
        c = self.samples - self.mean()
        return (c * p[:, None]).T @ c

    def marginal(self, i: int) -> "EmpiricalMeasure":
        return EmpiricalMeasure(self.samples[:, i:i + 1], self.weights, {**self.meta, "coordinate": i})

    def to_csv(self, path) -> tuple[Path, Path]:
        """Write samples to ``path`` and weights/meta to ``path`` with a ``.json`` suffix."""
        path = Path(path)
        path.write_text(self.csv_text(), newline="")
        side = path.with_suffix(".json")
        doc = {"n": self.n, "dim": self.dim, "meta": jsonable(self.meta),
               "weights": None if self.weights is None else self.weights.tolist()}
        side.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return path, side

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(self.dim)])
        for row in self.samples:
            w.writerow([format_cell(v) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, path) -> "EmpiricalMeasure":
        path = Path(path)
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
        samples = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64)
        side = path.with_suffix(".json")
        meta, weights = {}, None
        if side.exists():
            doc = json.loads(side.read_text())
            meta, weights = doc.get("meta", {}), doc.get("weights")
        return cls(samples.reshape(-1, len(rows[0])), weights, meta)


def _as_measure(a) -> EmpiricalMeasure:
    return a if isinstance(a, EmpiricalMeasure) else EmpiricalMeasure(a)


# ---------------------------------------------------------------------------
# Wasserstein distances
# ---------------------------------------------------------------------------
def _check_p(p: float) -> float:
    p = float(p)
    if not p >= 1 or not math.isfinite(p):
        raise ValueError("p must be a finite number >= 1")
    return p


def _w1d_pow(xa, pa, xb, pb, p: float) -> float:
    """``W_p^p`` between two weighted 1-d samples via their quantile functions."""
    if pa is None and pb is None and xa.size == xb.size:
        return tree_mean(np.abs(np.sort(xa) - np.sort(xb)) ** p)
    ia, ib = np.argsort(xa, kind="stable"), np.argsort(xb, kind="stable")
    xa, xb = xa[ia], xb[ib]
    pa = np.full(xa.size, 1.0 / xa.size) if pa is None else pa[ia]
    pb = np.full(xb.size, 1.0 / xb.size) if pb is None else pb[ib]
    ca, cb = np.cumsum(pa), np.cumsum(pb)
    ca[-1] = cb[-1] = 1.0
    breaks = np.unique(np.concatenate([ca, cb]))
    lengths = np.diff(np.concatenate([[0.0], breaks]))
    mid = breaks - 0.5 * lengths
    ja = np.minimum(np.searchsorted(ca, mid), xa.size - 1)
    jb = np.minimum(np.searchsorted(cb, mid), xb.size - 1)
    return float(np.sum(lengths * np.abs(xa[ja] - xb[jb]) ** p))


def wasserstein_1d(a, b, p: float = 1.0) -> float:
    """Exact ``W_p`` between 1-d empirical measures.

    Equal-size uniform samples use the sorted matching; other inputs use the
    exact transport between the two quantile functions.
    """
    a, b, p = _as_measure(a), _as_measure(b), _check_p(p)
    if a.dim != 1 or b.dim != 1:
        raise CapabilityError("wasserstein_1d needs d = 1; use wasserstein_assignment or wasserstein_sliced")
    cost = _w1d_pow(a.samples[:, 0], a.weights, b.samples[:, 0], b.weights, p)
    return float(cost ** (1.0 / p))


def wasserstein_assignment(a, b, p: float = 1.0) -> float:
    """Exact ``W_p`` for equal-size uniform samples by optimal assignment."""
    a, b, p = _as_measure(a), _as_measure(b), _check_p(p)
    if not (a.uniform and b.uniform):
        raise CapabilityError("wasserstein_assignment needs uniform weights")
    if a.n != b.n:
        raise CapabilityError("wasserstein_assignment needs equal sample counts")
    if a.dim != b.dim:
        raise ValueError("measures live in different dimensions")
    if a.n > ASSIGNMENT_MAX_N:
        raise CapabilityError(f"wasserstein_assignment is limited to n <= {ASSIGNMENT_MAX_N}; "
                              "use wasserstein_sliced for larger samples")
    cost = cdist(a.samples, b.samples) ** p
    rows, cols = linear_sum_assignment(cost)
    return float(tree_mean(cost[rows, cols]) ** (1.0 / p))


def sliced_directions(dim: int, n_projections: int, seed: int) -> np.ndarray:
    """Unit directions used by :func:`wasserstein_sliced`, shape ``(n_projections, dim)``."""
    rng = np.random.default_rng(seed)
    theta = rng.standard_normal((int(n_projections), int(dim)))
    return theta / np.sqrt(np.sum(theta * theta, axis=1, keepdims=True))


def wasserstein_sliced(a, b, p: float = 2.0, n_projections: int = 200, seed: int = 0) -> float:
    """``(mean_theta W_p^p(<a, theta>, <b, theta>))^{1/p}`` over random unit ``theta``."""
    a, b, p = _as_measure(a), _as_measure(b), _check_p(p)
    if a.dim != b.dim:
        raise ValueError("measures live in different dimensions")
    if a.dim < 2:
        raise CapabilityError("wasserstein_sliced is meant for d >= 2; use wasserstein_1d")
    theta = sliced_directions(a.dim, n_projections, seed)
    costs = np.array([_w1d_pow(a.samples @ th, a.weights, b.samples @ th, b.weights, p)
                      for th in theta])
    return float(tree_mean(costs) ** (1.0 / p))


# ---------------------------------------------------------------------------
# Weighted total variation
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class WTVResult:
    """Histogram estimate of ``int (1 + W) d|a - b|``.

    Mass outside ``range`` lands in two overflow cells weighted at the range
    edges, and ``overflow`` records that it happened.
    """

    value: float
    bin_width: float
    range: tuple[float, float]
    n_bins: int
    overflow: bool
    overflow_mass: tuple[float, float]

    def __float__(self):
        return self.value


def _default_range(a: EmpiricalMeasure, b: EmpiricalMeasure) -> tuple[float, float]:
    pooled = np.concatenate([a.samples[:, 0], b.samples[:, 0]])
    c = tree_mean(pooled)
    sd = float(np.sqrt(tree_mean((pooled - c) ** 2)))
    half = 6.0 * sd if sd > 0 else 1.0
    return c - half, c + half


def weighted_tv_1d(a, b, W=None, n_bins: int = 200, range=None) -> WTVResult:
    """``sum_bins (1 + W(center)) |a_hat - b_hat|`` on a common histogram.

    ``W`` is a Lyapunov function or any vectorized callable; ``None`` means
    ``W = 0`` (plain total variation, at most 2). The default range is the
    pooled mean plus or minus six pooled standard deviations.
    """
    a, b = _as_measure(a), _as_measure(b)
    if a.dim != 1 or b.dim != 1:
        raise CapabilityError("weighted_tv_1d needs d = 1")
    if int(n_bins) < 1:
        raise ValueError("n_bins must be >= 1")
    lo, hi = _default_range(a, b) if range is None else (float(range[0]), float(range[1]))
    if not hi > lo:
        raise ValueError("range must satisfy lo < hi")
    n_bins = int(n_bins)
    edges = np.linspace(lo, hi, n_bins + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    w = (lambda x: np.zeros(x.shape[0])) if W is None else getattr(W, "eval", W)
    weight = 1.0 + np.asarray(w(np.concatenate([[lo], centers, [hi]]).reshape(-1, 1)), dtype=np.float64)

    def cells(m: EmpiricalMeasure):
        x = m.samples[:, 0]
        pr = m.probabilities()
        idx = np.clip(np.searchsorted(edges, x, side="right"), 0, n_bins + 1)
        idx[x == hi] = n_bins  # closed last bin
        return np.bincount(idx, weights=pr, minlength=n_bins + 2)

    ha, hb = cells(a), cells(b)
    value = float(np.sum(weight * np.abs(ha - hb)))
    over = (float(ha[0] + ha[-1]), float(hb[0] + hb[-1]))
    return WTVResult(value=value, bin_width=(hi - lo) / n_bins, range=(lo, hi), n_bins=n_bins,
                     overflow=bool(over[0] > 0 or over[1] > 0), overflow_mass=over)


# ---------------------------------------------------------------------------
# Invariant measure
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class InvariantEstimate:
    """Samples of the invariant law from one long trajectory.

    ``moment_stderr`` holds batch-means standard errors of the mean and of
    the coordinate variances.
    """

    measure: EmpiricalMeasure
    burn_in: float
    thinning: float
    closed_form: dict | None
    mean: np.ndarray
    var: np.ndarray
    mean_stderr: np.ndarray
    var_stderr: np.ndarray

    def moment_check(self, n_sigma: float = 4.0) -> dict:
        """Compare mean and coordinate variances with the closed form, if any."""
        if self.closed_form is None:
            return {"available": False}
        m = np.asarray(self.closed_form["mean"], dtype=np.float64)
        v = np.diag(np.asarray(self.closed_form["cov"], dtype=np.float64).reshape(m.size, m.size))
        z_mean = np.abs(self.mean - m) / self.mean_stderr
        z_var = np.abs(self.var - v) / self.var_stderr
        return {"available": True, "mean_gap": (self.mean - m).tolist(), "var_gap": (self.var - v).tolist(),
                "z_mean": z_mean.tolist(), "z_var": z_var.tolist(),
                "pass": bool(np.all(z_mean <= n_sigma) and np.all(z_var <= n_sigma))}

    def to_dict(self) -> dict:
        return jsonable({"burn_in": self.burn_in, "thinning": self.thinning, "n": self.measure.n,
                         "closed_form": self.closed_form, "mean": self.mean, "var": self.var,
                         "mean_stderr": self.mean_stderr, "var_stderr": self.var_stderr,
                         "moment_check": self.moment_check()})


def estimate_invariant(model: CoefficientSet, burn_in: float, n_samples: int, thinning: float,
                       seed: int, dt: float = 1e-3, x0=None, *, n_batches: int = 50) -> InvariantEstimate:
    """Run one trajectory, drop ``burn_in`` and keep a sample every ``thinning``.

    The model must be time-homogeneous (pass :func:`limiting_model` output for
    models that only settle down asymptotically).
    """
    if not model.flags.time_homogeneous:
        raise CapabilityError(f"model {model.name!r} is not time-homogeneous; use limiting_model first")
    n_samples = int(n_samples)
    if n_samples < 2 * n_batches:
        raise ValueError(f"n_samples must be >= {2 * n_batches}")
    n_burn = steps_between(0.0, float(burn_in), dt)
    n_thin = steps_between(0.0, float(thinning), dt)
    if n_thin < 1:
        raise ValueError("thinning must be at least one step")
    rec = n_burn + n_thin * np.arange(1, n_samples + 1, dtype=np.int64)
    x0 = np.zeros(model.dim) if x0 is None else np.asarray(x0, dtype=np.float64).reshape(model.dim)
    st = run_states(model, x0.reshape(1, 1, -1), 1, seed, t_base=0.0, step_offset=0, dt=dt,
                    n_steps=int(rec[-1]), rec_steps=rec)
    samples = np.ascontiguousarray(st[0, :, 0, :])
    stats_m = [batch_means_stderr(c, n_batches) for c in samples.T]
    mean = np.array([s[0] for s in stats_m])
    stats_v = [batch_means_stderr((c - mu) ** 2, n_batches) for c, mu in zip(samples.T, mean)]
    info = model.info.get("stationary")
    closed = None if info is None else {"kind": "gaussian", "mean": list(info["mean"]), "cov": info["cov"]}
    meta = {"model": model.name, "seed": int(seed), "dt": dt, "burn_in": float(burn_in),
            "thinning": float(thinning), "x0": x0.tolist()}
    return InvariantEstimate(
        measure=EmpiricalMeasure(samples, meta=meta), burn_in=float(burn_in), thinning=float(thinning),
        closed_form=closed, mean=mean, var=np.array([s[0] for s in stats_v]),
        mean_stderr=np.array([s[1] for s in stats_m]), var_stderr=np.array([s[1] for s in stats_v]))


# ---------------------------------------------------------------------------
# Convergence to the invariant law
# ---------------------------------------------------------------------------
_METRICS = ("w1", "w2", "wtv")


def _distance(metric: str, a: EmpiricalMeasure, b: EmpiricalMeasure, W, seed: int) -> float:
    if metric == "wtv":
        return weighted_tv_1d(a, b, W).value
    p = 1.0 if metric == "w1" else 2.0
    if a.dim == 1:
        return wasserstein_1d(a, b, p)
    return wasserstein_sliced(a, b, p, seed=seed)


def _sampler_from(q: EmpiricalMeasure) -> Callable:
    pr = q.probabilities()

    def draw(n, rng):
        return q.samples[rng.choice(q.n, size=n, p=pr)]
    return draw


def convergence_profile(model: CoefficientSet, x, q: InvariantEstimate | EmpiricalMeasure, times,
                        n_paths: int, seed: int, dt: float = 1e-3, metric: str = "w2", W=None, *,
                        t0: float = 1.0, reference: Callable[[float], float] | None = None,
                        tolerance: float = 0.02, rate: float | None = None) -> CheckTable:
    """Distance between the law at ``t0 + s`` started from ``x`` at ``t0`` and ``q``.

    Parameters
    ----------
    x : array_like or EmpiricalMeasure
        Starting point, or a measure to resample starting points from.
    metric : {"w1", "w2", "wtv"}
        ``"wtv"`` uses :func:`weighted_tv_1d` with ``W``.
    reference : callable, optional
        Expected distance ``s -> value``; rows pass iff within ``tolerance``.
    rate : float, optional
        Claimed decay rate; the fit passes iff ``slope <= -rate + halfwidth``.

    The verdict is ``"not_applicable"`` when neither ``reference`` nor ``rate``
    is given.
    """
    if metric not in _METRICS:
        raise ValueError(f"metric must be one of {_METRICS}")
    if metric == "wtv" and model.dim != 1:
        raise CapabilityError("the wtv metric needs d = 1")
    qm = q.measure if isinstance(q, InvariantEstimate) else _as_measure(q)
    times = [float(s) for s in times]
    if not times or any(s <= 0 for s in times) or any(b <= a for a, b in zip(times, times[1:])):
        raise ValueError("times must be positive and strictly increasing")
    grid = TimeGrid(float(t0), float(t0) + times[-1], dt)
    init = _sampler_from(x) if isinstance(x, EmpiricalMeasure) else x
    ens = simulate_paths(model, grid, init, n_paths, seed, record_at=[float(t0) + s for s in times])
    dist = np.array([_distance(metric, EmpiricalMeasure(ens.states[:, k]), qm, W, seed)
                     for k in range(len(times))])
    rows, ok = [], True
    for s, dv in zip(times, dist):
        exp = None if reference is None else float(reference(s))
        passed = None if exp is None else abs(dv - exp) <= tolerance
        ok &= passed is not False
        rows.append((s, float(dv), exp, passed))
    constants: dict[str, Any] = {"metric": metric, "t0": float(t0), "dt": dt, "n_paths": int(n_paths),
                                 "seed": int(seed), "tolerance": tolerance, "q_samples": qm.n}
    fit_ok = None
    if len(times) >= 3 and np.all(dist > 0):
        slope, icpt, half = fit_decay_rate(times, dist, np.zeros(len(times)))
        constants.update(fitted_slope=slope, intercept=icpt, slope_halfwidth=half)
        if rate is not None:
            fit_ok = slope <= -float(rate) + half
    if rate is not None:
        constants["claimed_rate"] = float(rate)
        constants["rate_check"] = fit_ok
        ok &= bool(fit_ok)
    verdict = "not_applicable" if reference is None and rate is None else ("pass" if ok else "fail")
    return CheckTable("convergence", ("s", "distance", "reference", "pass"), rows, verdict, constants)


# ---------------------------------------------------------------------------
# Chapman-Kolmogorov consistency
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class CKResult:
    """KS comparison of direct and restarted terminal samples (max over coordinates)."""

    ks_stat: float
    threshold: float
    passed: bool
    coordinate_stats: tuple[float, ...]
    tau: float
    s: float
    n_paths: int
    seed: int

    def __iter__(self):
        return iter((self.ks_stat, self.threshold, self.passed))

    def to_row(self) -> tuple:
        return (self.tau, self.s, self.seed, self.ks_stat, self.threshold, self.passed)


def ck_consistency(model: CoefficientSet, tau: float, s: float, x, n_paths: int, seed: int,
                   dt: float = 1e-3) -> CKResult:
    """Two-sample KS between direct ``tau -> tau + s`` samples and a restart at time 1.

    The direct run uses noise leg 0 and the two legs use legs 1 and 2, so the
    samples are independent. In ``d > 1`` every coordinate marginal must pass.
    """
    tau, s = float(tau), float(s)
    x = np.asarray(x, dtype=np.float64).reshape(model.dim)
    n_paths = int(n_paths)
    n = steps_between(tau, tau + s, dt)
    direct = run_states(model, x.reshape(1, 1, -1), n_paths, seed, t_base=tau, step_offset=0, dt=dt,
                        n_steps=n, rec_steps=[n], leg=0)[:, 0, 0, :]
    restarted = simulate_two_leg(model, tau, s, x, n_paths, seed, dt, legs=(1, 2)).terminal()
    stats_ = tuple(ks_2samp_stat(direct[:, i], restarted[:, i]) for i in range(model.dim))
    thr = ks_threshold(n_paths)
    ks = max(stats_)
    return CKResult(ks_stat=ks, threshold=thr, passed=bool(ks < thr), coordinate_stats=stats_,
                    tau=tau, s=s, n_paths=n_paths, seed=int(seed))


# ---------------------------------------------------------------------------
# Limiting process
# ---------------------------------------------------------------------------
def limiting_comparison(model: CoefficientSet, W, x, times, n_paths: int, seed: int,
                        dt: float = 1e-3, *, M1: float, t0: float = 1.0, tolerance: float = 0.05,
                        x_range=DEFAULT_X_RANGE, check_samples: int = 10_000) -> CheckTable:
    """``E[W(X_{t0+s})] + E[W(Z_{t0+s})]`` against ``2 exp(-M1 s) W(x)``.

    ``X`` follows ``model`` and ``Z`` its limiting coefficients, both from
    ``x`` at ``t0`` with independent noise legs. The drift condition
    ``L W <= -M1 W`` is sampled for both on ``t in [t0, t0 + 5]``; if either
    fails the verdict is ``"not_applicable"``.
    """
    limit = limiting_model(model)
    t_range = (float(t0), min(float(t0) + 5.0, model.horizon))
    checks = [check_drift_condition(m, W, t_range=t_range, x_range=x_range, n_samples=check_samples,
                                    seed=seed) for m in (model, limit)]
    applicable = all(c.holds(float(M1)) for c in checks)
    times = [float(s) for s in times]
    if not times or any(s < 0 for s in times) or any(b <= a for a, b in zip(times, times[1:])):
        raise ValueError("times must be non-empty, >= 0 and strictly increasing")
    grid = TimeGrid(float(t0), float(t0) + times[-1], dt)
    record = [float(t0) + s for s in times]
    ex = simulate_paths(model, grid, x, n_paths, seed, record_at=record, leg=0)
    ez = simulate_paths(limit, grid, x, n_paths, seed, record_at=record, leg=1)
    wx = float(getattr(W, "eval", W)(np.asarray(x, dtype=np.float64).reshape(1, -1))[0])
    rows, ok = [], True
    for k, s in enumerate(times):
        mx, sx = mean_stderr(W.eval(ex.states[:, k]))
        mz, sz = mean_stderr(W.eval(ez.states[:, k]))
        se = math.sqrt(np.nan_to_num(sx) ** 2 + np.nan_to_num(sz) ** 2)
        gap = mx + mz
        bound = 2.0 * math.exp(-float(M1) * s) * wx
        passed = gap <= bound * (1 + tolerance) + 3 * se
        ok &= passed
        rows.append((s, gap, se, bound, passed if applicable else None))
    verdict = "not_applicable" if not applicable else ("pass" if ok else "fail")
    constants = {"M1": float(M1), "W_x": wx, "t0": float(t0), "dt": dt, "tolerance": tolerance,
                 "n_paths": int(n_paths), "seed": int(seed), "limit": limit.name,
                 "drift_condition": [c.to_dict() for c in checks]}
    return CheckTable("limiting", ("s", "gap", "stderr", "bound", "pass"), rows, verdict, constants)
