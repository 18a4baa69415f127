"""Lyapunov functions and sampled checks of the structural assumptions.

The checkers can only refute: each samples ``(t, x, y)`` uniformly from a box
and reports the worst constant seen, which means the assumption "holds on the
sampled region". Two-point conditions use the generator of the synchronous
coupling applied to ``W(x - y)``:

.. math::

    (L_x - L_y) W(z) = (b(t, x) - b(t, y)) \\cdot \\nabla W(z)
        + \\tfrac12 \\operatorname{tr}(\\Delta\\sigma \\Delta\\sigma^T \\nabla^2 W(z)),

with ``z = x - y`` and ``Delta sigma = sigma(t, x) - sigma(t, y)``.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import CertificateRefused
from .models import CoefficientSet, diffusion_rows, drift_rows
from .simulate import TimeGrid, couple_paths, simulate_paths
from .stats import mean_stderr
from .tables import CheckTable

__all__ = [
    "LyapunovFunction",
    "quadratic",
    "power",
    "one_plus_quadratic",
    "get_lyapunov",
    "lyapunov_names",
    "AssumptionCheck",
    "check_dissipativity",
    "check_monotonicity",
    "check_drift_condition",
    "generator_rows",
    "coupling_contraction",
    "moment_decay",
]

_CERT_POINTS = 10_000
_CERT_BOX = 10.0
_CERT_RTOL = 1e-12
# relative slack when comparing a sampled drift ratio with a claimed constant
_RATIO_RTOL = 1e-9
DEFAULT_T_RANGE = (0.0, 5.0)
DEFAULT_X_RANGE = (-5.0, 5.0)


# ---------------------------------------------------------------------------
# Lyapunov functions
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class LyapunovFunction:
    """Vectorized ``W`` on arrays of shape ``(..., d)`` with claimed constants.

    Parameters
    ----------
    eval, grad, hess : callable
        ``W(x)`` of shape ``(...)``, gradient ``(..., d)`` and hessian ``(..., d, d)``.
    p : float
        Polynomial order, ``W(x) <= C (1 + |x|^p)``.
    M_W : float
        Gradient growth, ``|grad W| <= M_W (1 + W)``.
    c_W : float, optional
        Lower bound ``c_W |x|^p <= W(x)``.
    floor_one : bool
        Whether ``W >= 1``.
    dim : int
        Dimension the constants were certified in.

    The constants are checked on ``10^4`` uniform points of ``[-10, 10]^d``
    at construction; a violation raises :class:`CertificateRefused`.
    """

    name: str
    eval: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    hess: Callable[[np.ndarray], np.ndarray]
    p: float
    M_W: float
    c_W: float | None = None
    floor_one: bool = False
    dim: int = 1
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if int(self.dim) != self.dim or self.dim < 1:
            raise ValueError("dim must be a positive integer")
        object.__setattr__(self, "dim", int(self.dim))
        self._certify()

    def __call__(self, x) -> np.ndarray:
        return self.eval(np.asarray(x, dtype=np.float64))

    def _certify(self):
        w0 = float(self.eval(np.zeros(self.dim)))
        if not math.isfinite(w0):
            raise CertificateRefused(f"{self.name}: W(0) is not finite")
        rng = np.random.default_rng(self.seed)
        x = rng.uniform(-_CERT_BOX, _CERT_BOX, size=(_CERT_POINTS, self.dim))
        w = np.asarray(self.eval(x), dtype=np.float64)
        g = np.sqrt(np.sum(np.asarray(self.grad(x), dtype=np.float64) ** 2, axis=-1))
        floor = 1.0 if self.floor_one else 0.0
        _refuse_if(w < floor, x, f"{self.name}: W >= {floor:g}", w, np.full_like(w, floor))
        rhs = self.M_W * (1.0 + w)
        _refuse_if(g > rhs * (1 + _CERT_RTOL), x, f"{self.name}: |grad W| <= M_W (1 + W)", g, rhs)
        if self.c_W is not None:
            lhs = self.c_W * np.sqrt(np.sum(x * x, axis=-1)) ** self.p
            _refuse_if(lhs > w * (1 + _CERT_RTOL), x, f"{self.name}: c_W |x|^p <= W", lhs, w)

    def describe(self) -> dict:
        return {"name": self.name, "p": self.p, "M_W": self.M_W, "c_W": self.c_W,
                "floor_one": self.floor_one, "dim": self.dim}


def _refuse_if(bad, x, what, lhs, rhs):
    if np.any(bad):
        i = int(np.argmax(bad))
        raise CertificateRefused(f"{what} fails at x={x[i].tolist()} ({lhs[i]:.6g} vs {rhs[i]:.6g}); "
                                 f"{int(np.sum(bad))} of {bad.size} sampled points violate it")


def _sqnorm(x):
    return np.sum(x * x, axis=-1)


def _eye_like(x, scale):
    d = x.shape[-1]
    return np.broadcast_to(scale * np.eye(d), x.shape + (d,)).copy()


def quadratic(dim: int = 1) -> LyapunovFunction:
    """``W = |x|^2``; ``|grad W| = 2|x| <= 1 + |x|^2``."""
    return LyapunovFunction("quadratic", _sqnorm, lambda x: 2.0 * x, lambda x: _eye_like(x, 2.0),
                            p=2.0, M_W=1.0, c_W=1.0, dim=dim)


def power(p: float = 4.0, dim: int = 1) -> LyapunovFunction:
    """``W = |x|^p`` for ``p >= 2`` with ``M_W = p``."""
    p = float(p)
    if p < 2:
        raise ValueError("power needs p >= 2 for a finite hessian")

    def f(x):
        return _sqnorm(x) ** (p / 2)

    def grad(x):
        return p * (_sqnorm(x) ** (p / 2 - 1))[..., None] * x

    def hess(x):
        r2 = _sqnorm(x)[..., None, None]
        outer = x[..., :, None] * x[..., None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            base = r2 ** (p / 2 - 1)
            extra = np.where(r2 > 0, p * (p - 2) * r2 ** (p / 2 - 2) * outer, 0.0)
        return p * base * np.eye(x.shape[-1]) + extra
    return LyapunovFunction(f"power({p:g})", f, grad, hess, p=p, M_W=p, c_W=1.0, dim=dim,
                            params={"p": p})


def one_plus_quadratic(dim: int = 1) -> LyapunovFunction:
    """``W = 1 + |x|^2``, bounded below by one."""
    return LyapunovFunction("one_plus_quadratic", lambda x: 1.0 + _sqnorm(x), lambda x: 2.0 * x,
                            lambda x: _eye_like(x, 2.0), p=2.0, M_W=1.0, c_W=1.0,
                            floor_one=True, dim=dim)


_FACTORIES = {"quadratic": quadratic, "power": power, "one_plus_quadratic": one_plus_quadratic}
_NAME_RE = re.compile(r"^\s*([a-z_]+)\s*(?:\(\s*([-+0-9.eE]+)\s*\))?\s*$")


def lyapunov_names() -> list[str]:
    return list(_FACTORIES)


def get_lyapunov(name: str, dim: int = 1, **params) -> LyapunovFunction:
    """Named Lyapunov function; ``"power(4)"`` is shorthand for ``power`` with ``p=4``."""
    match = _NAME_RE.match(name)
    if not match or match.group(1) not in _FACTORIES:
        raise KeyError(f"unknown Lyapunov function {name!r}; known: {', '.join(_FACTORIES)}")
    base, arg = match.groups()
    if arg is not None:
        if base != "power":
            raise ValueError(f"{base} takes no positional parameter")
        params["p"] = float(arg)
    return _FACTORIES[base](dim=dim, **params)


# ---------------------------------------------------------------------------
# Sampled assumption checks
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class AssumptionCheck:
    """Worst sampled constant of a ``ratio <= -M1`` condition.

    ``M1_est = -max ratio`` and ``M1_p99`` uses the 99th percentile instead,
    which guards against a single outlier. Unpacks as ``(M1_est, worst)``.
    """

    name: str
    M1_est: float
    M1_p99: float
    worst: dict
    n_samples: int
    n_used: int
    region: dict

    def __iter__(self):
        return iter((self.M1_est, self.worst))

    def holds(self, M1: float) -> bool:
        """Whether ``ratio <= -M1`` on every used sample (relative slack 1e-9)."""
        return self.M1_est >= M1 - _RATIO_RTOL * max(1.0, abs(M1))

    def to_dict(self) -> dict:
        return {"name": self.name, "M1_est": self.M1_est, "M1_p99": self.M1_p99,
                "worst": self.worst, "n_samples": self.n_samples, "n_used": self.n_used,
                "region": self.region, "statement": "holds on sampled region only"}


def _region(model: CoefficientSet, t_range, x_range):
    if t_range is None:
        t_range = (DEFAULT_T_RANGE[0], min(DEFAULT_T_RANGE[1], model.horizon))
    t_range = (float(t_range[0]), float(t_range[1]))
    x_range = (float(x_range[0]), float(x_range[1]))
    if not (0 <= t_range[0] <= t_range[1]) or not x_range[0] < x_range[1]:
        raise ValueError("need 0 <= t_lo <= t_hi and x_lo < x_hi")
    return t_range, x_range


def _sample(model, t_range, x_range, n_samples, seed, pairs: bool):
    rng = np.random.default_rng(seed)
    n, d = int(n_samples), model.dim
    if n < 1:
        raise ValueError("n_samples must be >= 1")
    t = rng.uniform(t_range[0], t_range[1], size=n)
    x = rng.uniform(x_range[0], x_range[1], size=(n, d))
    y = rng.uniform(x_range[0], x_range[1], size=(n, d)) if pairs else None
    return t, x, y


def _summarize(name, ratio, keep, t, x, y, region, n) -> AssumptionCheck:
    if not np.any(keep):
        raise ValueError(f"{name}: every sample was skipped (zero denominator)")
    r = ratio[keep]
    idx = np.flatnonzero(keep)
    i = int(np.argmax(r))
    j = int(idx[i])
    worst = {"t": float(t[j]), "x": x[j].tolist(), "ratio": float(r[i])}
    if y is not None:
        worst["y"] = y[j].tolist()
    with np.errstate(invalid="ignore"):
        p99 = float(np.quantile(r, 0.99))
    return AssumptionCheck(name=name, M1_est=float(-r[i]) + 0.0, M1_p99=-p99 + 0.0, worst=worst,
                           n_samples=int(n), n_used=int(keep.sum()), region=region)


def _two_point_differences(model, t, x, y):
    db = drift_rows(model, t, x) - drift_rows(model, t, y)
    ds = diffusion_rows(model, t, x) - diffusion_rows(model, t, y)
    return db, ds


def check_dissipativity(model: CoefficientSet, W: LyapunovFunction, t_range=None,
                        x_range=DEFAULT_X_RANGE, n_samples: int = 10_000,
                        seed: int = 0) -> AssumptionCheck:
    """Sample ``((L_x - L_y) W)(x - y) / W(x - y)`` and report ``M1_est = -max``.

    Samples with ``x == y`` or ``W(x - y) == 0`` are skipped.
    """
    t_range, x_range = _region(model, t_range, x_range)
    t, x, y = _sample(model, t_range, x_range, n_samples, seed, pairs=True)
    z = x - y
    db, ds = _two_point_differences(model, t, x, y)
    w = np.asarray(W.eval(z), dtype=np.float64)
    g = np.asarray(W.grad(z), dtype=np.float64).reshape(z.shape)
    H = np.asarray(W.hess(z), dtype=np.float64).reshape(z.shape + (model.dim,))
    num = np.sum(db * g, axis=-1) + 0.5 * np.einsum("nik,njk,nij->n", ds, ds, H)
    keep = (w != 0) & np.any(z != 0, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = num / w
    region = {"t_range": list(t_range), "x_range": list(x_range), "dim": model.dim, "W": W.name}
    return _summarize("dissipativity", ratio, keep, t, x, y, region, n_samples)


def check_monotonicity(model: CoefficientSet, m: float = 2, t_range=None,
                       x_range=DEFAULT_X_RANGE, n_samples: int = 10_000,
                       seed: int = 0) -> AssumptionCheck:
    """Sample ``(<x - y, b(x) - b(y)> + (m - 1)/2 |sigma(x) - sigma(y)|_F^2) / |x - y|^2``."""
    if not m >= 2:
        raise ValueError("monotonicity needs m >= 2")
    t_range, x_range = _region(model, t_range, x_range)
    t, x, y = _sample(model, t_range, x_range, n_samples, seed, pairs=True)
    z = x - y
    db, ds = _two_point_differences(model, t, x, y)
    num = np.sum(z * db, axis=-1) + 0.5 * (m - 1) * np.sum(ds * ds, axis=(-2, -1))
    den = np.sum(z * z, axis=-1)
    keep = den != 0
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = num / den
    region = {"t_range": list(t_range), "x_range": list(x_range), "dim": model.dim, "m": float(m)}
    return _summarize("monotonicity", ratio, keep, t, x, y, region, n_samples)


def generator_rows(model: CoefficientSet, t, X, W: LyapunovFunction) -> np.ndarray:
    """``L W`` at the rows of ``X`` (one time per row or a scalar time)."""
    X = np.ascontiguousarray(X, dtype=np.float64).reshape(-1, model.dim)
    b = drift_rows(model, t, X)
    s = diffusion_rows(model, t, X)
    g = np.asarray(W.grad(X), dtype=np.float64).reshape(X.shape)
    H = np.asarray(W.hess(X), dtype=np.float64).reshape(X.shape + (model.dim,))
    return np.sum(b * g, axis=-1) + 0.5 * np.einsum("nik,njk,nij->n", s, s, H)


def check_drift_condition(model: CoefficientSet, W: LyapunovFunction, t_range=None,
                          x_range=DEFAULT_X_RANGE, n_samples: int = 10_000,
                          seed: int = 0) -> AssumptionCheck:
    """Sample ``L W(x) / W(x)`` for the one-point condition ``L W <= -M1 W``.

    Points with ``W(x) == 0`` are skipped.
    """
    t_range, x_range = _region(model, t_range, x_range)
    t, x, _ = _sample(model, t_range, x_range, n_samples, seed, pairs=False)
    lw = generator_rows(model, t, x, W)
    w = np.asarray(W.eval(x), dtype=np.float64)
    keep = w != 0
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = lw / w
    region = {"t_range": list(t_range), "x_range": list(x_range), "dim": model.dim, "W": W.name}
    return _summarize("drift_condition", ratio, keep, t, x, None, region, n_samples)


# ---------------------------------------------------------------------------
# Empirical inequalities
# ---------------------------------------------------------------------------
def _record_times(t0: float, times, dt: float):
    times = [float(s) for s in times]
    if not times or any(s < 0 for s in times) or any(b <= a for a, b in zip(times, times[1:])):
        raise ValueError("times must be non-empty, >= 0 and strictly increasing")
    return times, TimeGrid(t0, t0 + times[-1], dt)


def coupling_contraction(model: CoefficientSet, W: LyapunovFunction, x, y, times, n_paths: int,
                         seed: int, dt: float = 1e-3, *, M1: float | None = None,
                         t0: float = 1.0, tolerance: float = 0.05,
                         check_samples: int = 10_000) -> CheckTable:
    """Synchronous coupling estimate of ``E[W(X_{t0+s} - Y_{t0+s})]`` against ``exp(-M1 s) W(x - y)``.

    ``M1`` defaults to ``M1_est`` of :func:`check_dissipativity` on
    ``t in [t0, t0 + 5]``. Each time passes iff
    ``estimate <= bound (1 + tolerance) + 3 stderr``.
    """
    check = None
    if M1 is None:
        t_hi = min(t0 + DEFAULT_T_RANGE[1], model.horizon)
        check = check_dissipativity(model, W, t_range=(t0, t_hi), n_samples=check_samples, seed=seed)
        M1 = check.M1_est
    M1 = float(M1)
    if not M1 > 0:
        raise ValueError(f"coupling contraction needs M1 > 0, got {M1}")
    times, grid = _record_times(t0, times, dt)
    ex, ey = couple_paths(model, grid, x, y, n_paths, seed, record_at=[t0 + s for s in times])
    w0 = float(W.eval(np.asarray(x, dtype=np.float64).reshape(-1) - np.asarray(y, dtype=np.float64).reshape(-1)))
    rows, ok = [], True
    for k, s in enumerate(times):
        est, se = mean_stderr(W.eval(ex.states[:, k] - ey.states[:, k]))
        se = 0.0 if math.isnan(se) else se
        bound = math.exp(-M1 * s) * w0
        passed = est <= bound * (1 + tolerance) + 3 * se
        ok &= passed
        rows.append((s, est, se, bound, passed))
    constants = {"M1": M1, "M1_source": "argument" if check is None else "check_dissipativity",
                 "W0": w0, "tolerance": tolerance, "t0": t0, "dt": dt, "n_paths": int(n_paths),
                 "seed": int(seed)}
    if check is not None:
        constants["dissipativity"] = check.to_dict()
    return CheckTable("coupling", ("s", "estimate", "stderr", "bound", "pass"), rows,
                      "pass" if ok else "fail", constants)


def moment_decay(model: CoefficientSet, W: LyapunovFunction, init, times, n_paths: int, seed: int,
                 dt: float = 1e-3, *, M1: float, tau: float = 0.0, tolerance: float = 0.05,
                 t_range=None, x_range=DEFAULT_X_RANGE, check_samples: int = 10_000) -> CheckTable:
    """``E[W(X_{tau+s})]`` against ``exp(-M1 s) E[W(xi)]`` after a sampled drift check.

    The drift condition ``L W <= -M1 W`` is sampled first; when it fails the
    table carries the estimates with verdict ``"not_applicable"``.
    """
    drift = check_drift_condition(model, W, t_range=t_range, x_range=x_range,
                                  n_samples=check_samples, seed=seed)
    applicable = drift.holds(float(M1))
    times, grid = _record_times(float(tau), times, dt)
    ens = simulate_paths(model, grid, init, n_paths, seed,
                         record_at=[float(tau)] + [float(tau) + s for s in times])
    w_init, _ = mean_stderr(W.eval(ens.states[:, 0]))
    rows, ok = [], True
    for k, s in enumerate(times, start=1):
        est, se = mean_stderr(W.eval(ens.states[:, k]))
        se = 0.0 if math.isnan(se) else se
        bound = math.exp(-float(M1) * s) * w_init
        passed = est <= bound * (1 + tolerance) + 3 * se
        ok &= passed
        rows.append((s, est, se, bound, passed if applicable else None))
    verdict = "not_applicable" if not applicable else ("pass" if ok else "fail")
    constants = {"M1": float(M1), "E_W_init": w_init, "tolerance": tolerance, "tau": float(tau),
                 "dt": dt, "n_paths": int(n_paths), "seed": int(seed),
                 "drift_condition": drift.to_dict(), "drift_condition_holds": applicable}
    return CheckTable("moments", ("s", "estimate", "stderr", "bound", "pass"), rows, verdict,
                      constants)
