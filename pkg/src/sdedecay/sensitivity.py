"""Estimators of ``V(s, x) = E[phi(X_s^x)]`` and its space derivatives.

Two independent routes to ``d^n V / dx^n``:

* pathwise, through the variation flows of the scheme:
  ``E[grad phi(X_s)^T J_s]`` and, in ``d = 1``, ``E[phi''(X_s) J_s^2 + phi'(X_s) K_s]``;
* central finite differences of ``V`` with common noise across the bumped
  starting points.

:func:`envelope_check` compares the decay of ``max_x |d^n V(s, x)| / h(x)``
over a grid of starting points with a claimed envelope ``h(x) G(s)``.
"""
from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import asdict, dataclass, field
from typing import Any, Callable

import numpy as np
from scipy import stats as sps

from .errors import CapabilityError, CertificateRefused
from .models import CoefficientSet
from .simulate import run_states, run_tangent, steps_between
from .stats import column_mean_stderr, mean_stderr

__all__ = [
    "Family",
    "TestFunction",
    "build_test_function",
    "DecayEnvelope",
    "DecayReport",
    "theoretical_rate",
    "estimate_V",
    "estimate_dV_pathwise",
    "estimate_dV_fd",
    "fit_decay_rate",
    "envelope_check",
    "default_x_grid",
    "derivative_table",
    "report_from_table",
]

_CERT_PAIRS = 10_000
_CERT_BOX = 10.0
_CERT_RTOL = 1e-12


# ---------------------------------------------------------------------------
# Test functions
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Family:
    """Regularity class of a test function.

    ``kind`` is ``"S_m"`` (``|phi(x) - phi(y)|^m <= W(x - y)``), ``"S'_m"``
    (``|phi(x) - phi(y)| <= C (1 + |x|^{m/2} + |y|^{m/2}) |x - y|``) or
    ``"unrestricted"``.
    """

    kind: str
    m: float | None = None
    C: float | None = None
    W: Any = None

    def describe(self) -> dict:
        out = {"kind": self.kind, "m": self.m, "C": self.C}
        if self.W is not None:
            out["W"] = getattr(self.W, "name", repr(self.W))
        return out


@dataclass(frozen=True, eq=False)
class TestFunction:
    """Vectorized ``phi`` on arrays of shape ``(..., d)``.

    ``grad`` returns ``(..., d)`` and ``hess`` returns ``(..., d, d)``; either
    may be None for non-smooth functions.
    """

    __test__ = False  # not a pytest class

    name: str
    eval: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray] | None = None
    hess: Callable[[np.ndarray], np.ndarray] | None = None
    family: Family = Family("unrestricted")
    growth_bound: tuple[float, float] | None = None
    params: dict = field(default_factory=dict)

    def __call__(self, x) -> np.ndarray:
        return self.eval(np.asarray(x, dtype=np.float64))


def _norm(x):
    return np.sqrt(np.sum(x * x, axis=-1))


def _first(x):
    return x[..., 0]


def _basis_grad(x, values):
    g = np.zeros(x.shape)
    g[..., 0] = values
    return g


def _basis_hess(x, values):
    d = x.shape[-1]
    H = np.zeros(x.shape + (d,))
    H[..., 0, 0] = values
    return H


def _identity(**_):
    return (_first,
            lambda x: _basis_grad(x, np.ones(x.shape[:-1])),
            lambda x: _basis_hess(x, np.zeros(x.shape[:-1])),
            (1.0, 1.0))


def _square(**_):
    def hess(x):
        d = x.shape[-1]
        return np.broadcast_to(2.0 * np.eye(d), x.shape + (d,)).copy()
    return (lambda x: np.sum(x * x, axis=-1), lambda x: 2.0 * x, hess, (1.0, 2.0))


def _tanh(**_):
    def grad(x):
        th = np.tanh(x[..., 0])
        return _basis_grad(x, 1.0 - th * th)

    def hess(x):
        th = np.tanh(x[..., 0])
        return _basis_hess(x, -2.0 * th * (1.0 - th * th))
    return (lambda x: np.tanh(x[..., 0]), grad, hess, (1.0, 0.0))


def _smooth_abs(eps: float = 1.0, **_):
    eps = float(eps)
    if not eps > 0:
        raise ValueError("smooth_abs needs eps > 0")

    def f(x):
        return np.sqrt(eps * eps + np.sum(x * x, axis=-1))

    def grad(x):
        return x / f(x)[..., None]

    def hess(x):
        r = f(x)[..., None, None]
        d = x.shape[-1]
        return (np.eye(d) * r * r - x[..., :, None] * x[..., None, :]) / r**3
    return f, grad, hess, (1.0 + eps, 1.0)


def _poly_local_lipschitz(m: float = 2.0, **_):
    """``|x|^q / q`` with ``q = m/2 + 1``; gradient norm ``|x|^{m/2}``."""
    m = float(m)
    if m < 2:
        raise ValueError("poly_local_lipschitz needs m >= 2")
    q = m / 2 + 1

    def f(x):
        return _norm(x) ** q / q

    def grad(x):
        r = _norm(x)[..., None]
        return r ** (q - 2) * x

    def hess(x):
        d = x.shape[-1]
        r = _norm(x)[..., None, None]
        outer = x[..., :, None] * x[..., None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            extra = np.where(r > 0, (q - 2) * r ** (q - 4) * outer, 0.0)
        base = np.where(r > 0, r ** (q - 2), 1.0 if q == 2 else 0.0)
        return base * np.eye(d) + extra
    return f, grad, hess, (1.0 / q, q)


def _constant(value: float = 1.0, **_):
    value = float(value)
    return (lambda x: np.full(x.shape[:-1], value),
            lambda x: np.zeros(x.shape),
            lambda x: np.zeros(x.shape + (x.shape[-1],)),
            (abs(value), 0.0))


def _abs(**_):
    return (lambda x: np.abs(x[..., 0]),
            None, None, (1.0, 1.0))


_BUILDERS = {
    "identity": _identity,
    "square": _square,
    "tanh": _tanh,
    "smooth_abs": _smooth_abs,
    "poly_local_lipschitz": _poly_local_lipschitz,
    "constant": _constant,
    "abs": _abs,
}

_NAME_RE = re.compile(r"^\s*([a-z_]+)\s*(?:\(\s*([-+0-9.eE]+)\s*\))?\s*$")


def _check_family(f, family: Family, dim: int, seed: int):
    if family.kind == "unrestricted":
        return
    rng = np.random.default_rng(seed)
    x = rng.uniform(-_CERT_BOX, _CERT_BOX, size=(_CERT_PAIRS, dim))
    y = rng.uniform(-_CERT_BOX, _CERT_BOX, size=(_CERT_PAIRS, dim))
    diff = np.abs(f(x) - f(y))
    m = float(family.m)
    if family.kind == "S_m":
        W = family.W
        if W is None:
            raise ValueError("family S_m needs a Lyapunov function W")
        w = getattr(W, "eval", W)
        lhs = diff**m
        rhs = np.asarray(w(x - y), dtype=np.float64)
    elif family.kind == "S'_m":
        C = float(family.C)
        lhs = diff
        rhs = C * (1 + _norm(x) ** (m / 2) + _norm(y) ** (m / 2)) * _norm(x - y)
    else:
        raise ValueError(f"unknown family kind {family.kind!r}")
    bad = lhs > rhs * (1 + _CERT_RTOL) + 1e-300
    if np.any(bad):
        i = int(np.argmax(bad))
        raise CertificateRefused(
            f"{family.kind} certificate refused: inequality fails at x={x[i].tolist()}, "
            f"y={y[i].tolist()} ({lhs[i]:.6g} > {rhs[i]:.6g}); {int(bad.sum())} of "
            f"{_CERT_PAIRS} sampled pairs violate it")


def build_test_function(name: str, family: str = "S'_m", *, m: float | None = None,
                        C: float = 1.0, W=None, dim: int = 1, seed: int = 0,
                        **params) -> TestFunction:
    """Build a named test function and certify its family on sampled pairs.

    Parameters
    ----------
    name : str
        One of ``identity``, ``square``, ``tanh``, ``smooth_abs``,
        ``poly_local_lipschitz`` (``m`` from params, or the form
        ``"poly_local_lipschitz(3)"``), ``constant`` and ``abs``.
    family : {"S_m", "S'_m", "unrestricted"}
    m : float, optional
        Family exponent; defaults to 2, or to the ``poly_local_lipschitz`` order.
    C : float
        Constant of the ``S'_m`` inequality.
    W : LyapunovFunction or callable, optional
        Required for ``S_m``.
    dim : int
        Dimension used for the certificate sample.

    Raises
    ------
    CertificateRefused
        If the sampled family inequality fails.
    """
    match = _NAME_RE.match(name)
    if not match or match.group(1) not in _BUILDERS:
        raise KeyError(f"unknown test function {name!r}; known: {', '.join(_BUILDERS)}")
    base, arg = match.group(1), match.group(2)
    params = dict(params)
    if arg is not None:
        if base != "poly_local_lipschitz":
            raise ValueError(f"{base} takes no positional parameter")
        params["m"] = float(arg)
    if base == "poly_local_lipschitz":
        params.setdefault("m", m if m is not None else 2.0)
        m = params["m"] if m is None else m
    m = 2.0 if m is None else float(m)
    f, grad, hess, growth = _BUILDERS[base](**params)
    fam = Family(kind=family, m=None if family == "unrestricted" else m,
                 C=float(C) if family == "S'_m" else None, W=W if family == "S_m" else None)
    _check_family(f, fam, int(dim), seed)
    label = base if not params else f"{base}({', '.join(f'{k}={v}' for k, v in params.items())})"
    return TestFunction(name=label, eval=f, grad=grad, hess=hess, family=fam,
                        growth_bound=growth, params=params)


# ---------------------------------------------------------------------------
# Envelopes and reports
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class DecayEnvelope:
    """Claimed bound ``|d^n V(s, x)| <= h(x) G(s)`` with ``G(s) = exp(-rate s)``.

    ``form`` is ``"poly"`` with ``h = C (1 + |x|^{p/m})`` or ``"gauss"`` with
    ``h = C exp(c |x|^2)``.
    """

    form: str
    C: float
    rate: float
    p: float | None = None
    m: float | None = None
    c: float | None = None
    convention: str | None = None

    def __post_init__(self):
        if self.form not in ("poly", "gauss"):
            raise ValueError("form must be 'poly' or 'gauss'")
        if not self.C > 0:
            raise ValueError("C must be positive")
        if not self.rate >= 0:
            raise ValueError("rate must be >= 0")
        if self.form == "poly" and not (self.p is not None and self.m is not None and self.m > 0 and self.p >= 0):
            raise ValueError("poly form needs p >= 0 and m > 0")
        if self.form == "gauss" and not (self.c is not None and self.c >= 0):
            raise ValueError("gauss form needs c >= 0")

    @classmethod
    def poly(cls, C: float = 1.0, p: float = 2.0, m: float = 2.0, rate: float = 1.0,
             convention: str | None = None) -> "DecayEnvelope":
        return cls("poly", float(C), float(rate), p=float(p), m=float(m), convention=convention)

    @classmethod
    def gauss(cls, C: float = 1.0, c: float = 0.0, rate: float = 1.0,
              convention: str | None = None) -> "DecayEnvelope":
        return cls("gauss", float(C), float(rate), c=float(c), convention=convention)

    def h(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        r = _norm(x) if x.ndim else abs(float(x))
        if self.form == "poly":
            return self.C * (1.0 + r ** (self.p / self.m))
        return self.C * np.exp(self.c * r * r)

    def G(self, s) -> np.ndarray:
        return np.exp(-self.rate * np.asarray(s, dtype=np.float64))

    def describe(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def theoretical_rate(M1: float, family: Family) -> tuple[float | None, str]:
    """Expected decay rate and the convention used: ``M1/m`` for S_m, ``M1`` for S'_m."""
    if family.kind == "S_m":
        return M1 / family.m, "S_m: rate M1/m"
    if family.kind == "S'_m":
        return float(M1), "S'_m: rate M1"
    return None, "unrestricted: no theoretical rate"


@dataclass(frozen=True, eq=False)
class DecayReport:
    """Decay of ``r(s) = max_x |d^n V(s, x)| / h(x)`` and its verdict."""

    times: np.ndarray
    values: np.ndarray
    stderrs: np.ndarray
    censored: np.ndarray
    argmax_x: np.ndarray
    fitted_slope: float | None
    intercept: float | None
    slope_halfwidth: float | None
    theoretical_rate: float | None
    rate_convention: str | None
    verdict: bool
    tolerance: float
    order: int
    x_grid: np.ndarray
    cell_values: np.ndarray
    cell_stderrs: np.ndarray
    envelope: DecayEnvelope
    C_hat: float | None
    checks: dict
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        t = np.asarray(self.times)
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly increasing")
        if np.any(np.asarray(self.values) < 0):
            raise ValueError("values must be >= 0")

    def to_dict(self) -> dict:
        return {
            "times": self.times.tolist(),
            "values": self.values.tolist(),
            "stderrs": self.stderrs.tolist(),
            "censored": self.censored.tolist(),
            "argmax_x": self.argmax_x.tolist(),
            "fitted_slope": self.fitted_slope,
            "intercept": self.intercept,
            "slope_halfwidth": self.slope_halfwidth,
            "theoretical_rate": self.theoretical_rate,
            "rate_convention": self.rate_convention,
            "verdict": "pass" if self.verdict else "fail",
            "tolerance": self.tolerance,
            "order": self.order,
            "x_grid": self.x_grid.tolist(),
            "cell_values": self.cell_values.tolist(),
            "cell_stderrs": self.cell_stderrs.tolist(),
            "envelope": self.envelope.describe(),
            "C_hat": self.C_hat,
            "checks": self.checks,
            "meta": self.meta,
        }

    def csv_rows(self) -> list[list]:
        return [[float(s), float(r), float(e), int(bool(c))]
                for s, r, e, c in zip(self.times, self.values, self.stderrs, self.censored)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["s", "r", "stderr", "censored"])
        for row in self.csv_rows():
            w.writerow([repr(row[0]), repr(row[1]), repr(row[2]), row[3]])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# Estimators
# ---------------------------------------------------------------------------
def _point(x, dim: int) -> np.ndarray:
    x = np.array(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != dim:
        raise ValueError(f"x must have {dim} components")
    return x


def _grid_steps(times, dt: float, t0: float = 0.0) -> tuple[int, np.ndarray]:
    times = [float(s) for s in times]
    steps = np.array([steps_between(t0, t0 + s, dt) for s in times], dtype=np.int64)
    return int(steps.max()) if steps.size else 0, steps


def estimate_V(model: CoefficientSet, phi: TestFunction, s: float, x, n_paths: int, seed: int,
               dt: float = 1e-3) -> tuple[float, float]:
    """Monte Carlo ``(mean, stderr)`` of ``phi(X_s^x)`` started at time 0."""
    s = float(s)
    if s < 0:
        raise ValueError("s must be >= 0")
    x = _point(x, model.dim)
    if s == 0:
        return float(phi(x)), 0.0
    n, steps = _grid_steps([s], dt)
    st = run_states(model, x.reshape(1, 1, -1), int(n_paths), seed, t_base=0.0, step_offset=0,
                    dt=dt, n_steps=n, rec_steps=steps)
    return mean_stderr(phi(st[:, 0, 0, :]))


def _require(phi: TestFunction, order: int):
    if phi.grad is None or (order == 2 and phi.hess is None):
        raise CapabilityError(f"test function {phi.name!r} lacks the derivatives for order {order}")


def _pathwise_samples(phi: TestFunction, X, J, Kv, order: int) -> np.ndarray:
    """Per-path derivative samples; ``(..., d)`` for order 1 and ``(...)`` for order 2."""
    g = phi.grad(X)
    if order == 1:
        return np.einsum("...i,...ik->...k", g, J)
    H = phi.hess(X)[..., 0, 0]
    j = J[..., 0, 0]
    return H * j * j + g[..., 0] * Kv


def estimate_dV_pathwise(model: CoefficientSet, phi: TestFunction, s: float, x, n_paths: int,
                         seed: int, dt: float = 1e-3, order: int = 1):
    """Pathwise ``d^n V(s, x)``.

    Returns
    -------
    value, stderr
        Length-``d`` arrays for ``order=1``; floats for ``order=2`` (``d == 1``).
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    _require(phi, order)
    if order == 2 and model.dim != 1:
        raise CapabilityError("pathwise second derivatives need dim == 1")
    x = _point(x, model.dim)
    if float(s) == 0:
        if order == 1:
            return np.asarray(phi.grad(x), dtype=float), np.zeros(model.dim)
        return float(phi.hess(x)[0, 0]), 0.0
    vals, ses = derivative_table(model, phi, [s], x.reshape(1, -1), n_paths, seed, dt,
                                 order=order, method="pathwise", raw=True)
    if order == 1:
        return vals[0, 0], ses[0, 0]
    return float(vals[0, 0]), float(ses[0, 0])


def _default_h(x: np.ndarray, order: int) -> float:
    scale = float(np.linalg.norm(x))
    return max(1e-3, 1e-3 * scale) if order == 1 else max(5e-3, 5e-3 * scale)


def estimate_dV_fd(model: CoefficientSet, phi: TestFunction, s: float, x, n_paths: int, seed: int,
                   dt: float = 1e-3, h: float | None = None, order: int = 1, direction: int = 0,
                   *, common_noise: bool = True) -> tuple[float, float]:
    """Central finite difference of ``V`` along basis vector ``direction``.

    With ``common_noise`` all bumped starting points share the Brownian
    increments of each path index; otherwise each uses its own stream.
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    x = _point(x, model.dim)
    if not 0 <= direction < model.dim:
        raise ValueError("direction must index a coordinate")
    h = _default_h(x, order) if h is None else float(h)
    if not h > 0:
        raise ValueError("h must be > 0")
    e = np.zeros(model.dim)
    e[direction] = 1.0
    pts = np.stack([x - h * e, x, x + h * e])
    s = float(s)
    if s == 0:
        v = phi(pts)
        return (float((v[2] - v[0]) / (2 * h)) if order == 1
                else float((v[2] - 2 * v[1] + v[0]) / (h * h))), 0.0
    n, steps = _grid_steps([s], dt)
    coef = np.array([-1.0, 0.0, 1.0]) / (2 * h) if order == 1 else np.array([1.0, -2.0, 1.0]) / (h * h)
    use = np.flatnonzero(coef)
    if common_noise:
        st = run_states(model, pts[use].reshape(1, use.size, -1), int(n_paths), seed, t_base=0.0,
                        step_offset=0, dt=dt, n_steps=n, rec_steps=steps)
        per_path = phi(st[:, 0]) @ coef[use]
        return mean_stderr(per_path)
    total, var = 0.0, 0.0
    for leg, i in enumerate(use):
        st = run_states(model, pts[i].reshape(1, 1, -1), int(n_paths), seed, t_base=0.0,
                        step_offset=0, dt=dt, n_steps=n, rec_steps=steps, leg=leg)
        mu, se = mean_stderr(phi(st[:, 0, 0]))
        total += coef[i] * mu
        var += (coef[i] * se) ** 2
    return float(total), math.sqrt(var)


def _fd_offsets(d: int, order: int, h: float):
    """Bump points and the linear maps turning their values into derivative entries.

    Returns ``(offsets (q, d), weights (q, n_entries))``: order 1 gives the
    gradient, order 2 the upper triangle of the Hessian.
    """
    offsets = [np.zeros(d)]
    rows = []

    def idx(v):
        for i, o in enumerate(offsets):
            if np.array_equal(o, v):
                return i
        offsets.append(v)
        return len(offsets) - 1

    eye = np.eye(d)
    if order == 1:
        for k in range(d):
            rows.append({idx(h * eye[k]): 1 / (2 * h), idx(-h * eye[k]): -1 / (2 * h)})
    else:
        for i in range(d):
            for j in range(i, d):
                if i == j:
                    rows.append({idx(h * eye[i]): 1 / h**2, 0: -2 / h**2, idx(-h * eye[i]): 1 / h**2})
                else:
                    a, b = eye[i] * h, eye[j] * h
                    rows.append({idx(a + b): 1 / (4 * h * h), idx(a - b): -1 / (4 * h * h),
                                 idx(-a + b): -1 / (4 * h * h), idx(-a - b): 1 / (4 * h * h)})
    weights = np.zeros((len(offsets), len(rows)))
    for c, row in enumerate(rows):
        for q, w in row.items():
            weights[q, c] += w
    return np.array(offsets), weights


def derivative_table(model: CoefficientSet, phi: TestFunction, times, xs, n_paths: int, seed: int,
                     dt: float = 1e-3, order: int = 1, method: str = "auto", h: float | None = None,
                     raw: bool = False):
    """Derivative estimates for every ``(time, x)`` cell in one simulation.

    Returns ``(values, stderrs)``. With ``raw`` they are the estimator outputs:
    order 1 gives ``(n_t, n_x, d)``, order 2 in ``d = 1`` gives ``(n_t, n_x)``.
    Otherwise they are the magnitudes ``|grad V|`` or ``|Hess V|_F``, shaped
    ``(n_t, n_x)``, with delta-method standard errors.
    """
    xs = np.asarray(xs, dtype=np.float64).reshape(-1, model.dim)
    d = model.dim
    if method == "auto":
        smooth = phi.grad is not None and (order == 1 or phi.hess is not None)
        method = "pathwise" if smooth and (order == 1 or d == 1) else "fd"
    n, steps = _grid_steps(times, dt)
    if np.any(np.diff(steps) < 0):
        raise ValueError("times must be increasing")
    if method == "pathwise":
        _require(phi, order)
        st, J, Kv = run_tangent(model, xs, int(n_paths), seed, t_base=0.0, dt=dt, n_steps=n,
                                rec_steps=steps, order=order)
        samples = _pathwise_samples(phi, st, J, Kv, order)  # (n, r, q[, d])
        samples = samples.reshape(samples.shape[0], -1)
        mean, se = column_mean_stderr(samples)
        shape = (len(steps), xs.shape[0]) + ((d,) if order == 1 else ())
        mean, se = mean.reshape(shape), se.reshape(shape)
        if raw:
            return mean, se
        if order == 1:
            return _vector_magnitude(mean, se)
        return np.abs(mean), se
    if method != "fd":
        raise ValueError("method must be 'auto', 'pathwise' or 'fd'")
    vals = np.empty((len(steps), xs.shape[0], d if order == 1 else d * (d + 1) // 2))
    ses = np.empty_like(vals)
    for q, x in enumerate(xs):
        step = _default_h(x, order) if h is None else float(h)
        offs, weights = _fd_offsets(d, order, step)
        pts = (x + offs).reshape(1, -1, d)
        st = run_states(model, pts, int(n_paths), seed, t_base=0.0, step_offset=0, dt=dt,
                        n_steps=n, rec_steps=steps)
        for r in range(len(steps)):
            per_path = phi(st[:, r]) @ weights
            m, e = column_mean_stderr(per_path)
            vals[r, q], ses[r, q] = m, e
    if raw:
        if order == 2 and d == 1:
            return vals[..., 0], ses[..., 0]
        return vals, ses
    if order == 2:
        # off-diagonal entries count twice in the Frobenius norm
        mult = np.array([1.0 if i == j else 2.0 for i in range(d) for j in range(i, d)])
        return _vector_magnitude(vals * np.sqrt(mult), ses * np.sqrt(mult))
    return _vector_magnitude(vals, ses)


def _vector_magnitude(v: np.ndarray, se: np.ndarray):
    mag = np.sqrt(np.sum(v * v, axis=-1))
    with np.errstate(invalid="ignore", divide="ignore"):
        w = np.where(mag[..., None] > 0, v / mag[..., None], 1.0 / np.sqrt(v.shape[-1]))
    return mag, np.sqrt(np.sum((w * se) ** 2, axis=-1))


# ---------------------------------------------------------------------------
# Rate fit and envelope check
# ---------------------------------------------------------------------------
def fit_decay_rate(times, values, stderrs) -> tuple[float, float, float]:
    """Weighted least squares of ``log(values)`` on ``times``.

    Weights are ``(value / stderr)^2``; when every stderr is zero the weights
    are equal. The 95% half-width uses the known-variance slope error,
    inflated by the reduced chi-square (with Student-t quantile) when the
    scatter exceeds the stated errors.

    Returns
    -------
    slope, intercept, slope_halfwidth
    """
    t = np.asarray(times, dtype=np.float64).reshape(-1)
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    e = np.asarray(stderrs, dtype=np.float64).reshape(-1)
    if not (t.size == v.size == e.size):
        raise ValueError("times, values and stderrs must have equal length")
    if t.size < 3:
        raise ValueError("need at least 3 points to fit a decay rate")
    if np.any(~(v > 0)):
        raise ValueError("values must be > 0 (floor them at the stderr level first)")
    if np.any(e < 0) or not np.all(np.isfinite(e)):
        raise ValueError("stderrs must be finite and >= 0")
    rel = e / v
    if np.all(rel == 0):
        w = np.ones_like(v)
        known = False
    else:
        w = 1.0 / np.maximum(rel, 1e-12 * rel.max()) ** 2
        known = True
    y = np.log(v)
    W = w.sum()
    tb = (w * t).sum() / W
    yb = (w * y).sum() / W
    sxx = (w * (t - tb) ** 2).sum()
    if sxx <= 0:
        raise ValueError("times must not all coincide")
    slope = (w * (t - tb) * (y - yb)).sum() / sxx
    intercept = yb - slope * tb
    resid = y - (intercept + slope * t)
    dof = t.size - 2
    chi2 = (w * resid**2).sum() / dof
    if known and chi2 <= 1.0:
        half = 1.959963984540054 * math.sqrt(1.0 / sxx)
    else:
        half = float(sps.t.ppf(0.975, dof)) * math.sqrt(chi2 / sxx)
    return float(slope), float(intercept), float(half)


def default_x_grid(dim: int, n: int = 9, lo: float = -2.0, hi: float = 2.0) -> np.ndarray:
    """``n`` uniform points per coordinate on ``[lo, hi]^d`` (tensor grid)."""
    if dim > 2:
        raise ValueError("the default grid is defined for dim <= 2; pass x_grid explicitly")
    axis = np.linspace(lo, hi, n)
    if dim == 1:
        return axis.reshape(-1, 1)
    a, b = np.meshgrid(axis, axis, indexing="ij")
    return np.stack([a.ravel(), b.ravel()], axis=1)


def report_from_table(times, xs, cell_values, cell_stderrs, envelope: DecayEnvelope, order: int,
                      tolerance: float, theoretical: float | None = None,
                      convention: str | None = None, meta: dict | None = None) -> DecayReport:
    """Turn per-cell derivative magnitudes into a :class:`DecayReport`."""
    times = np.asarray(times, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)
    hx = np.atleast_1d(envelope.h(xs))
    scaled = cell_values / hx[None, :]
    scaled_se = cell_stderrs / hx[None, :]
    arg = np.argmax(scaled, axis=1)
    rows = np.arange(times.size)
    r = scaled[rows, arg]
    se = scaled_se[rows, arg]
    censored = r <= 2.0 * se
    keep = ~censored
    slope = intercept = half = None
    checks: dict[str, Any] = {}
    if keep.sum() >= 3:
        slope, intercept, half = fit_decay_rate(times[keep], r[keep], se[keep])
        checks["slope"] = {"pass": bool(slope <= -envelope.rate + tolerance),
                           "bound": -envelope.rate + tolerance}
    else:
        checks["slope"] = {"pass": True, "skipped": f"{int(keep.sum())} uncensored points"}
    C_hat = None
    if keep.any():
        first = int(np.flatnonzero(keep)[0])
        G = envelope.G(times)
        C_hat = float(r[first] / G[first])
        bound = C_hat * G * (1 + tolerance)
        ok = bool(np.all(r[keep] <= bound[keep]))
        checks["envelope"] = {"pass": ok, "bound": bound.tolist()}
    else:
        checks["envelope"] = {"pass": True, "skipped": "all values censored"}
    verdict = all(c["pass"] for c in checks.values())
    return DecayReport(
        times=times, values=r, stderrs=se, censored=censored, argmax_x=xs[arg],
        fitted_slope=slope, intercept=intercept, slope_halfwidth=half,
        theoretical_rate=theoretical if theoretical is not None else envelope.rate,
        rate_convention=convention or envelope.convention, verdict=verdict,
        tolerance=float(tolerance), order=int(order), x_grid=xs, cell_values=cell_values,
        cell_stderrs=cell_stderrs, envelope=envelope, C_hat=C_hat, checks=checks,
        meta=dict(meta or {}),
    )


def envelope_check(model: CoefficientSet, phi: TestFunction, envelope: DecayEnvelope,
                   x_grid=None, times=(1.5, 2.0, 3.0, 4.0), order: int = 1,
                   n_paths: int = 100_000, seed: int = 0, dt: float = 1e-3,
                   tolerance: float = 0.1, method: str = "auto") -> DecayReport:
    """Check ``|d^n V(s, x)| <= h(x) G(s)`` on a grid of starting points.

    Computes ``r(s) = max_x |d^n V(s, x)| / h(x)``. Values at or below twice
    their standard error are censored (excluded from the fit). The verdict
    passes iff (a) the fitted log-slope is ``<= -rate + tolerance`` and (b)
    ``r(s) <= C_hat G(s) (1 + tolerance)`` for every uncensored ``s``, with
    ``C_hat = r(s_1) / G(s_1)`` at the first uncensored time.
    """
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    if times.size == 0 or np.any(times <= 1.0):
        raise ValueError("envelope times must all exceed 1")
    if np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    xs = default_x_grid(model.dim) if x_grid is None else np.asarray(x_grid, dtype=np.float64).reshape(-1, model.dim)
    vals, ses = derivative_table(model, phi, times, xs, n_paths, seed, dt, order=order, method=method)
    meta = {"model": model.name, "phi": phi.name, "family": phi.family.describe(),
            "n_paths": int(n_paths), "seed": int(seed), "dt": float(dt), "method": method}
    return report_from_table(times, xs, vals, ses, envelope, order, tolerance, meta=meta)
