"""Tamed Euler-Maruyama simulation with tangent flows, couplings and restarts.

Scheme::

    X_{k+1} = X_k + b~(t_k, X_k) dt + sigma(t_k, X_k) dB_k,   dB_k ~ N(0, dt I)

with ``b~ = b / (1 + dt |b|)`` for models flagged ``superlinear_drift`` and
``b~ = b`` otherwise. Brownian increments come from :mod:`sdedecay.rng` and
depend only on ``(seed, path, leg, step, component)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _kernels as K
from .errors import CapabilityError, SimulationDiverged
from .models import CoefficientSet
from .rng import split_seed

__all__ = [
    "TimeGrid",
    "PathEnsemble",
    "TangentEnsemble",
    "simulate_paths",
    "simulate_with_tangent",
    "couple_paths",
    "simulate_two_leg",
    "init_rng",
]

_GRID_RTOL = 1e-12
_POINT_RTOL = 1e-9


def _readonly(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t0, t0 + dt, ..., horizon``."""

    t0: float
    horizon: float
    dt: float
    n_steps: int = field(init=False)

    def __post_init__(self):
        t0, horizon, dt = float(self.t0), float(self.horizon), float(self.dt)
        if not (math.isfinite(t0) and math.isfinite(horizon) and math.isfinite(dt)):
            raise ValueError("grid values must be finite")
        if t0 < 0:
            raise ValueError(f"t0 must be >= 0, got {t0}")
        if not horizon > t0:
            raise ValueError(f"horizon must exceed t0 (t0={t0}, horizon={horizon})")
        if not dt > 0:
            raise ValueError(f"dt must be > 0, got {dt}")
        n = steps_between(t0, horizon, dt)
        object.__setattr__(self, "t0", t0)
        object.__setattr__(self, "horizon", horizon)
        object.__setattr__(self, "dt", dt)
        object.__setattr__(self, "n_steps", n)

    def time(self, k: int) -> float:
        return self.t0 + k * self.dt

    def index_of(self, t: float) -> int:
        """Step index of grid time ``t``; raises if ``t`` is not a grid point."""
        t = float(t)
        k = round((t - self.t0) / self.dt)
        if k < 0 or k > self.n_steps or abs(self.time(k) - t) > _POINT_RTOL * max(1.0, abs(t)):
            raise ValueError(f"time {t} is not a point of the grid {self}")
        return int(k)


def steps_between(t0: float, t1: float, dt: float) -> int:
    """``(t1 - t0) / dt`` as an integer, or ValueError if dt does not divide the span."""
    n = round((t1 - t0) / dt)
    if n < 0 or abs(t0 + n * dt - t1) > _GRID_RTOL * max(1.0, abs(t1)):
        raise ValueError(f"dt={dt} does not divide [{t0}, {t1}] into whole steps")
    return int(n)


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """States ``X[path, record, :]`` of ``n_paths`` independent paths at ``times``."""

    n_paths: int
    dim: int
    times: np.ndarray
    states: np.ndarray
    seed: int
    model_name: str

    def at(self, t: float) -> np.ndarray:
        """States at recorded time ``t`` as an ``(n_paths, d)`` array."""
        idx = np.flatnonzero(np.abs(self.times - t) <= _POINT_RTOL * max(1.0, abs(t)))
        if idx.size == 0:
            raise KeyError(f"time {t} was not recorded")
        return self.states[:, idx[0], :]

    def terminal(self) -> np.ndarray:
        return self.states[:, -1, :]


@dataclass(frozen=True, eq=False)
class TangentEnsemble:
    """First variation ``J[path, record, i, k]`` and optional second variation ``K``."""

    first: np.ndarray
    second: np.ndarray | None = None


def init_rng(seed: int, leg: int = 0) -> np.random.Generator:
    """Generator used to draw random initial conditions for ``(seed, leg)``."""
    split_seed(seed)
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(leg), 0x1517]))


def _as_point(x, dim: int) -> np.ndarray:
    x = np.array(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != dim:
        raise ValueError(f"initial point must have {dim} components, got {x.shape[0]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("initial point must be finite")
    return x


def _initial_states(model: CoefficientSet, init, n_paths: int, seed: int, leg: int) -> np.ndarray:
    """Return ``x0`` shaped ``(1 or n_paths, 1, d)``."""
    d = model.dim
    if callable(init):
        x = np.asarray(init(n_paths, init_rng(seed, leg)), dtype=np.float64)
        x = x.reshape(n_paths, d)
    else:
        arr = np.asarray(init, dtype=np.float64)
        if arr.ndim == 2 and arr.shape == (n_paths, d):
            x = arr
        else:
            return _as_point(arr, d).reshape(1, 1, d).copy()
    if not np.all(np.isfinite(x)):
        raise ValueError("initial states must be finite")
    return np.ascontiguousarray(x.reshape(n_paths, 1, d))


def _check_common(model: CoefficientSet, n_paths: int, t_end: float):
    if int(n_paths) != n_paths or n_paths < 1:
        raise ValueError(f"n_paths must be a positive integer, got {n_paths}")
    if n_paths > (1 << 32):
        raise ValueError("n_paths must be < 2**32")
    if t_end > model.horizon * (1 + _GRID_RTOL):
        raise ValueError(f"simulation end {t_end} lies beyond the model horizon {model.horizon}")


def _raise_on_failure(fail: np.ndarray, what: str = "path"):
    bad = fail[:, 0] >= 0
    if np.any(bad):
        rows = fail[bad]
        i = int(np.argmin(rows[:, 0]))
        raise SimulationDiverged(rows[i, 0], rows[i, 1], what)


def run_states(model: CoefficientSet, x0: np.ndarray, n_paths: int, seed: int, *,
               t_base: float, step_offset: int, dt: float, n_steps: int,
               rec_steps, leg: int = 0) -> np.ndarray:
    """Low-level runner returning ``states[path, record, init, :]``.

    ``x0`` is ``(1 or n_paths, n_init, d)``; rows of one path share noise.
    """
    k0, k1 = split_seed(seed)
    x0 = np.ascontiguousarray(x0, dtype=np.float64)
    rec = np.ascontiguousarray(rec_steps, dtype=np.int64)
    if rec.size and (np.any(np.diff(rec) < 0) or rec[0] < 0 or rec[-1] > n_steps):
        raise ValueError("record steps must be sorted and lie in [0, n_steps]")
    if x0.shape[0] not in (1, n_paths):
        raise ValueError("x0 must hold one initial block or one per path")
    _check_common(model, n_paths, t_base + (step_offset + n_steps) * dt)
    states = np.empty((n_paths, rec.size, x0.shape[1], model.dim))
    fail = np.full((K.n_blocks(n_paths), 2), -1, dtype=np.int64)
    K.euler_paths(model.drift, model.diffusion, model.params, x0, float(t_base), int(step_offset),
                  float(dt), int(n_steps), rec, k0, k1, int(leg),
                  bool(model.flags.superlinear_drift), bool(model.flags.additive_noise), states, fail)
    _raise_on_failure(fail)
    return states


def _tangent_modes(model: CoefficientSet, order: int):
    from ._jit import ABSENT

    jac = model.drift_jacobian or ABSENT["matrix"]
    jac_mode = K.ANALYTIC if model.drift_jacobian is not None else K.FD
    if model.flags.additive_noise:
        djac, djac_mode = ABSENT["tensor"], K.ZERO
    elif model.diffusion_jacobian is not None:
        djac, djac_mode = model.diffusion_jacobian, K.ANALYTIC
    else:
        djac, djac_mode = ABSENT["tensor"], K.FD
    hess, hess_mode = ABSENT["scalar"], K.ANALYTIC
    dhess, dhess_mode = ABSENT["scalar"], K.ZERO
    if order == 2:
        if model.drift_hessian is not None:
            hess, hess_mode = model.drift_hessian, K.ANALYTIC
        elif model.drift_jacobian is not None:
            hess_mode = K.FD
        else:
            hess_mode = K.SECOND_DIFF
        if model.flags.additive_noise:
            dhess_mode = K.ZERO
        elif model.diffusion_hessian is not None:
            dhess, dhess_mode = model.diffusion_hessian, K.ANALYTIC
        elif model.diffusion_jacobian is not None:
            dhess_mode = K.FD
        else:
            dhess_mode = K.SECOND_DIFF
    return jac, djac, hess, dhess, jac_mode, djac_mode, hess_mode, dhess_mode


def run_tangent(model: CoefficientSet, x0: np.ndarray, n_paths: int, seed: int, *,
                t_base: float, dt: float, n_steps: int, rec_steps, order: int = 1, leg: int = 0):
    """Low-level tangent runner; ``x0`` is ``(n_init, d)`` shared by all paths.

    Returns ``(states, J, K)`` with shapes ``(n, r, q, d)``, ``(n, r, q, d, d)``
    and ``(n, r, q)`` (``K`` is None for order 1).
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    if order == 2 and model.dim != 1:
        raise CapabilityError("second variation is only available for dim == 1")
    k0, k1 = split_seed(seed)
    x0 = np.ascontiguousarray(np.asarray(x0, dtype=np.float64).reshape(1, -1, model.dim))
    rec = np.ascontiguousarray(rec_steps, dtype=np.int64)
    if rec.size and (np.any(np.diff(rec) < 0) or rec[0] < 0 or rec[-1] > n_steps):
        raise ValueError("record steps must be sorted and lie in [0, n_steps]")
    _check_common(model, n_paths, t_base + n_steps * dt)
    n_init, d = x0.shape[1], model.dim
    states = np.empty((n_paths, rec.size, n_init, d))
    first = np.empty((n_paths, rec.size, n_init, d, d))
    second = np.empty((n_paths, rec.size, n_init)) if order == 2 else np.empty((1, 1, 1))
    fail = np.full((K.n_blocks(n_paths), 2), -1, dtype=np.int64)
    jac, djac, hess, dhess, m_j, m_dj, m_h, m_dh = _tangent_modes(model, order)
    K.euler_tangent(model.drift, model.diffusion, jac, djac, hess, dhess, m_j, m_dj, m_h, m_dh,
                    model.params, x0, float(t_base), 0, float(dt), int(n_steps), rec, k0, k1,
                    int(leg), bool(model.flags.superlinear_drift), bool(model.flags.additive_noise),
                    order == 2,
                    states, first, second, fail)
    _raise_on_failure(fail)
    return states, first, (second if order == 2 else None)


def _record_steps(grid: TimeGrid, record_at) -> tuple[np.ndarray, np.ndarray]:
    if record_at is None:
        record_at = [grid.horizon]
    times = np.array([float(t) for t in np.atleast_1d(record_at)], dtype=np.float64)
    if times.size == 0:
        raise ValueError("record_at must contain at least one time")
    steps = np.array([grid.index_of(t) for t in times], dtype=np.int64)
    order = np.argsort(steps, kind="stable")
    if np.any(order != np.arange(order.size)):
        raise ValueError("record_at must be non-decreasing")
    return steps, np.array([grid.time(k) for k in steps])


def _ensemble(states: np.ndarray, times: np.ndarray, seed: int, model: CoefficientSet) -> PathEnsemble:
    return PathEnsemble(n_paths=states.shape[0], dim=model.dim, times=_readonly(times),
                        states=_readonly(np.ascontiguousarray(states)), seed=int(seed),
                        model_name=model.name)


def simulate_paths(model: CoefficientSet, grid: TimeGrid, init, n_paths: int, seed: int,
                   record_at=None, *, leg: int = 0) -> PathEnsemble:
    """Simulate ``n_paths`` independent paths and record them at ``record_at``.

    Parameters
    ----------
    init : array_like or callable
        A point of ``R^d``, an ``(n_paths, d)`` array of starting points, or a
        sampler ``init(n, rng) -> (n, d)`` drawn from :func:`init_rng`.
    record_at : sequence of float, optional
        Grid times to store (default: the horizon only).
    leg : int
        Noise stream index; different legs give independent increments.
    """
    steps, times = _record_steps(grid, record_at)
    x0 = _initial_states(model, init, int(n_paths), seed, leg)
    st = run_states(model, x0, int(n_paths), seed, t_base=grid.t0, step_offset=0, dt=grid.dt,
                    n_steps=grid.n_steps, rec_steps=steps, leg=leg)
    return _ensemble(st[:, :, 0, :], times, seed, model)


def simulate_with_tangent(model: CoefficientSet, grid: TimeGrid, x, n_paths: int, seed: int,
                          record_at=None, order: int = 1, *, leg: int = 0):
    """Paths from ``x`` together with their first (and second) variation flows.

    Driven by the same increments as :func:`simulate_paths` with equal
    arguments, so the states agree bit for bit.
    """
    steps, times = _record_steps(grid, record_at)
    x = _as_point(x, model.dim)
    st, J, Kv = run_tangent(model, x.reshape(1, -1), int(n_paths), seed, t_base=grid.t0,
                            dt=grid.dt, n_steps=grid.n_steps, rec_steps=steps, order=order, leg=leg)
    ens = _ensemble(st[:, :, 0, :], times, seed, model)
    tan = TangentEnsemble(first=_readonly(np.ascontiguousarray(J[:, :, 0])),
                          second=None if Kv is None else _readonly(np.ascontiguousarray(Kv[:, :, 0])))
    return ens, tan


def couple_paths(model: CoefficientSet, grid: TimeGrid, x, y, n_paths: int, seed: int,
                 record_at=None, *, leg: int = 0) -> tuple[PathEnsemble, PathEnsemble]:
    """Synchronous coupling: paths from ``x`` and ``y`` driven by identical increments."""
    steps, times = _record_steps(grid, record_at)
    x0 = np.stack([_as_point(x, model.dim), _as_point(y, model.dim)]).reshape(1, 2, model.dim)
    st = run_states(model, x0, int(n_paths), seed, t_base=grid.t0, step_offset=0, dt=grid.dt,
                    n_steps=grid.n_steps, rec_steps=steps, leg=leg)
    return _ensemble(st[:, :, 0, :], times, seed, model), _ensemble(st[:, :, 1, :], times, seed, model)


def simulate_two_leg(model: CoefficientSet, tau: float, s: float, x, n_paths: int, seed: int,
                     dt: float = 1e-3, *, legs: tuple[int, int] = (1, 2)) -> PathEnsemble:
    """Simulate ``(tau, x) -> 1`` and then restart every path ``1 -> tau + s``.

    The second leg uses a fresh noise stream, so in law the terminal states
    match a direct simulation to ``tau + s``. Both legs follow the same grid
    ``tau + k dt``, which must pass through time 1.
    """
    tau, s = float(tau), float(s)
    if not (tau >= 0 and s >= 0 and tau <= 1.0 <= tau + s):
        raise ValueError(f"need 0 <= tau <= 1 <= tau + s, got tau={tau}, s={s}")
    n_total = steps_between(tau, tau + s, dt)
    n1 = steps_between(tau, 1.0, dt)
    n2 = n_total - n1
    x = _as_point(x, model.dim)
    n_paths = int(n_paths)
    st1 = run_states(model, x.reshape(1, 1, -1), n_paths, seed, t_base=tau, step_offset=0, dt=dt,
                     n_steps=n1, rec_steps=[n1], leg=legs[0])
    st2 = run_states(model, st1[:, 0], n_paths, seed, t_base=tau, step_offset=n1, dt=dt,
                     n_steps=n2, rec_steps=[n2], leg=legs[1])
    return _ensemble(st2[:, :, 0, :], np.array([tau + n_total * dt]), seed, model)
