"""Mean-field (McKean-Vlasov) dynamics through particles and frozen law flows.

``dX = beta(X, L(X_t)) dt + Sigma(X, L(X_t)) dB`` is approximated by ``N``
interacting particles. Substituting the resulting cloud flow into
``beta`` gives an ordinary non-autonomous SDE, the frozen-law process ``Y``,
whose law started from the same point should match the particles.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels as K
from ._jit import evaluator, evaluator_kind
from .errors import SimulationDiverged
from .lyapunov import check_monotonicity
from .measures import EmpiricalMeasure
from .models import CoefficientSet, ModelFlags
from .models import _diag_diffusion, _ou_jacobian, _zero_scalar, _zero_tensor  # shared evaluators
from .rng import split_seed
from .sensitivity import DecayEnvelope, DecayReport, TestFunction, derivative_table, report_from_table
from .simulate import TimeGrid, init_rng, simulate_paths
from .stats import ks_2samp_stat, ks_threshold, mean_stderr

__all__ = [
    "MVCoefficientSet",
    "LawFlow",
    "MVConsistency",
    "mean_field_linear",
    "simulate_particles",
    "freeze_law_flow",
    "mv_consistency",
    "mv_derivative_decay",
    "FLOW_LEG",
    "LOW_N",
]

# noise leg of the particle system; frozen-flow paths use leg 0
FLOW_LEG = 9
# below this particle count reports flag finite-N bias
LOW_N = 100
_TAG_CHECK_POINTS = 16


@dataclass(frozen=True, eq=False)
class MVCoefficientSet:
    """Mean-field coefficients ``beta(x, mu)`` and ``Sigma(x, mu)``.

    Parameters
    ----------
    drift_mv, diffusion_mv : compiled evaluators
        Kinds ``mv_vector`` and ``mv_matrix``: ``f(X, cloud, params, out)``
        with the current cloud as an ``(N, d)`` array.
    structure : dict
        ``{"kind": "mean_field_linear", "a": a, "c": c}`` for
        ``beta = -a x + c mean(mu)`` with constant diagonal noise, otherwise
        ``{"kind": "general"}``.
    additive_noise : bool
        ``Sigma`` depends on neither ``x`` nor ``mu``.
    """

    name: str
    dim: int
    drift_mv: object
    diffusion_mv: object
    params: np.ndarray
    structure: dict = field(default_factory=lambda: {"kind": "general"})
    additive_noise: bool = False

    def __post_init__(self):
        object.__setattr__(self, "params", np.array(self.params, dtype=np.float64).ravel())
        object.__setattr__(self, "structure", dict(self.structure))
        if evaluator_kind(self.drift_mv) != "mv_vector":
            raise TypeError("drift_mv must be a compiled mv_vector evaluator")
        if evaluator_kind(self.diffusion_mv) != "mv_matrix":
            raise TypeError("diffusion_mv must be a compiled mv_matrix evaluator")
        kind = self.structure.get("kind")
        if kind not in ("mean_field_linear", "general"):
            raise ValueError("structure kind must be 'mean_field_linear' or 'general'")
        if kind == "mean_field_linear":
            self._check_linear_tag()

    def _check_linear_tag(self):
        a, c = float(self.structure["a"]), float(self.structure["c"])
        rng = np.random.default_rng(0)
        X = rng.uniform(-5, 5, size=(_TAG_CHECK_POINTS, self.dim))
        cloud = rng.uniform(-5, 5, size=(2 * _TAG_CHECK_POINTS, self.dim))
        got = self.drift(X, cloud)
        want = -a * X + c * cloud.mean(axis=0)
        if not np.allclose(got, want, rtol=1e-12, atol=1e-12):
            raise ValueError("drift_mv does not match the mean_field_linear formula")

    @property
    def interaction(self) -> float | None:
        """Interaction strength ``c`` for the linear structure."""
        return float(self.structure["c"]) if self.structure["kind"] == "mean_field_linear" else None

    def drift(self, X, cloud) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64).reshape(-1, self.dim)
        cloud = np.ascontiguousarray(cloud, dtype=np.float64).reshape(-1, self.dim)
        out = np.empty_like(X)
        self.drift_mv(X, cloud, self.params, out)
        return out

    def diffusion(self, X, cloud) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64).reshape(-1, self.dim)
        cloud = np.ascontiguousarray(cloud, dtype=np.float64).reshape(-1, self.dim)
        out = np.empty((X.shape[0], self.dim, self.dim))
        self.diffusion_mv(X, cloud, self.params, out)
        return out


# mean_field_linear: params = [a, sigma_1..sigma_d, c]
@evaluator("mv_vector", cache=True)
def _linear_mv_drift(x, cloud, p, out):
    d = x.shape[1]
    n = cloud.shape[0]
    a = p[0]
    c = p[1 + d]
    for i in range(d):
        s = 0.0
        for j in range(n):
            s += cloud[j, i]
        m = s / n
        for r in range(x.shape[0]):
            out[r, i] = -a * x[r, i] + c * m


@evaluator("mv_matrix", cache=True)
def _diag_mv_diffusion(x, cloud, p, out):
    d = x.shape[1]
    for r in range(x.shape[0]):
        for i in range(d):
            for j in range(d):
                out[r, i, j] = p[1 + i] if i == j else 0.0


def mean_field_linear(a: float = 2.0, c: float = 0.5, sigma=1.0, dim: int = 1) -> MVCoefficientSet:
    """``beta(x, mu) = -a x + c mean(mu)`` with constant diagonal ``sigma``."""
    a, c, dim = float(a), float(c), int(dim)
    s = np.asarray(sigma, dtype=np.float64).reshape(-1)
    s = np.full(dim, s[0]) if s.size == 1 else s
    if s.size != dim or np.any(s < 0):
        raise ValueError(f"sigma must be a scalar or {dim} non-negative entries")
    return MVCoefficientSet(
        name="mean_field_linear", dim=dim, drift_mv=_linear_mv_drift,
        diffusion_mv=_diag_mv_diffusion, params=np.concatenate([[a], s, [c]]),
        structure={"kind": "mean_field_linear", "a": a, "c": c, "sigma": s.tolist()},
        additive_noise=True)


# ---------------------------------------------------------------------------
# Particle system
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class LawFlow:
    """Particle clouds recorded on a uniform time grid, ``clouds[k]`` at ``times[k]``."""

    times: np.ndarray
    clouds: np.ndarray
    N: int
    seed: int
    dt: float
    name: str = ""

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def record_dt(self) -> float:
        return float(self.times[1] - self.times[0]) if self.times.size > 1 else math.inf

    def nearest_index(self, t: float) -> int:
        """Index of the recorded time nearest to ``t`` (ties go to the later time)."""
        t = float(t)
        if t < self.times[0] - 1e-12 or t > self.horizon * (1 + 1e-12) + 1e-12:
            raise ValueError(f"t={t} lies outside the flow [{self.times[0]}, {self.horizon}]")
        if self.times.size == 1:
            return 0
        k = math.floor((t - self.times[0]) / self.record_dt + 0.5)
        return int(min(max(k, 0), self.times.size - 1))

    def cloud(self, t: float) -> EmpiricalMeasure:
        k = self.nearest_index(t)
        return EmpiricalMeasure(self.clouds[k], meta={"time": float(self.times[k]), "N": self.N,
                                                      "seed": self.seed, "flow": self.name})

    def means(self) -> np.ndarray:
        return self.clouds.mean(axis=1)

    def to_csv(self, directory) -> list[Path]:
        """One measures CSV (plus JSON sidecar with the time) per recorded time."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        width = len(str(self.times.size - 1))
        paths = []
        for k, t in enumerate(self.times):
            path = directory / f"cloud_{k:0{width}d}.csv"
            self.cloud(t).to_csv(path)
            paths.append(path)
        return paths


def _particle_init(mv: MVCoefficientSet, init, N: int, seed: int, leg: int) -> np.ndarray:
    if callable(init):
        x = np.asarray(init(N, init_rng(seed, leg)), dtype=np.float64).reshape(N, mv.dim)
    else:
        arr = np.asarray(init, dtype=np.float64)
        x = arr.reshape(N, mv.dim) if arr.size == N * mv.dim and arr.ndim == 2 else \
            np.broadcast_to(arr.reshape(mv.dim), (N, mv.dim))
    if not np.all(np.isfinite(x)):
        raise ValueError("initial particles must be finite")
    return np.ascontiguousarray(x, dtype=np.float64)


def simulate_particles(mv: MVCoefficientSet, init, N: int, grid: TimeGrid, seed: int, *,
                       record_every: int = 1, leg: int = FLOW_LEG) -> LawFlow:
    """Euler scheme of ``N`` particles interacting through their empirical cloud.

    Parameters
    ----------
    init : array_like or callable
        A point, an ``(N, d)`` array or a sampler ``init(n, rng)``.
    record_every : int
        Store the cloud every this many steps; must divide the step count.

    Raises
    ------
    SimulationDiverged
        With the index of the first particle that left the floats.
    """
    N = int(N)
    if N < 2:
        raise ValueError("a particle system needs N >= 2")
    record_every = int(record_every)
    if record_every < 1 or grid.n_steps % record_every:
        raise ValueError("record_every must be positive and divide the number of steps")
    rec = np.arange(0, grid.n_steps + 1, record_every, dtype=np.int64)
    x0 = _particle_init(mv, init, N, seed, leg)
    clouds = np.empty((rec.size, N, mv.dim))
    fail = np.full((K.n_blocks(N), 2), -1, dtype=np.int64)
    k0, k1 = split_seed(seed)
    K.particle_paths(mv.drift_mv, mv.diffusion_mv, mv.params, x0, float(grid.dt), int(grid.n_steps),
                     rec, k0, k1, int(leg), bool(mv.additive_noise), clouds, fail)
    bad = fail[:, 0] >= 0
    if np.any(bad):
        rows = fail[bad]
        i = int(np.argmin(rows[:, 0]))
        raise SimulationDiverged(rows[i, 0], rows[i, 1], "particle")
    times = grid.t0 + rec * grid.dt
    clouds.setflags(write=False)
    times.setflags(write=False)
    return LawFlow(times=times, clouds=clouds, N=N, seed=int(seed), dt=float(grid.dt), name=mv.name)


# ---------------------------------------------------------------------------
# Frozen law flow
# ---------------------------------------------------------------------------
@evaluator("vector", cache=True)
def _frozen_linear_drift(t, x, p, out):
    # p = [a, sigma_1..sigma_d, c, t0, record_dt, n_times, means (n_times x d)]
    d = x.shape[1]
    a = p[0]
    c = p[1 + d]
    t0 = p[2 + d]
    step = p[3 + d]
    n_t = int(p[4 + d])
    k = 0
    if n_t > 1:
        k = int(math.floor((t - t0) / step + 0.5))
        k = min(max(k, 0), n_t - 1)
    base = 5 + d + k * d
    for r in range(x.shape[0]):
        for i in range(d):
            out[r, i] = -a * x[r, i] + c * p[base + i]


def _frozen_general(beta, sigma):
    # p = [t0, record_dt, n_times, N, d, n_mv, mv params..., clouds (n_times x N x d)]
    @evaluator("vector")
    def drift(t, x, p, out):
        n_t = int(p[2])
        n = int(p[3])
        d = int(p[4])
        lp = int(p[5])
        k = 0
        if n_t > 1:
            k = int(math.floor((t - p[0]) / p[1] + 0.5))
            k = min(max(k, 0), n_t - 1)
        off = 6 + lp + k * n * d
        beta(x, p[off:off + n * d].reshape((n, d)), p[6:6 + lp], out)

    @evaluator("matrix")
    def diffusion(t, x, p, out):
        n_t = int(p[2])
        n = int(p[3])
        d = int(p[4])
        lp = int(p[5])
        k = 0
        if n_t > 1:
            k = int(math.floor((t - p[0]) / p[1] + 0.5))
            k = min(max(k, 0), n_t - 1)
        off = 6 + lp + k * n * d
        sigma(x, p[off:off + n * d].reshape((n, d)), p[6:6 + lp], out)

    return drift, diffusion


def freeze_law_flow(mv: MVCoefficientSet, flow: LawFlow) -> CoefficientSet:
    """Non-autonomous coefficients ``b(t, x) = beta(x, cloud(t))`` (nearest recorded time).

    The result is only defined up to the flow horizon. For the linear
    structure the drift reads the cloud means; the space Jacobian ``-a I``
    does not depend on the cloud.
    """
    if flow.clouds.shape[2] != mv.dim:
        raise ValueError("flow and coefficients differ in dimension")
    header = [float(flow.times[0]), flow.record_dt if flow.times.size > 1 else 1.0,
              float(flow.times.size)]
    d = mv.dim
    info = {"frozen_from": mv.name, "N": flow.N, "flow_seed": flow.seed, "record_dt": header[1]}
    c = mv.interaction
    if mv.structure["kind"] == "mean_field_linear":
        s = np.asarray(mv.structure["sigma"], dtype=np.float64)
        params = np.concatenate([[mv.structure["a"]], s, [c], header, flow.means().ravel()])
        hess = _zero_scalar if d == 1 else None
        return CoefficientSet(
            name=f"frozen:{mv.name}", dim=d, drift=_frozen_linear_drift, diffusion=_diag_diffusion,
            params=params, drift_jacobian=_ou_jacobian, diffusion_jacobian=_zero_tensor,
            drift_hessian=hess, diffusion_hessian=hess,
            flags=ModelFlags(time_homogeneous=(c == 0), additive_noise=True),
            horizon=flow.horizon if flow.horizon > 0 else math.inf, info=info)
    drift, diffusion = _frozen_general(mv.drift_mv, mv.diffusion_mv)
    params = np.concatenate([header, [float(flow.N), float(d), float(mv.params.size)], mv.params,
                             np.ascontiguousarray(flow.clouds).ravel()])
    return CoefficientSet(
        name=f"frozen:{mv.name}", dim=d, drift=drift, diffusion=diffusion, params=params,
        flags=ModelFlags(additive_noise=mv.additive_noise),
        horizon=flow.horizon if flow.horizon > 0 else math.inf, info=info)


# ---------------------------------------------------------------------------
# Consistency and derivative decay
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class MVConsistency:
    """Particle marginal versus frozen-flow paths at time ``s``.

    Moments pass iff ``|gap| <= n_sigma * combined stderr + 1/N``; KS passes
    iff below the 1% two-sample threshold plus ``1/N``.
    """

    s: float
    N: int
    n_paths: int
    particle_mean: tuple[float, ...]
    particle_mean_se: tuple[float, ...]
    frozen_mean: tuple[float, ...]
    frozen_mean_se: tuple[float, ...]
    mean_gap: tuple[float, ...]
    second_gap: tuple[float, ...]
    mean_tol: tuple[float, ...]
    second_tol: tuple[float, ...]
    ks: float
    ks_threshold: float
    allowance: float
    low_N: bool
    passed: bool

    def __iter__(self):
        return iter(((self.mean_gap, self.second_gap), self.ks, self.passed))

    def to_dict(self) -> dict:
        from dataclasses import asdict
        return asdict(self)


def mv_consistency(mv: MVCoefficientSet, x, s: float, N: int, n_paths: int, seed: int,
                   dt: float = 1e-3, *, n_sigma: float = 4.0, flow: LawFlow | None = None) -> MVConsistency:
    """Compare one particle's law at ``s`` with ``Y_s`` driven by the frozen flow from ``x``.

    The particle system starts from the point mass at ``x``. Particles are
    exchangeable, so the whole cloud serves as the single-particle sample.
    """
    x = np.asarray(x, dtype=np.float64).reshape(mv.dim)
    grid = TimeGrid(0.0, float(s), dt)
    flow = simulate_particles(mv, x, N, grid, seed) if flow is None else flow
    frozen = freeze_law_flow(mv, flow)
    cloud = flow.clouds[flow.nearest_index(s)]
    ys = simulate_paths(frozen, grid, x, n_paths, seed, leg=0).terminal()
    N = flow.N
    allowance = 1.0 / N
    pm, pse, fm, fse, mgap, sgap, mtol, stol, ks_stats = ([] for _ in range(9))
    for i in range(mv.dim):
        a, b = cloud[:, i], ys[:, i]
        ma, sa = mean_stderr(a)
        mb, sb = mean_stderr(b)
        qa, qsa = mean_stderr(a * a)
        qb, qsb = mean_stderr(b * b)
        pm.append(ma), pse.append(sa), fm.append(mb), fse.append(sb)
        mgap.append(ma - mb)
        sgap.append(qa - qb)
        mtol.append(n_sigma * math.hypot(sa, sb) + allowance)
        stol.append(n_sigma * math.hypot(qsa, qsb) + allowance)
        ks_stats.append(ks_2samp_stat(a, b))
    ks = max(ks_stats)
    thr = ks_threshold(N, int(n_paths))
    ok = (all(abs(g) <= t for g, t in zip(mgap, mtol)) and all(abs(g) <= t for g, t in zip(sgap, stol))
          and ks < thr + allowance)
    return MVConsistency(s=float(s), N=N, n_paths=int(n_paths),
                         particle_mean=tuple(pm), particle_mean_se=tuple(pse),
                         frozen_mean=tuple(fm), frozen_mean_se=tuple(fse),
                         mean_gap=tuple(mgap), second_gap=tuple(sgap),
                         mean_tol=tuple(mtol), second_tol=tuple(stol),
                         ks=ks, ks_threshold=thr, allowance=allowance, low_N=N < LOW_N, passed=bool(ok))


def mv_derivative_decay(mv: MVCoefficientSet, x_grid, times, phi: TestFunction, order: int, N: int,
                        n_paths: int, seed: int, dt: float, envelope: DecayEnvelope, *,
                        tolerance: float = 0.1, method: str = "auto") -> DecayReport:
    """Decay of ``d^n_y V(s, y; x)`` at ``y = x`` for the frozen flow started from ``x``.

    A fresh particle flow from the point mass at each ``x`` is frozen, and the
    derivative with respect to the starting point of ``Y`` is estimated as in
    :func:`sdedecay.sensitivity.envelope_check`. The derivative of the flow
    itself with respect to ``x`` is not estimated. The monotonicity constant
    of each frozen drift is recorded in ``meta``.
    """
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    if times.size == 0 or np.any(times <= 0) or np.any(np.diff(times) <= 0):
        raise ValueError("times must be positive and strictly increasing")
    xs = np.asarray(x_grid, dtype=np.float64).reshape(-1, mv.dim)
    grid = TimeGrid(0.0, float(times[-1]), dt)
    vals = np.empty((times.size, xs.shape[0]))
    ses = np.empty_like(vals)
    monotonicity = []
    for q, x in enumerate(xs):
        flow = simulate_particles(mv, x, N, grid, seed)
        frozen = freeze_law_flow(mv, flow)
        v, e = derivative_table(frozen, phi, times, x.reshape(1, -1), n_paths, seed, dt,
                                order=order, method=method)
        vals[:, q], ses[:, q] = v[:, 0], e[:, 0]
        monotonicity.append(check_monotonicity(frozen, 2, t_range=(0.0, frozen.horizon), seed=seed).M1_est)
    meta = {"model": mv.name, "structure": mv.structure, "phi": phi.name, "N": int(N),
            "n_paths": int(n_paths), "seed": int(seed), "dt": float(dt), "method": method,
            "frozen_monotonicity_M1": monotonicity,
            "estimated_term": "derivative in the starting point of Y only"}
    return report_from_table(times, xs, vals, ses, envelope, order, tolerance, meta=meta)
