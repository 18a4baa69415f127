"""SDE coefficient sets, the model catalog and the generator.

A model is ``dX = b(t, X) dt + sigma(t, X) dB`` in ``R^d``. Coefficients are
batch evaluators (see :mod:`sdedecay._jit`) that read all of their constants
from a flat ``params`` vector. That lets the simulation kernels be compiled once
and shared by every model.

Catalog
-------
``ou``
    ``b = -M1 x``, constant diagonal ``sigma``.
``sine``
    ``b = sin x - (M1 + 1) x`` in ``d = 1``, constant ``sigma``.
``switching``
    ``b = -x exp(-t x + 10 (t - 0.9) x^2 - 100 (1 - t) x^2)`` in ``d = 1``. The
    drift is bounded on ``[0, 1)`` and contracts like ``-x`` or faster later.
``mv_linear``
    Frozen-law family of the linear mean-field model. The law's mean is
    ``m0 exp(-(a - c) t)``, which gives ``b = -a x + c m0 exp(-(a - c) t)``.
``decaying``
    ``b = -x (1 + exp(-t))`` with declared limit ``b_inf = -x``.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any, Callable, Mapping

import numpy as np

from . import _jit
from ._jit import evaluator
from .errors import CapabilityError

__all__ = [
    "ModelFlags",
    "CoefficientSet",
    "ModelCatalogEntry",
    "eval_drift",
    "eval_diffusion",
    "eval_drift_jacobian",
    "eval_drift_hessian",
    "eval_diffusion_jacobian",
    "eval_diffusion_hessian",
    "drift_rows",
    "diffusion_rows",
    "apply_generator",
    "limiting_model",
    "register_model",
    "unregister_model",
    "get_model",
    "list_models",
    "model_names",
    "EXP_CLAMP",
]

EXP_CLAMP = 700.0


@dataclass(frozen=True)
class ModelFlags:
    time_homogeneous: bool = False
    additive_noise: bool = False
    superlinear_drift: bool = False


_OPTIONAL_KINDS = {
    "drift_jacobian": "matrix",
    "drift_hessian": "scalar",
    "diffusion_jacobian": "tensor",
    "diffusion_hessian": "scalar",
}


@dataclass(frozen=True, eq=False)
class CoefficientSet:
    """Drift, diffusion and optional space derivatives of one SDE.

    Parameters
    ----------
    name : str
        Label carried into ensembles and reports.
    dim : int
        State dimension ``d``.
    drift, diffusion : compiled evaluators
        ``drift`` of kind ``"vector"`` and ``diffusion`` of kind ``"matrix"``.
    params : array_like
        Flat float vector handed to every evaluator.
    drift_jacobian, drift_hessian, diffusion_jacobian, diffusion_hessian
        Optional analytic derivatives; hessians only for ``d == 1``. Missing
        ones are replaced by central finite differences where needed.
    flags : ModelFlags
    limiting : CoefficientSet, optional
        Time-homogeneous coefficients ``(b_inf, sigma_inf)`` approached as
        ``t`` grows.
    horizon : float
        Largest time at which the coefficients are defined (finite for
        frozen law flows).
    info : mapping
        Free-form extras, e.g. ``{"stationary": {"mean": ..., "cov": ...}}``.
    """

    name: str
    dim: int
    drift: Any
    diffusion: Any
    params: np.ndarray = field(default_factory=lambda: np.zeros(0))
    drift_jacobian: Any = None
    drift_hessian: Any = None
    diffusion_jacobian: Any = None
    diffusion_hessian: Any = None
    flags: ModelFlags = ModelFlags()
    limiting: "CoefficientSet | None" = None
    horizon: float = math.inf
    info: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if int(self.dim) != self.dim or self.dim < 1:
            raise ValueError(f"dim must be a positive integer, got {self.dim}")
        object.__setattr__(self, "dim", int(self.dim))
        # kernels need a writeable buffer type, so immutability is by convention
        params = np.array(self.params, dtype=np.float64).ravel()
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "info", MappingProxyType(dict(self.info)))
        for name, kind in (("drift", "vector"), ("diffusion", "matrix")):
            got = _jit.evaluator_kind(getattr(self, name))
            if got != kind:
                raise TypeError(f"{name} must be a compiled {kind} evaluator")
        for name, kind in _OPTIONAL_KINDS.items():
            fn = getattr(self, name)
            if fn is not None and _jit.evaluator_kind(fn) != kind:
                raise TypeError(f"{name} must be a compiled {kind} evaluator")
        if self.dim != 1 and (self.drift_hessian is not None or self.diffusion_hessian is not None):
            raise ValueError("hessian evaluators are only supported for dim == 1")
        if self.limiting is not None:
            if self.limiting.dim != self.dim:
                raise ValueError("limiting coefficients must have the same dimension")
            if not self.limiting.flags.time_homogeneous:
                raise ValueError("limiting coefficients must be time-homogeneous")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")

    def replace(self, **changes) -> "CoefficientSet":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------------------
# Pointwise and row-wise evaluation
# ---------------------------------------------------------------------------
def _point(model: CoefficientSet, t, x) -> tuple[float, np.ndarray]:
    t = float(t)
    if not math.isfinite(t) or t < 0:
        raise ValueError(f"t must be finite and >= 0, got {t}")
    if t > model.horizon:
        raise ValueError(f"t={t} lies beyond the model horizon {model.horizon}")
    x = np.array(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != model.dim:
        raise ValueError(f"x must have {model.dim} components, got {x.shape[0]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("x must be finite")
    return t, x.reshape(1, model.dim)


def eval_drift(model: CoefficientSet, t, x) -> np.ndarray:
    """``b(t, x)`` as a length-``d`` vector."""
    t, X = _point(model, t, x)
    out = np.empty((1, model.dim))
    model.drift(t, X, model.params, out)
    return out[0]


def eval_diffusion(model: CoefficientSet, t, x) -> np.ndarray:
    """``sigma(t, x)`` as a ``d x d`` matrix."""
    t, X = _point(model, t, x)
    out = np.empty((1, model.dim, model.dim))
    model.diffusion(t, X, model.params, out)
    return out[0]


def eval_drift_jacobian(model: CoefficientSet, t, x) -> np.ndarray:
    """``d b_i / d x_k``; central differences when no analytic Jacobian is set."""
    t, X = _point(model, t, x)
    d = model.dim
    out = np.empty((1, d, d))
    if model.drift_jacobian is not None:
        model.drift_jacobian(t, X, model.params, out)
    else:
        _jit.batch_fd_jacobian_vector(model.drift, t, X, model.params, out)
    return out[0]


def eval_diffusion_jacobian(model: CoefficientSet, t, x) -> np.ndarray:
    """``d sigma_ij / d x_k`` with shape ``(d, d, d)``."""
    t, X = _point(model, t, x)
    d = model.dim
    out = np.empty((1, d, d, d))
    if model.diffusion_jacobian is not None:
        model.diffusion_jacobian(t, X, model.params, out)
    elif model.flags.additive_noise:
        out[:] = 0.0
    else:
        _jit.batch_fd_jacobian_matrix(model.diffusion, t, X, model.params, out)
    return out[0]


def eval_drift_hessian(model: CoefficientSet, t, x) -> float:
    """``b''(t, x)`` for ``d == 1``."""
    if model.dim != 1:
        raise CapabilityError("drift hessian is only available for dim == 1")
    t, X = _point(model, t, x)
    out = np.empty(1)
    if model.drift_hessian is not None:
        model.drift_hessian(t, X, model.params, out)
    elif model.drift_jacobian is not None:
        _jit.batch_fd_derivative_of_matrix(model.drift_jacobian, t, X, model.params, out)
    else:
        _jit.batch_fd_second_vector(model.drift, t, X, model.params, out)
    return float(out[0])


def eval_diffusion_hessian(model: CoefficientSet, t, x) -> float:
    """``sigma''(t, x)`` for ``d == 1``."""
    if model.dim != 1:
        raise CapabilityError("diffusion hessian is only available for dim == 1")
    t, X = _point(model, t, x)
    out = np.empty(1)
    if model.diffusion_hessian is not None:
        model.diffusion_hessian(t, X, model.params, out)
    elif model.flags.additive_noise:
        out[:] = 0.0
    elif model.diffusion_jacobian is not None:
        _jit.batch_fd_derivative_of_tensor(model.diffusion_jacobian, t, X, model.params, out)
    else:
        _jit.batch_fd_second_matrix(model.diffusion, t, X, model.params, out)
    return float(out[0])


def _rows(model: CoefficientSet, t, X) -> tuple[np.ndarray, np.ndarray]:
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, model.dim)
    if X.ndim != 2 or X.shape[1] != model.dim:
        raise ValueError(f"X must have shape (m, {model.dim})")
    ts = np.array(np.broadcast_to(np.asarray(t, dtype=np.float64), (X.shape[0],)))
    if np.any(ts < 0) or np.any(ts > model.horizon) or not np.all(np.isfinite(ts)):
        raise ValueError("times must lie in [0, horizon]")
    if not np.all(np.isfinite(X)):
        raise ValueError("X must be finite")
    return ts, X


def drift_rows(model: CoefficientSet, t, X) -> np.ndarray:
    """Drift at many points; ``t`` is a scalar or one time per row."""
    ts, X = _rows(model, t, X)
    out = np.empty_like(X)
    _jit.rows_vector(model.drift, ts, X, model.params, out)
    return out


def diffusion_rows(model: CoefficientSet, t, X) -> np.ndarray:
    """Diffusion matrices at many points, shape ``(m, d, d)``."""
    ts, X = _rows(model, t, X)
    out = np.empty((X.shape[0], model.dim, model.dim))
    _jit.rows_matrix(model.diffusion, ts, X, model.params, out)
    return out


def apply_generator(model: CoefficientSet, t, x, f) -> float:
    """``L f(x) = 1/2 tr(sigma sigma^T Hess f) + b . grad f`` at time ``t``.

    ``f`` is any object with ``grad`` and ``hess`` callables taking a point of
    ``R^d`` (``hess`` returns ``d x d``, or a scalar when ``d == 1``).
    """
    grad = getattr(f, "grad", None)
    hess = getattr(f, "hess", None)
    if grad is None or hess is None:
        raise CapabilityError("apply_generator needs gradient and hessian evaluators")
    b = eval_drift(model, t, x)
    s = eval_diffusion(model, t, x)
    xv = np.asarray(x, dtype=np.float64).reshape(model.dim)
    g = np.asarray(grad(xv), dtype=np.float64).reshape(model.dim)
    H = np.asarray(hess(xv), dtype=np.float64).reshape(model.dim, model.dim)
    return float(0.5 * np.trace(s @ s.T @ H) + b @ g)


def limiting_model(model: CoefficientSet) -> CoefficientSet:
    """Time-homogeneous coefficients ``(b_inf, sigma_inf)`` of ``model``.

    Time-homogeneous models are their own limit.
    """
    if model.limiting is not None:
        return model.limiting
    if model.flags.time_homogeneous:
        return model
    raise CapabilityError(f"model {model.name!r} declares no limiting coefficients")


# ---------------------------------------------------------------------------
# Catalog evaluators
# ---------------------------------------------------------------------------
# ou: params = [M1, sigma_1, ..., sigma_d]
@evaluator("vector", cache=True)
def _ou_drift(t, x, p, out):
    m1 = p[0]
    for r in range(x.shape[0]):
        for i in range(x.shape[1]):
            out[r, i] = -m1 * x[r, i]


@evaluator("matrix", cache=True)
def _diag_diffusion(t, x, p, out):
    # constant diagonal sigma stored in p[1:1+d]
    d = x.shape[1]
    for r in range(x.shape[0]):
        for i in range(d):
            for j in range(d):
                out[r, i, j] = p[1 + i] if i == j else 0.0


@evaluator("matrix", cache=True)
def _ou_jacobian(t, x, p, out):
    d = x.shape[1]
    for r in range(x.shape[0]):
        for i in range(d):
            for j in range(d):
                out[r, i, j] = -p[0] if i == j else 0.0


@evaluator("scalar", cache=True)
def _zero_scalar(t, x, p, out):
    out[:] = 0.0


@evaluator("tensor", cache=True)
def _zero_tensor(t, x, p, out):
    out[:] = 0.0


# sine: params = [M1, sigma]
@evaluator("vector", cache=True)
def _sine_drift(t, x, p, out):
    k = p[0] + 1.0
    for r in range(x.shape[0]):
        out[r, 0] = math.sin(x[r, 0]) - k * x[r, 0]


@evaluator("matrix", cache=True)
def _sine_jacobian(t, x, p, out):
    k = p[0] + 1.0
    for r in range(x.shape[0]):
        out[r, 0, 0] = math.cos(x[r, 0]) - k


@evaluator("scalar", cache=True)
def _sine_hessian(t, x, p, out):
    for r in range(x.shape[0]):
        out[r] = -math.sin(x[r, 0])


# switching: params = [0.0 (unused), sigma]
@evaluator("vector", cache=True)
def _switching_drift(t, x, p, out):
    q = 110.0 * t - 109.0
    for r in range(x.shape[0]):
        xr = x[r, 0]
        e = -t * xr + q * xr * xr
        e = min(max(e, -EXP_CLAMP), EXP_CLAMP)
        out[r, 0] = -xr * math.exp(e)


@evaluator("matrix", cache=True)
def _switching_jacobian(t, x, p, out):
    q = 110.0 * t - 109.0
    for r in range(x.shape[0]):
        xr = x[r, 0]
        e = -t * xr + q * xr * xr
        de = -t + 2.0 * q * xr
        if e > EXP_CLAMP or e < -EXP_CLAMP:
            e = min(max(e, -EXP_CLAMP), EXP_CLAMP)
            de = 0.0
        out[r, 0, 0] = -math.exp(e) * (1.0 + xr * de)


@evaluator("scalar", cache=True)
def _switching_hessian(t, x, p, out):
    q = 110.0 * t - 109.0
    for r in range(x.shape[0]):
        xr = x[r, 0]
        e = -t * xr + q * xr * xr
        de = -t + 2.0 * q * xr
        dde = 2.0 * q
        if e > EXP_CLAMP or e < -EXP_CLAMP:
            e = min(max(e, -EXP_CLAMP), EXP_CLAMP)
            de = 0.0
            dde = 0.0
        out[r] = -math.exp(e) * (2.0 * de + xr * de * de + xr * dde)


# mv_linear: params = [a, sigma_1..sigma_d, c, m0]; the sigma block sits at p[1:1+d]
@evaluator("vector", cache=True)
def _mv_linear_drift(t, x, p, out):
    d = x.shape[1]
    a = p[0]
    c = p[1 + d]
    mean = p[2 + d] * math.exp(-(a - c) * t)
    for r in range(x.shape[0]):
        for i in range(d):
            out[r, i] = -a * x[r, i] + c * mean


# decaying: params = [1.0 (limit rate), sigma_1..sigma_d]
@evaluator("vector", cache=True)
def _decaying_drift(t, x, p, out):
    k = 1.0 + math.exp(-t)
    for r in range(x.shape[0]):
        for i in range(x.shape[1]):
            out[r, i] = -x[r, i] * k


@evaluator("matrix", cache=True)
def _decaying_jacobian(t, x, p, out):
    k = 1.0 + math.exp(-t)
    d = x.shape[1]
    for r in range(x.shape[0]):
        for i in range(d):
            for j in range(d):
                out[r, i, j] = -k if i == j else 0.0


def _sigma_vector(sigma, dim: int) -> np.ndarray:
    s = np.asarray(sigma, dtype=np.float64).reshape(-1)
    if s.size == 1:
        s = np.full(dim, s[0])
    if s.size != dim:
        raise ValueError(f"sigma must be a scalar or have {dim} entries")
    if np.any(s < 0) or not np.all(np.isfinite(s)):
        raise ValueError("sigma entries must be finite and >= 0")
    return s


def _positive(name: str, value) -> float:
    value = float(value)
    if not value > 0 or not math.isfinite(value):
        raise ValueError(f"{name} must be a positive finite number, got {value}")
    return value


def _ou(M1: float = 1.0, sigma=1.0, dim: int = 1) -> CoefficientSet:
    M1 = _positive("M1", M1)
    dim = int(dim)
    s = _sigma_vector(sigma, dim)
    info = {"stationary": {"mean": [0.0] * dim, "cov": np.diag(s**2 / (2 * M1)).tolist()}}
    return CoefficientSet(
        name="ou", dim=dim, drift=_ou_drift, diffusion=_diag_diffusion,
        params=np.concatenate([[M1], s]),
        drift_jacobian=_ou_jacobian, diffusion_jacobian=_zero_tensor,
        drift_hessian=_zero_scalar if dim == 1 else None,
        diffusion_hessian=_zero_scalar if dim == 1 else None,
        flags=ModelFlags(time_homogeneous=True, additive_noise=True),
        info=info,
    )


def _sine(M1: float = 1.0, sigma: float = 1.0) -> CoefficientSet:
    M1 = _positive("M1", M1)
    return CoefficientSet(
        name="sine", dim=1, drift=_sine_drift, diffusion=_diag_diffusion,
        params=np.concatenate([[M1], _sigma_vector(sigma, 1)]),
        drift_jacobian=_sine_jacobian, drift_hessian=_sine_hessian,
        diffusion_jacobian=_zero_tensor, diffusion_hessian=_zero_scalar,
        flags=ModelFlags(time_homogeneous=True, additive_noise=True),
    )


def _switching(sigma: float = 1.0) -> CoefficientSet:
    return CoefficientSet(
        name="switching", dim=1, drift=_switching_drift, diffusion=_diag_diffusion,
        params=np.concatenate([[0.0], _sigma_vector(sigma, 1)]),
        drift_jacobian=_switching_jacobian, drift_hessian=_switching_hessian,
        diffusion_jacobian=_zero_tensor, diffusion_hessian=_zero_scalar,
        flags=ModelFlags(additive_noise=True, superlinear_drift=True),
    )


def _mv_linear(a: float = 2.0, c: float = 0.5, sigma=1.0, m0: float = 1.0, dim: int = 1) -> CoefficientSet:
    a = _positive("a", a)
    c = float(c)
    dim = int(dim)
    s = _sigma_vector(sigma, dim)
    return CoefficientSet(
        name="mv_linear", dim=dim, drift=_mv_linear_drift, diffusion=_diag_diffusion,
        params=np.concatenate([[a], s, [c, float(m0)]]),
        drift_jacobian=_ou_jacobian, diffusion_jacobian=_zero_tensor,
        drift_hessian=_zero_scalar if dim == 1 else None,
        diffusion_hessian=_zero_scalar if dim == 1 else None,
        flags=ModelFlags(additive_noise=True),
    )


def _decaying(sigma=1.0, dim: int = 1) -> CoefficientSet:
    dim = int(dim)
    s = _sigma_vector(sigma, dim)
    params = np.concatenate([[1.0], s])
    hess = _zero_scalar if dim == 1 else None
    limit = CoefficientSet(
        name="decaying:limit", dim=dim, drift=_ou_drift, diffusion=_diag_diffusion,
        params=params, drift_jacobian=_ou_jacobian, diffusion_jacobian=_zero_tensor,
        drift_hessian=hess, diffusion_hessian=hess,
        flags=ModelFlags(time_homogeneous=True, additive_noise=True),
    )
    return CoefficientSet(
        name="decaying", dim=dim, drift=_decaying_drift, diffusion=_diag_diffusion,
        params=params, drift_jacobian=_decaying_jacobian, diffusion_jacobian=_zero_tensor,
        drift_hessian=hess, diffusion_hessian=hess,
        flags=ModelFlags(additive_noise=True), limiting=limit,
    )


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class ModelCatalogEntry:
    """A named, parameterized model with its claimed structural constants.

    ``claimed_M1`` is the monotonicity constant with ``m = 2``, i.e.
    ``<x - y, b(x) - b(y)> <= -M1 |x - y|^2`` for the stated times. The
    dissipativity rate for ``W = |x|^2`` is twice that. ``claimed_W`` names a
    Lyapunov function from :func:`sdedecay.lyapunov.get_lyapunov`.
    """

    name: str
    coefficients: CoefficientSet
    claimed_M1: float | None
    claimed_W: str | None
    notes: str
    params: Mapping[str, Any]
    assumptions: Mapping[str, str]


@dataclass(frozen=True)
class _Registration:
    factory: Callable[..., CoefficientSet]
    defaults: Mapping[str, Any]
    claimed_M1: float | Callable[[Mapping[str, Any]], float | None] | None
    claimed_W: str | None
    notes: str
    assumptions: Mapping[str, str]


_REGISTRY: dict[str, _Registration] = {}


def register_model(name: str, factory: Callable[..., CoefficientSet], *,
                   defaults: Mapping[str, Any] | None = None,
                   claimed_M1=None, claimed_W: str | None = None, notes: str = "",
                   assumptions: Mapping[str, str] | None = None,
                   overwrite: bool = False) -> None:
    """Add a model factory to the catalog.

    Parameters
    ----------
    factory : callable
        ``factory(**params) -> CoefficientSet``.
    defaults : mapping
        Parameter names and default values accepted by ``factory``.
    claimed_M1 : float or callable
        Constant, or a function of the resolved parameters.
    """
    if not isinstance(name, str) or not name:
        raise ValueError("model name must be a non-empty string")
    if name in _REGISTRY and not overwrite:
        raise ValueError(f"model {name!r} is already registered")
    _REGISTRY[name] = _Registration(factory, MappingProxyType(dict(defaults or {})),
                                    claimed_M1, claimed_W, notes,
                                    MappingProxyType(dict(assumptions or {})))


def unregister_model(name: str) -> None:
    _REGISTRY.pop(name, None)


def model_names() -> list[str]:
    return list(_REGISTRY)


def get_model(name: str, **params) -> ModelCatalogEntry:
    """Build a catalog model; unknown names or parameters raise ``KeyError``/``ValueError``."""
    try:
        reg = _REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown model {name!r}; known: {', '.join(_REGISTRY)}") from None
    unknown = set(params) - set(reg.defaults)
    if unknown:
        raise ValueError(f"unknown parameter(s) for {name!r}: {', '.join(sorted(unknown))}")
    resolved = {**reg.defaults, **params}
    coefficients = reg.factory(**resolved)
    m1 = reg.claimed_M1(resolved) if callable(reg.claimed_M1) else reg.claimed_M1
    return ModelCatalogEntry(name=name, coefficients=coefficients,
                             claimed_M1=None if m1 is None else float(m1),
                             claimed_W=reg.claimed_W, notes=reg.notes,
                             params=MappingProxyType(resolved), assumptions=reg.assumptions)


def list_models() -> list[dict[str, Any]]:
    """Catalog listing with default parameters, claimed constants and assumption notes."""
    rows = []
    for name, reg in _REGISTRY.items():
        entry = get_model(name)
        rows.append({
            "name": name,
            "dim": entry.coefficients.dim,
            "parameters": {k: _jsonable(v) for k, v in reg.defaults.items()},
            "claimed_M1": entry.claimed_M1,
            "claimed_W": reg.claimed_W,
            "flags": dataclasses.asdict(entry.coefficients.flags),
            "has_limit": entry.coefficients.limiting is not None,
            "assumptions": dict(reg.assumptions),
            "notes": reg.notes,
        })
    return rows


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    return v


register_model(
    "ou", _ou, defaults={"M1": 1.0, "sigma": 1.0, "dim": 1},
    claimed_M1=lambda p: p["M1"], claimed_W="quadratic",
    notes="Linear drift -M1 x with constant diagonal noise; closed-form transition law.",
    assumptions={
        "linear_growth_regularity": "holds on [0, inf): drift Lipschitz, constant diffusion",
        "uniform_ellipticity": "holds when every sigma entry > 0",
        "dissipativity_W_quadratic": "holds with rate 2 M1 for all t",
        "monotonicity": "holds with constant M1 for every m >= 2",
    },
)
register_model(
    "sine", _sine, defaults={"M1": 1.0, "sigma": 1.0},
    claimed_M1=lambda p: p["M1"], claimed_W="quadratic",
    notes="b = sin x - (M1 + 1) x; by the mean value theorem b' <= -M1.",
    assumptions={
        "linear_growth_regularity": "holds on [0, inf)",
        "uniform_ellipticity": "holds when sigma > 0",
        "dissipativity_W_quadratic": "holds with rate 2 M1 for all t",
        "monotonicity": "holds with constant M1",
    },
)
register_model(
    "switching", _switching, defaults={"sigma": 1.0},
    claimed_M1=0.7, claimed_W="quadratic",
    notes=("Bounded drift for t < 1, contraction at least like -0.7 x for t >= 1. "
           "The claimed constant is 0.7 on the drift derivative; the W = x^2 "
           "dissipativity rate is then 1.4. Stiff for t >= 1: states stay bounded under "
           "tamed Euler for dt <= 0.01, but the scheme's derivative is not contractive at the "
           "exponential wall, so derivative estimates grow past t of about 1.5."),
    assumptions={
        "bounded_regularity_on_unit_interval": "holds: drift bounded on [0, 1)",
        "uniform_ellipticity": "holds when sigma > 0",
        "dissipativity_W_quadratic": "holds for t >= 1 (reference rates 0.7 and 1.4)",
        "monotonicity": "holds for t >= 1 with constant 0.7",
    },
)
register_model(
    "mv_linear", _mv_linear, defaults={"a": 2.0, "c": 0.5, "sigma": 1.0, "m0": 1.0, "dim": 1},
    claimed_M1=lambda p: p["a"], claimed_W="quadratic",
    notes=("Frozen-law drift of the mean-field model beta(x, mu) = -a x + c mean(mu) "
           "started from the point mass m0, using the exact mean flow m0 exp(-(a - c) t)."),
    assumptions={
        "linear_growth_regularity": "holds on [0, inf)",
        "uniform_ellipticity": "holds when sigma > 0",
        "dissipativity_W_quadratic": "holds with rate 2 a",
        "monotonicity": "holds with constant a",
    },
)
register_model(
    "decaying", _decaying, defaults={"sigma": 1.0, "dim": 1},
    claimed_M1=1.0, claimed_W="quadratic",
    notes=("b = -x (1 + exp(-t)) with declared limit b_inf = -x. With sigma = 0 and "
           "W = |x|^2 the drift condition L W <= -2 W holds for all t."),
    assumptions={
        "linear_growth_regularity": "holds on [0, inf)",
        "uniform_ellipticity": "holds when sigma > 0",
        "dissipativity_W_quadratic": "holds with rate 2 for all t",
        "monotonicity": "holds with constant 1",
        "limit_in_time": "b(t, x) -> -x and sigma constant",
    },
)
