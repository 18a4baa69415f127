"""Evaluator signatures, lazy compilation and finite-difference fallbacks.

Model coefficients are batch evaluators with one fixed signature per output
rank, ``f(t, X, params, out)``:

========  ==================  =====================================
kind      ``out`` shape        meaning
========  ==================  =====================================
vector    ``(m, d)``           drift ``b``
matrix    ``(m, d, d)``        diffusion ``sigma`` or drift Jacobian
tensor    ``(m, d, d, d)``     ``out[r, i, j, k] = d sigma_ij / d x_k``
scalar    ``(m,)``             second derivatives when ``d == 1``
========  ==================  =====================================

Mean-field coefficients ``beta(x, mu)`` use ``f(X, cloud, params, out)`` with
the cloud an ``(N, d)`` array: kinds ``mv_vector`` and ``mv_matrix``.

Because every evaluator of a kind shares one signature, kernels take them as
first-class function arguments. Each kernel is compiled once for all models
and cached on disk.
"""
from __future__ import annotations

import functools

import numba
import numpy as np
from numba import njit, types

f8 = types.float64
A1 = types.float64[::1]
A2 = types.float64[:, ::1]
A3 = types.float64[:, :, ::1]
A4 = types.float64[:, :, :, ::1]

VEC_SIG = types.void(f8, A2, A1, A2)
MAT_SIG = types.void(f8, A2, A1, A3)
TEN_SIG = types.void(f8, A2, A1, A4)
SCA_SIG = types.void(f8, A2, A1, A1)

VEC_FN = types.FunctionType(VEC_SIG)
MAT_FN = types.FunctionType(MAT_SIG)
TEN_FN = types.FunctionType(TEN_SIG)
SCA_FN = types.FunctionType(SCA_SIG)

MV_VEC_SIG = types.void(A2, A2, A1, A2)
MV_MAT_SIG = types.void(A2, A2, A1, A3)
MV_VEC_FN = types.FunctionType(MV_VEC_SIG)
MV_MAT_FN = types.FunctionType(MV_MAT_SIG)

SIGNATURES = {"vector": VEC_SIG, "matrix": MAT_SIG, "tensor": TEN_SIG, "scalar": SCA_SIG,
              "mv_vector": MV_VEC_SIG, "mv_matrix": MV_MAT_SIG}

FD_REL_STEP = 1e-5
FD2_REL_STEP = 1e-4


def evaluator(kind: str, *, cache: bool = False):
    """Decorator compiling ``fn(t, X, params, out)`` as a batch evaluator of ``kind``.

    Parameters
    ----------
    kind : {"vector", "matrix", "tensor", "scalar", "mv_vector", "mv_matrix"}
        Output rank, see the module table.
    cache : bool
        Persist the machine code next to the defining module. Only works for
        functions defined in importable files.
    """
    sig = SIGNATURES[kind]

    def wrap(fn):
        return njit(sig, cache=cache)(fn)

    return wrap


def evaluator_kind(fn) -> str | None:
    """Return the kind of a compiled evaluator, or None if it does not match one."""
    sigs = getattr(fn, "signatures", None)
    if not sigs or len(sigs) != 1:
        return None
    for kind, sig in SIGNATURES.items():
        if tuple(sigs[0]) == tuple(sig.args):
            return kind
    return None


class LazyKernel:
    """An explicitly typed, disk-cached ``njit`` function compiled on first call."""

    def __init__(self, py_func, sig, **options):
        self.py_func = py_func
        self.sig = sig
        self.options = options
        functools.update_wrapper(self, py_func)

    @functools.cached_property
    def compiled(self):
        return njit(self.sig, cache=True, **self.options)(self.py_func)

    def __call__(self, *args):
        return self.compiled(*args)


def lazy_kernel(sig, **options):
    def wrap(fn):
        return LazyKernel(fn, sig, **options)

    return wrap


# Placeholders passed where an optional evaluator is absent; never called.
@njit(VEC_SIG, cache=True)
def absent_vector(t, x, p, out):
    out[:] = np.nan


@njit(MAT_SIG, cache=True)
def absent_matrix(t, x, p, out):
    out[:] = np.nan


@njit(TEN_SIG, cache=True)
def absent_tensor(t, x, p, out):
    out[:] = np.nan


@njit(SCA_SIG, cache=True)
def absent_scalar(t, x, p, out):
    out[:] = np.nan


ABSENT = {"vector": absent_vector, "matrix": absent_matrix,
          "tensor": absent_tensor, "scalar": absent_scalar}


# ---------------------------------------------------------------------------
# Finite differences on batches. Scratch arrays are passed in so kernels can
# reuse them across steps.
# ---------------------------------------------------------------------------
@njit(cache=True)
def fd_jacobian_vector(f, t, X, p, out, xs, fp, fm):
    """Central differences of a vector evaluator: ``out[r, i, k] = d f_i / d x_k``."""
    m, d = X.shape
    for r in range(m):
        for k in range(d):
            xs[r, k] = X[r, k]
    for k in range(d):
        for r in range(m):
            xs[r, k] = X[r, k] + FD_REL_STEP * (1.0 + abs(X[r, k]))
        f(t, xs, p, fp)
        for r in range(m):
            xs[r, k] = X[r, k] - FD_REL_STEP * (1.0 + abs(X[r, k]))
        f(t, xs, p, fm)
        for r in range(m):
            h2 = (X[r, k] + FD_REL_STEP * (1.0 + abs(X[r, k]))) - xs[r, k]
            for i in range(d):
                out[r, i, k] = (fp[r, i] - fm[r, i]) / h2
            xs[r, k] = X[r, k]


@njit(cache=True)
def fd_jacobian_matrix(g, t, X, p, out, xs, gp, gm):
    """Central differences of a matrix evaluator: ``out[r, i, j, k] = d g_ij / d x_k``."""
    m, d = X.shape
    for r in range(m):
        for k in range(d):
            xs[r, k] = X[r, k]
    for k in range(d):
        for r in range(m):
            xs[r, k] = X[r, k] + FD_REL_STEP * (1.0 + abs(X[r, k]))
        g(t, xs, p, gp)
        for r in range(m):
            xs[r, k] = X[r, k] - FD_REL_STEP * (1.0 + abs(X[r, k]))
        g(t, xs, p, gm)
        for r in range(m):
            h2 = (X[r, k] + FD_REL_STEP * (1.0 + abs(X[r, k]))) - xs[r, k]
            for i in range(d):
                for j in range(d):
                    out[r, i, j, k] = (gp[r, i, j] - gm[r, i, j]) / h2
            xs[r, k] = X[r, k]


@njit(cache=True)
def fd_second_from_vector(f, t, X, p, out, xs, fp, f0, fm):
    """Second difference of a 1-d vector evaluator (``d == 1``)."""
    m = X.shape[0]
    f(t, X, p, f0)
    for r in range(m):
        xs[r, 0] = X[r, 0] + FD2_REL_STEP * (1.0 + abs(X[r, 0]))
    f(t, xs, p, fp)
    for r in range(m):
        xs[r, 0] = X[r, 0] - FD2_REL_STEP * (1.0 + abs(X[r, 0]))
    f(t, xs, p, fm)
    for r in range(m):
        h = FD2_REL_STEP * (1.0 + abs(X[r, 0]))
        out[r] = (fp[r, 0] - 2.0 * f0[r, 0] + fm[r, 0]) / (h * h)


@njit(cache=True)
def fd_second_from_matrix(g, t, X, p, out, xs, gp, g0, gm):
    """Second difference of a 1x1 matrix evaluator (``d == 1``)."""
    m = X.shape[0]
    g(t, X, p, g0)
    for r in range(m):
        xs[r, 0] = X[r, 0] + FD2_REL_STEP * (1.0 + abs(X[r, 0]))
    g(t, xs, p, gp)
    for r in range(m):
        xs[r, 0] = X[r, 0] - FD2_REL_STEP * (1.0 + abs(X[r, 0]))
    g(t, xs, p, gm)
    for r in range(m):
        h = FD2_REL_STEP * (1.0 + abs(X[r, 0]))
        out[r] = (gp[r, 0, 0] - 2.0 * g0[r, 0, 0] + gm[r, 0, 0]) / (h * h)


@njit(cache=True)
def fd_derivative_of_matrix(jac, t, X, p, out, xs, jp, jm):
    """Central difference of a 1x1 matrix evaluator, i.e. b'' from an analytic b'."""
    m = X.shape[0]
    for r in range(m):
        xs[r, 0] = X[r, 0] + FD_REL_STEP * (1.0 + abs(X[r, 0]))
    jac(t, xs, p, jp)
    for r in range(m):
        xs[r, 0] = X[r, 0] - FD_REL_STEP * (1.0 + abs(X[r, 0]))
    jac(t, xs, p, jm)
    for r in range(m):
        h2 = (X[r, 0] + FD_REL_STEP * (1.0 + abs(X[r, 0]))) - xs[r, 0]
        out[r] = (jp[r, 0, 0] - jm[r, 0, 0]) / h2


@njit(cache=True)
def fd_derivative_of_tensor(djac, t, X, p, out, xs, tp, tm):
    """Central difference of a 1x1x1 tensor evaluator, i.e. sigma'' from an analytic sigma'."""
    m = X.shape[0]
    for r in range(m):
        xs[r, 0] = X[r, 0] + FD_REL_STEP * (1.0 + abs(X[r, 0]))
    djac(t, xs, p, tp)
    for r in range(m):
        xs[r, 0] = X[r, 0] - FD_REL_STEP * (1.0 + abs(X[r, 0]))
    djac(t, xs, p, tm)
    for r in range(m):
        h2 = (X[r, 0] + FD_REL_STEP * (1.0 + abs(X[r, 0]))) - xs[r, 0]
        out[r] = (tp[r, 0, 0, 0] - tm[r, 0, 0, 0]) / h2


# ---------------------------------------------------------------------------
# Row-wise evaluation with a per-row time, for the assumption checkers.
# ---------------------------------------------------------------------------
@lazy_kernel(types.void(VEC_FN, A1, A2, A1, A2))
def rows_vector(f, ts, X, p, out):
    d = X.shape[1]
    xr = np.empty((1, d))
    orow = np.empty((1, d))
    for r in range(X.shape[0]):
        xr[0] = X[r]
        f(ts[r], xr, p, orow)
        out[r] = orow[0]


@lazy_kernel(types.void(MAT_FN, A1, A2, A1, A3))
def rows_matrix(g, ts, X, p, out):
    d = X.shape[1]
    xr = np.empty((1, d))
    orow = np.empty((1, d, d))
    for r in range(X.shape[0]):
        xr[0] = X[r]
        g(ts[r], xr, p, orow)
        out[r] = orow[0]


@lazy_kernel(types.void(VEC_FN, f8, A2, A1, A3))
def batch_fd_jacobian_vector(f, t, X, p, out):
    xs = np.empty_like(X)
    fp = np.empty_like(X)
    fm = np.empty_like(X)
    fd_jacobian_vector(f, t, X, p, out, xs, fp, fm)


@lazy_kernel(types.void(MAT_FN, f8, A2, A1, A4))
def batch_fd_jacobian_matrix(g, t, X, p, out):
    m, d = X.shape
    xs = np.empty_like(X)
    gp = np.empty((m, d, d))
    gm = np.empty((m, d, d))
    fd_jacobian_matrix(g, t, X, p, out, xs, gp, gm)


@lazy_kernel(types.void(VEC_FN, f8, A2, A1, A1))
def batch_fd_second_vector(f, t, X, p, out):
    xs = np.empty_like(X)
    fp = np.empty_like(X)
    f0 = np.empty_like(X)
    fm = np.empty_like(X)
    fd_second_from_vector(f, t, X, p, out, xs, fp, f0, fm)


@lazy_kernel(types.void(MAT_FN, f8, A2, A1, A1))
def batch_fd_second_matrix(g, t, X, p, out):
    m = X.shape[0]
    xs = np.empty_like(X)
    gp = np.empty((m, 1, 1))
    g0 = np.empty((m, 1, 1))
    gm = np.empty((m, 1, 1))
    fd_second_from_matrix(g, t, X, p, out, xs, gp, g0, gm)


@lazy_kernel(types.void(MAT_FN, f8, A2, A1, A1))
def batch_fd_derivative_of_matrix(jac, t, X, p, out):
    m = X.shape[0]
    xs = np.empty_like(X)
    jp = np.empty((m, 1, 1))
    jm = np.empty((m, 1, 1))
    fd_derivative_of_matrix(jac, t, X, p, out, xs, jp, jm)


@lazy_kernel(types.void(TEN_FN, f8, A2, A1, A1))
def batch_fd_derivative_of_tensor(djac, t, X, p, out):
    m = X.shape[0]
    xs = np.empty_like(X)
    tp = np.empty((m, 1, 1, 1))
    tm = np.empty((m, 1, 1, 1))
    fd_derivative_of_tensor(djac, t, X, p, out, xs, tp, tm)


def set_workers(n: int | None) -> int:
    """Cap the number of numba worker threads; returns the count in effect.

    Results never depend on this setting. The cap cannot exceed the thread
    pool size fixed by ``NUMBA_NUM_THREADS`` when numba was first imported.
    """
    if n is None:
        return numba.get_num_threads()
    n = int(n)
    if n < 1:
        raise ValueError("workers must be >= 1")
    n = min(n, numba.config.NUMBA_NUM_THREADS)
    numba.set_num_threads(n)
    return n
