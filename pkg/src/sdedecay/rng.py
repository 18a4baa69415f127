"""Counter-based Gaussian noise.

Every Brownian increment is a pure function of ``(seed, path, leg, step, component)``.
Nothing is carried between draws, so an ensemble is the same no matter how its
paths are split across threads.

Bits come from Philox4x32-10 (Salmon, Moraes, Dror and Shaw, SC'11). The 64-bit
seed is the key and the counter words are ``(step, component // 2, path, leg)``.
One block yields two 53-bit uniforms ``u = (k + 1/2) 2^-53``, which are mapped to
normals with Wichura's AS241 inverse normal CDF (relative error about 1e-16).
Component ``2j`` uses the first uniform of block ``j`` and ``2j + 1`` the second.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit

__all__ = [
    "MAX_SEED",
    "split_seed",
    "philox4x32",
    "ndtri",
    "standard_normals",
]

MAX_SEED = (1 << 64) - 1

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint32(0x9E3779B9)
_W1 = np.uint32(0xBB67AE85)
_LOW32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)
_SHIFT21 = np.uint64(21)
_MASK53 = np.uint64((1 << 53) - 1)
_TWO_M53 = 2.0 ** -53


def split_seed(seed: int) -> tuple[np.uint32, np.uint32]:
    """Validate a 64-bit seed and split it into the two Philox key words."""
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)):
        raise TypeError(f"seed must be an integer, got {type(seed).__name__}")
    seed = int(seed)
    if seed < 0 or seed > MAX_SEED:
        raise ValueError(f"seed must lie in [0, 2**64 - 1], got {seed}")
    return np.uint32(seed & 0xFFFFFFFF), np.uint32(seed >> 32)


@njit(inline="always", cache=True)
def philox4x32(c0, c1, c2, c3, k0, k1):
    """Ten rounds of Philox4x32 on counter ``(c0..c3)`` with key ``(k0, k1)``."""
    c0 = np.uint32(c0)
    c1 = np.uint32(c1)
    c2 = np.uint32(c2)
    c3 = np.uint32(c3)
    k0 = np.uint32(k0)
    k1 = np.uint32(k1)
    for _ in range(10):
        p0 = _M0 * np.uint64(c0)
        p1 = _M1 * np.uint64(c2)
        hi0 = np.uint32(p0 >> _SHIFT32)
        lo0 = np.uint32(p0 & _LOW32)
        hi1 = np.uint32(p1 >> _SHIFT32)
        lo1 = np.uint32(p1 & _LOW32)
        c0 = hi1 ^ c1 ^ k0
        c1 = lo1
        c2 = hi0 ^ c3 ^ k1
        c3 = lo0
        k0 = np.uint32(k0 + _W0)
        k1 = np.uint32(k1 + _W1)
    return c0, c1, c2, c3


@njit(inline="always", cache=True)
def ndtri(p):
    """Inverse standard normal CDF on (0, 1), algorithm AS241 (PPND16)."""
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        num = (((((((2.5090809287301226727e3 * r + 3.3430575583588128105e4) * r
                    + 6.7265770927008700853e4) * r + 4.5921953931549871457e4) * r
                  + 1.3731693765509461125e4) * r + 1.9715909503065514427e3) * r
                + 1.3314166789178437745e2) * r + 3.3871328727963666080e0)
        den = (((((((5.2264952788528545610e3 * r + 2.8729085735721942674e4) * r
                    + 3.9307895800092710610e4) * r + 2.1213794301586595867e4) * r
                  + 5.3941960214247511077e3) * r + 6.8718700749205790830e2) * r
                + 4.2313330701600911252e1) * r + 1.0)
        return q * num / den
    r = p if q < 0.0 else 1.0 - p
    r = math.sqrt(-math.log(r))
    if r <= 5.0:
        r -= 1.6
        num = (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r
                    + 2.41780725177450611770e-1) * r + 1.27045825245236838258e0) * r
                  + 3.64784832476320460504e0) * r + 5.76949722146069140550e0) * r
                + 4.63033784615654529590e0) * r + 1.42343711074968357734e0)
        den = (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r
                    + 1.51986665636164571966e-2) * r + 1.48103976427480074590e-1) * r
                  + 6.89767334985100004550e-1) * r + 1.67638483018380384940e0) * r
                + 2.05319162663775882187e0) * r + 1.0)
    else:
        r -= 5.0
        num = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r
                    + 1.24266094738807843860e-3) * r + 2.65321895265761230930e-2) * r
                  + 2.96560571828504891230e-1) * r + 1.78482653991729133580e0) * r
                + 5.46378491116411436990e0) * r + 6.65790464350110377720e0)
        den = (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r
                    + 1.84631831751005468180e-5) * r + 7.86869131145613259100e-4) * r
                  + 1.48753612908506148525e-2) * r + 1.36929880922735805310e-1) * r
                + 5.99832206555887937690e-1) * r + 1.0)
    val = num / den
    return -val if q < 0.0 else val


@njit(inline="always", cache=True)
def _uniform53(hi, lo):
    bits = ((np.uint64(hi) << _SHIFT21) ^ np.uint64(lo)) & _MASK53
    return (float(bits) + 0.5) * _TWO_M53


@njit(inline="always", cache=True)
def fill_normals(out, k0, k1, path, leg, step):
    """Write the ``len(out)`` standard normals of one (path, leg, step) into ``out``."""
    d = out.shape[0]
    for j in range(0, d, 2):
        c0, c1, c2, c3 = philox4x32(step, j >> 1, path, leg, k0, k1)
        out[j] = ndtri(_uniform53(c0, c1))
        if j + 1 < d:
            out[j + 1] = ndtri(_uniform53(c2, c3))


@njit(cache=True)
def _normals_table(k0, k1, paths, leg, steps, d):
    out = np.empty((paths.shape[0], steps.shape[0], d))
    buf = np.empty(d)
    for i in range(paths.shape[0]):
        for j in range(steps.shape[0]):
            fill_normals(buf, k0, k1, paths[i], leg, steps[j])
            out[i, j] = buf
    return out


def standard_normals(seed: int, paths, steps, dim: int = 1, leg: int = 0) -> np.ndarray:
    """Standard normals used by the simulator, shaped ``(len(paths), len(steps), dim)``.

    Multiply by ``sqrt(dt)`` to get the Brownian increments of those steps.
    """
    k0, k1 = split_seed(seed)
    paths = np.ascontiguousarray(paths, dtype=np.int64)
    steps = np.ascontiguousarray(steps, dtype=np.int64)
    if paths.ndim != 1 or steps.ndim != 1:
        raise ValueError("paths and steps must be 1-d index arrays")
    limit = 1 << 32
    for name, arr in (("paths", paths), ("steps", steps)):
        if arr.size and (arr.min() < 0 or arr.max() >= limit):
            raise ValueError(f"{name} indices must lie in [0, 2**32)")
    if not 0 <= leg < limit:
        raise ValueError("leg must lie in [0, 2**32)")
    return _normals_table(k0, k1, paths, leg, steps, int(dim))
