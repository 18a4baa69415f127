"""Block-parallel Euler-Maruyama kernels.

Paths are processed in fixed blocks of ``BLOCK`` paths. Inside a block, each
path carries ``n_init`` rows (different initial points) that share the same
Brownian increments, which gives common noise for couplings and finite
differences for free. The arithmetic done on a path depends only on its index,
so results are identical for any thread count.

Step ``k`` of a leg happens at ``t_base + (step_offset + k) * dt``. It draws
noise with counter ``step = k``, so a restarted leg gets a fresh stream
through its leg index while sharing the time arithmetic of an unbroken grid.
"""
from __future__ import annotations

import math

import numpy as np
from numba import prange, types

from ._jit import (
    A1, A2, A3, A4, MAT_FN, MV_MAT_FN, MV_VEC_FN, SCA_FN, TEN_FN, VEC_FN, f8,
    fd_derivative_of_matrix, fd_derivative_of_tensor, fd_jacobian_matrix,
    fd_jacobian_vector, fd_second_from_matrix, fd_second_from_vector, lazy_kernel,
)
from .rng import fill_normals

BLOCK = 256

i8 = types.int64
u4 = types.uint32
b1 = types.boolean
I1 = types.int64[::1]
I2 = types.int64[:, ::1]
A5 = types.float64[:, :, :, :, ::1]

# derivative modes
ANALYTIC = 0
FD = 1
SECOND_DIFF = 2
ZERO = 3


def n_blocks(n_paths: int) -> int:
    return (n_paths + BLOCK - 1) // BLOCK


@lazy_kernel(types.void(VEC_FN, MAT_FN, A1, A3, f8, i8, f8, i8, I1, u4, u4, i8, b1, b1, A4, I2),
             parallel=True)
def euler_paths(drift, diffusion, p, x0, t_base, step_offset, dt, n_steps, rec,
                k0, k1, leg, tamed, additive, states, fail):
    """Simulate ``states[path, record, init, :]``.

    ``x0`` has shape ``(1 or n_paths, n_init, d)``; ``fail[block]`` receives
    ``(path, step)`` of the first non-finite state in that block, else stays -1.
    With ``additive`` the diffusion is state-independent and is evaluated on
    one row per step.
    """
    n_paths = states.shape[0]
    n_rec = rec.shape[0]
    n_init = x0.shape[1]
    d = x0.shape[2]
    per_path = x0.shape[0] > 1
    sqdt = math.sqrt(dt)
    nblk = (n_paths + BLOCK - 1) // BLOCK
    for blk in prange(nblk):
        path0 = blk * BLOCK
        nb = min(BLOCK, n_paths - path0)
        R = nb * n_init
        X = np.empty((R, d))
        bv = np.empty((R, d))
        sg = np.empty((1 if additive else R, d, d))
        z = np.empty((nb, d))
        for a in range(nb):
            src = path0 + a if per_path else 0
            for q in range(n_init):
                for i in range(d):
                    X[a * n_init + q, i] = x0[src, q, i]
        ptr = 0
        while ptr < n_rec and rec[ptr] == 0:
            for a in range(nb):
                for q in range(n_init):
                    for i in range(d):
                        states[path0 + a, ptr, q, i] = X[a * n_init + q, i]
            ptr += 1
        for k in range(n_steps):
            t = t_base + (step_offset + k) * dt
            drift(t, X, p, bv)
            if additive:
                diffusion(t, X[:1], p, sg)
            else:
                diffusion(t, X, p, sg)
            for a in range(nb):
                fill_normals(z[a], k0, k1, path0 + a, leg, k)
                for j in range(d):
                    z[a, j] *= sqdt
            bad = -1
            if d == 1:
                for a in range(nb):
                    za = z[a, 0]
                    for q in range(n_init):
                        r = a * n_init + q
                        b = bv[r, 0]
                        if tamed:
                            b = b / (1.0 + dt * abs(b))
                        xn = X[r, 0] + b * dt + sg[0 if additive else r, 0, 0] * za
                        X[r, 0] = xn
                        if bad < 0 and not math.isfinite(xn):
                            bad = a
            else:
                for a in range(nb):
                    for q in range(n_init):
                        r = a * n_init + q
                        fac = 1.0
                        if tamed:
                            nrm = 0.0
                            for i in range(d):
                                nrm += bv[r, i] * bv[r, i]
                            fac = 1.0 / (1.0 + dt * math.sqrt(nrm))
                        for i in range(d):
                            inc = 0.0
                            for j in range(d):
                                inc += sg[0 if additive else r, i, j] * z[a, j]
                            xn = X[r, i] + bv[r, i] * fac * dt + inc
                            X[r, i] = xn
                            if bad < 0 and not math.isfinite(xn):
                                bad = a
            if bad >= 0:
                fail[blk, 0] = path0 + bad
                fail[blk, 1] = k
                break
            while ptr < n_rec and rec[ptr] == k + 1:
                for a in range(nb):
                    for q in range(n_init):
                        for i in range(d):
                            states[path0 + a, ptr, q, i] = X[a * n_init + q, i]
                ptr += 1


@lazy_kernel(types.void(VEC_FN, MAT_FN, MAT_FN, TEN_FN, SCA_FN, SCA_FN, i8, i8, i8, i8, A1, A3,
                        f8, i8, f8, i8, I1, u4, u4, i8, b1, b1, b1, A4, A5, A3, I2),
             parallel=True)
def euler_tangent(drift, diffusion, jac, djac, hess, dhess, jac_mode, djac_mode, hess_mode,
                  dhess_mode, p, x0, t_base, step_offset, dt, n_steps, rec, k0, k1, leg, tamed,
                  additive, second, states, first, second_out, fail):
    """Euler states with first variation ``J`` and, for ``d == 1``, second variation ``K``.

    The tangent recursion differentiates the scheme actually used, so under
    taming it uses the Jacobian of ``b / (1 + dt |b|)``.
    """
    n_paths = states.shape[0]
    n_rec = rec.shape[0]
    n_init = x0.shape[1]
    d = x0.shape[2]
    sqdt = math.sqrt(dt)
    nblk = (n_paths + BLOCK - 1) // BLOCK
    for blk in prange(nblk):
        path0 = blk * BLOCK
        nb = min(BLOCK, n_paths - path0)
        R = nb * n_init
        X = np.empty((R, d))
        J = np.zeros((R, d, d))
        K = np.zeros(R)
        bv = np.empty((R, d))
        sg = np.empty((1 if additive else R, d, d))
        jb = np.empty((R, d, d))
        js = np.zeros((R, d, d, d))
        hb = np.zeros(R)
        hs = np.zeros(R)
        z = np.empty((nb, d))
        xs = np.empty((R, d))
        v1 = np.empty((R, d))
        v2 = np.empty((R, d))
        v3 = np.empty((R, d))
        m1 = np.empty((R, d, d))
        m2 = np.empty((R, d, d))
        m3 = np.empty((R, d, d))
        t1 = np.empty((R, d, d, d))
        t2 = np.empty((R, d, d, d))
        jn = np.empty((d, d))
        for a in range(nb):
            for q in range(n_init):
                r = a * n_init + q
                for i in range(d):
                    X[r, i] = x0[0, q, i]
                    J[r, i, i] = 1.0
        ptr = 0
        while ptr < n_rec and rec[ptr] == 0:
            for a in range(nb):
                for q in range(n_init):
                    r = a * n_init + q
                    for i in range(d):
                        states[path0 + a, ptr, q, i] = X[r, i]
                        for c in range(d):
                            first[path0 + a, ptr, q, i, c] = J[r, i, c]
                    if second:
                        second_out[path0 + a, ptr, q] = K[r]
            ptr += 1
        for k in range(n_steps):
            t = t_base + (step_offset + k) * dt
            drift(t, X, p, bv)
            if additive:
                diffusion(t, X[:1], p, sg)
            else:
                diffusion(t, X, p, sg)
            if jac_mode == ANALYTIC:
                jac(t, X, p, jb)
            else:
                fd_jacobian_vector(drift, t, X, p, jb, xs, v1, v2)
            if djac_mode == ANALYTIC:
                djac(t, X, p, js)
            elif djac_mode == FD:
                fd_jacobian_matrix(diffusion, t, X, p, js, xs, m1, m2)
            if second:
                if hess_mode == ANALYTIC:
                    hess(t, X, p, hb)
                elif hess_mode == FD:
                    fd_derivative_of_matrix(jac, t, X, p, hb, xs, m1, m2)
                else:
                    fd_second_from_vector(drift, t, X, p, hb, xs, v1, v2, v3)
                if dhess_mode == ANALYTIC:
                    dhess(t, X, p, hs)
                elif dhess_mode == FD:
                    fd_derivative_of_tensor(djac, t, X, p, hs, xs, t1, t2)
                elif dhess_mode == SECOND_DIFF:
                    fd_second_from_matrix(diffusion, t, X, p, hs, xs, m1, m2, m3)
            for a in range(nb):
                fill_normals(z[a], k0, k1, path0 + a, leg, k)
                for j in range(d):
                    z[a, j] *= sqdt
            bad = -1
            noise_deriv = djac_mode != ZERO
            if d == 1:
                for a in range(nb):
                    za = z[a, 0]
                    for q in range(n_init):
                        r = a * n_init + q
                        b = bv[r, 0]
                        db = jb[r, 0, 0]
                        ddb = hb[r]
                        if tamed:
                            u = 1.0 + dt * abs(b)
                            sgn = 1.0 if b > 0 else (-1.0 if b < 0 else 0.0)
                            ddb = ddb / (u * u) - 2.0 * dt * sgn * db * db / (u * u * u)
                            db = db / (u * u)
                            b = b / u
                        jr = J[r, 0, 0]
                        ds = js[r, 0, 0, 0] if noise_deriv else 0.0
                        if second:
                            K[r] = K[r] + (db * K[r] + ddb * jr * jr) * dt \
                                + (ds * K[r] + hs[r] * jr * jr) * za
                        J[r, 0, 0] = jr + db * jr * dt + ds * jr * za
                        xn = X[r, 0] + b * dt + sg[0 if additive else r, 0, 0] * za
                        X[r, 0] = xn
                        if bad < 0 and not (math.isfinite(xn) and math.isfinite(J[r, 0, 0])
                                            and math.isfinite(K[r])):
                            bad = a
            else:
                for a in range(nb):
                    for q in range(n_init):
                        r = a * n_init + q
                        fac = 1.0
                        if tamed:
                            nrm = 0.0
                            for i in range(d):
                                nrm += bv[r, i] * bv[r, i]
                            nrm = math.sqrt(nrm)
                            u = 1.0 + dt * nrm
                            fac = 1.0 / u
                            for kk in range(d):
                                dnorm = 0.0
                                if nrm > 0:
                                    for l in range(d):
                                        dnorm += bv[r, l] * jb[r, l, kk]
                                    dnorm = dt * dnorm / nrm
                                for i in range(d):
                                    jb[r, i, kk] = jb[r, i, kk] / u - bv[r, i] * dnorm / (u * u)
                        for i in range(d):
                            for c in range(d):
                                acc = 0.0
                                for l in range(d):
                                    acc += jb[r, i, l] * J[r, l, c]
                                val = J[r, i, c] + acc * dt
                                if noise_deriv:
                                    for j in range(d):
                                        s2 = 0.0
                                        for l in range(d):
                                            s2 += js[r, i, j, l] * J[r, l, c]
                                        val += s2 * z[a, j]
                                jn[i, c] = val
                        for i in range(d):
                            inc = 0.0
                            for j in range(d):
                                inc += sg[0 if additive else r, i, j] * z[a, j]
                            xn = X[r, i] + bv[r, i] * fac * dt + inc
                            X[r, i] = xn
                            if bad < 0 and not math.isfinite(xn):
                                bad = a
                            for c in range(d):
                                J[r, i, c] = jn[i, c]
                                if bad < 0 and not math.isfinite(jn[i, c]):
                                    bad = a
            if bad >= 0:
                fail[blk, 0] = path0 + bad
                fail[blk, 1] = k
                break
            while ptr < n_rec and rec[ptr] == k + 1:
                for a in range(nb):
                    for q in range(n_init):
                        r = a * n_init + q
                        for i in range(d):
                            states[path0 + a, ptr, q, i] = X[r, i]
                            for c in range(d):
                                first[path0 + a, ptr, q, i, c] = J[r, i, c]
                        if second:
                            second_out[path0 + a, ptr, q] = K[r]
                ptr += 1


@lazy_kernel(types.void(MV_VEC_FN, MV_MAT_FN, A1, A2, f8, i8, I1, u4, u4, i8, b1, A3, I2),
             parallel=True)
def particle_paths(drift_mv, diffusion_mv, p, x0, dt, n_steps, rec, k0, k1, leg, additive,
                   clouds, fail):
    """Euler steps of an ``N``-particle mean-field system.

    Every particle sees the cloud of the previous step (double buffering), so
    the blocks of one step are independent and the step ends with a barrier.
    Particle ``i`` draws noise as path ``i``. ``fail[block]`` receives
    ``(particle, step)`` of the first non-finite state.
    """
    N = x0.shape[0]
    d = x0.shape[1]
    n_rec = rec.shape[0]
    sqdt = math.sqrt(dt)
    nblk = (N + BLOCK - 1) // BLOCK
    cur = x0.copy()
    nxt = np.empty_like(cur)
    ptr = 0
    while ptr < n_rec and rec[ptr] == 0:
        clouds[ptr] = cur
        ptr += 1
    for k in range(n_steps):
        for blk in prange(nblk):
            r0 = blk * BLOCK
            nb = min(BLOCK, N - r0)
            xb = np.ascontiguousarray(cur[r0:r0 + nb])
            bv = np.empty((nb, d))
            sg = np.empty((1 if additive else nb, d, d))
            z = np.empty(d)
            drift_mv(xb, cur, p, bv)
            if additive:
                diffusion_mv(xb[:1], cur, p, sg)
            else:
                diffusion_mv(xb, cur, p, sg)
            for a in range(nb):
                fill_normals(z, k0, k1, r0 + a, leg, k)
                ra = 0 if additive else a
                for i in range(d):
                    inc = 0.0
                    for j in range(d):
                        inc += sg[ra, i, j] * z[j]
                    xn = xb[a, i] + bv[a, i] * dt + inc * sqdt
                    nxt[r0 + a, i] = xn
                    if fail[blk, 0] < 0 and not math.isfinite(xn):
                        fail[blk, 0] = r0 + a
                        fail[blk, 1] = k
        bad = False
        for blk in range(nblk):
            if fail[blk, 0] >= 0:
                bad = True
        if bad:
            break
        cur, nxt = nxt, cur
        while ptr < n_rec and rec[ptr] == k + 1:
            clouds[ptr] = cur
            ptr += 1
