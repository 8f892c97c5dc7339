# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops for the transport solver and the geodesic tracer.

Every function here has a numpy twin in ``_fallback`` with the same
signature and semantics; the test-suite checks both agree.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sin, cos, sqrt

cnp.import_array()


cdef inline double _side_interp(double[:, ::1] g, Py_ssize_t[:, ::1] idx, double[:, ::1] w,
                                double[::1] tau, Py_ssize_t m, Py_ssize_t nl, double tl,
                                bint side) nogil:
    # interpolate g at level nl using only corners on the node's side of t = tau_-
    cdef Py_ssize_t c, j, W = idx.shape[1]
    cdef double num = 0.0, den = 0.0, alln = 0.0
    for c in range(W):
        j = idx[m, c]
        alln += w[m, c] * g[nl, j]
        if (tl < tau[j]) == side:
            num += w[m, c] * g[nl, j]
            den += w[m, c]
    if den > 0.0:
        return num / den
    return alln


def sl_sweep(double[:, ::1] g, Py_ssize_t[:, ::1] idx, double[:, ::1] w,
             double[::1] att, double[::1] half, double[::1] alpha,
             unsigned char[::1] full, double[::1] tau, double dt):
    cdef Py_ssize_t nt1 = g.shape[0], M = g.shape[1], W = idx.shape[1]
    cdef Py_ssize_t n, m, c, j
    cdef double gi, Gi, a
    cdef bint side
    out = np.zeros((nt1, M), dtype=np.float64)
    cdef double[:, ::1] G = out
    with nogil:
        for n in range(1, nt1):
            for m in range(M):
                a = alpha[m]
                side = n * dt < tau[m]
                gi = a * _side_interp(g, idx, w, tau, m, n - 1, (n - 1) * dt, side)
                if a != 1.0:
                    gi += (1.0 - a) * _side_interp(g, idx, w, tau, m, n, n * dt, side)
                Gi = 0.0
                if full[m]:
                    for c in range(W):
                        Gi += w[m, c] * G[n - 1, idx[m, c]]
                G[n, m] = att[m] * Gi + half[m] * (g[n, m] + att[m] * gi)
    return out


def ray_accumulate(double[:, ::1] G, double[:, ::1] g, Py_ssize_t[:, ::1] idx,
                   double[:, ::1] w, double[::1] coef_mid, double[::1] coef_end,
                   Py_ssize_t k, double[::1] tau, double dt):
    cdef Py_ssize_t nt1 = g.shape[0], M = g.shape[1]
    cdef Py_ssize_t n, m
    cdef double val, cm, ce
    with nogil:
        for m in range(M):
            cm = coef_mid[m]
            ce = coef_end[m]
            if cm == 0.0 and ce == 0.0:
                continue
            for n in range(k, nt1):
                val = _side_interp(g, idx, w, tau, m, n - k, (n - k) * dt, n * dt < tau[m])
                if n == k:
                    G[n, m] += ce * val
                else:
                    G[n, m] += cm * val


def ray_exit_accumulate(double[:, ::1] G, double[:, ::1] g, Py_ssize_t[:, ::1] idx,
                        double[:, ::1] w, double[::1] coef, Py_ssize_t[::1] K,
                        double[::1] rho, double[::1] tau, double dt):
    cdef Py_ssize_t nt1 = g.shape[0], M = g.shape[1]
    cdef Py_ssize_t n, m, kk
    cdef double r
    cdef bint side
    with nogil:
        for m in range(M):
            if coef[m] == 0.0:
                continue
            kk = K[m]
            r = rho[m]
            for n in range(kk + 1, nt1):
                side = n * dt < tau[m]
                G[n, m] += coef[m] * (
                    (1.0 - r) * _side_interp(g, idx, w, tau, m, n - kk, (n - kk) * dt, side)
                    + r * _side_interp(g, idx, w, tau, m, n - kk - 1, (n - kk - 1) * dt, side))


cdef inline void _rhs(double x, double y, double th, double A, double wid2,
                      double cx, double cy, double* dx, double* dy, double* dth) nogil:
    cdef double rx = x - cx, ry = y - cy
    cdef double e = A * exp(-(rx * rx + ry * ry) / wid2)
    cdef double c = 1.0 + e
    cdef double gx = -2.0 * rx / wid2 * e, gy = -2.0 * ry / wid2 * e
    cdef double ct = cos(th), st = sin(th)
    dx[0] = ct / c
    dy[0] = st / c
    dth[0] = (-gx * st + gy * ct) / (c * c)


cdef inline void _rk4(double x, double y, double th, double h, double A, double wid2,
                      double cx, double cy, double* ox, double* oy, double* oth) nogil:
    cdef double k1x, k1y, k1t, k2x, k2y, k2t, k3x, k3y, k3t, k4x, k4y, k4t
    _rhs(x, y, th, A, wid2, cx, cy, &k1x, &k1y, &k1t)
    _rhs(x + 0.5 * h * k1x, y + 0.5 * h * k1y, th + 0.5 * h * k1t, A, wid2, cx, cy, &k2x, &k2y, &k2t)
    _rhs(x + 0.5 * h * k2x, y + 0.5 * h * k2y, th + 0.5 * h * k2t, A, wid2, cx, cy, &k3x, &k3y, &k3t)
    _rhs(x + h * k3x, y + h * k3y, th + h * k3t, A, wid2, cx, cy, &k4x, &k4y, &k4t)
    ox[0] = x + h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
    oy[0] = y + h / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y)
    oth[0] = th + h / 6.0 * (k1t + 2.0 * k2t + 2.0 * k3t + k4t)


def geodesic_march(double[::1] x0, double[::1] y0, double[::1] th0, double h,
                   Py_ssize_t max_steps, Py_ssize_t record_every, Py_ssize_t n_records,
                   double R, double A, double width, double cx, double cy,
                   Py_ssize_t bisect_iters):
    """Trace M geodesics with signed step ``h`` until they leave the disk.

    Returns (records, tau, exit_state, trapped) where records has shape
    (n_records, M, 3) holding states every ``record_every`` steps (NaN once
    the seed has exited).
    """
    cdef Py_ssize_t M = x0.shape[0]
    cdef Py_ssize_t m, step, it
    cdef double x, y, th, nx, ny, nth, lo, hi, mid, bx, by, bt, R2 = R * R
    cdef double wid2 = width * width
    rec_np = np.full((n_records, M, 3), np.nan)
    tau_np = np.zeros(M)
    ex_np = np.zeros((M, 3))
    trapped_np = np.zeros(M, dtype=np.uint8)
    cdef double[:, :, ::1] rec = rec_np
    cdef double[::1] tau = tau_np
    cdef double[:, ::1] ex = ex_np
    cdef unsigned char[::1] trapped = trapped_np
    cdef double ah = h if h > 0 else -h
    with nogil:
        for m in range(M):
            x = x0[m]
            y = y0[m]
            th = th0[m]
            rec[0, m, 0] = x
            rec[0, m, 1] = y
            rec[0, m, 2] = th
            step = 0
            while True:
                if step >= max_steps:
                    trapped[m] = 1
                    break
                _rk4(x, y, th, h, A, wid2, cx, cy, &nx, &ny, &nth)
                if nx * nx + ny * ny > R2:
                    lo = 0.0
                    hi = 1.0
                    for it in range(bisect_iters):
                        mid = 0.5 * (lo + hi)
                        _rk4(x, y, th, mid * h, A, wid2, cx, cy, &bx, &by, &bt)
                        if bx * bx + by * by > R2:
                            hi = mid
                        else:
                            lo = mid
                    _rk4(x, y, th, hi * h, A, wid2, cx, cy, &bx, &by, &bt)
                    tau[m] = (step + hi) * ah
                    ex[m, 0] = bx
                    ex[m, 1] = by
                    ex[m, 2] = bt
                    break
                x = nx
                y = ny
                th = nth
                step += 1
                if step % record_every == 0 and step // record_every < n_records:
                    rec[step // record_every, m, 0] = x
                    rec[step // record_every, m, 1] = y
                    rec[step // record_every, m, 2] = th
    return rec_np, tau_np, ex_np, trapped_np.astype(bool)
