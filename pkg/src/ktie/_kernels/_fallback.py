"""Pure-numpy versions of the compiled kernels (same signatures)."""

import numpy as np


def _side_interp(gl, idx, w, tau, tl, side):
    """Interpolate one time level using only corners on the node's side of t = tau_-.

    ``gl`` is (M,), ``idx``/``w`` are (L, W) for L target nodes, ``side`` is (L,).
    """
    vals = gl[idx]
    keep = (tl < tau[idx]) == side[:, None]
    den = (w * keep).sum(axis=1)
    num = (w * vals * keep).sum(axis=1)
    full = (w * vals).sum(axis=1)
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), full)


def sl_sweep(g, idx, w, att, half, alpha, full, tau, dt):
    nt1, M = g.shape
    G = np.zeros((nt1, M))
    fullf = full.astype(np.float64)
    for n in range(1, nt1):
        side = n * dt < tau
        gi = alpha * _side_interp(g[n - 1], idx, w, tau, (n - 1) * dt, side)
        if np.any(alpha != 1.0):
            gi += (1.0 - alpha) * _side_interp(g[n], idx, w, tau, n * dt, side)
        Gi = (w * G[n - 1][idx]).sum(axis=1) * fullf
        G[n] = att * Gi + half * (g[n] + att * gi)
    return G


def ray_accumulate(G, g, idx, w, coef_mid, coef_end, k, tau, dt):
    nt1 = g.shape[0]
    live = np.flatnonzero((coef_mid != 0.0) | (coef_end != 0.0))
    if live.size == 0:
        return
    li, lw, lt = idx[live], w[live], tau[live]
    for n in range(k, nt1):
        val = _side_interp(g[n - k], li, lw, tau, (n - k) * dt, n * dt < lt)
        G[n, live] += (coef_end[live] if n == k else coef_mid[live]) * val


def ray_exit_accumulate(G, g, idx, w, coef, K, rho, tau, dt):
    nt1 = g.shape[0]
    live = np.flatnonzero(coef != 0.0)
    for kk in np.unique(K[live]):
        sel = live[K[live] == kk]
        si, sw, st, r, cf = idx[sel], w[sel], tau[sel], rho[sel], coef[sel]
        for n in range(kk + 1, nt1):
            side = n * dt < st
            val = ((1.0 - r) * _side_interp(g[n - kk], si, sw, tau, (n - kk) * dt, side)
                   + r * _side_interp(g[n - kk - 1], si, sw, tau, (n - kk - 1) * dt, side))
            G[n, sel] += cf * val


def _rhs(x, y, th, A, wid2, cx, cy):
    rx, ry = x - cx, y - cy
    e = A * np.exp(-(rx * rx + ry * ry) / wid2)
    c = 1.0 + e
    gx, gy = -2.0 * rx / wid2 * e, -2.0 * ry / wid2 * e
    ct, st = np.cos(th), np.sin(th)
    return ct / c, st / c, (-gx * st + gy * ct) / (c * c)


def _rk4(x, y, th, h, A, wid2, cx, cy):
    k1 = _rhs(x, y, th, A, wid2, cx, cy)
    k2 = _rhs(x + 0.5 * h * k1[0], y + 0.5 * h * k1[1], th + 0.5 * h * k1[2], A, wid2, cx, cy)
    k3 = _rhs(x + 0.5 * h * k2[0], y + 0.5 * h * k2[1], th + 0.5 * h * k2[2], A, wid2, cx, cy)
    k4 = _rhs(x + h * k3[0], y + h * k3[1], th + h * k3[2], A, wid2, cx, cy)
    return tuple(s + h / 6.0 * (a + 2.0 * b + 2.0 * c + d)
                 for s, a, b, c, d in zip((x, y, th), k1, k2, k3, k4))


def geodesic_march(x0, y0, th0, h, max_steps, record_every, n_records,
                   R, A, width, cx, cy, bisect_iters):
    M = x0.shape[0]
    wid2 = width * width
    R2 = R * R
    rec = np.full((n_records, M, 3), np.nan)
    rec[0] = np.stack([x0, y0, th0], axis=1)
    tau = np.zeros(M)
    ex = np.zeros((M, 3))
    trapped = np.zeros(M, dtype=bool)
    x, y, th = x0.copy(), y0.copy(), th0.copy()
    alive = np.arange(M)
    step = 0
    while alive.size:
        if step >= max_steps:
            trapped[alive] = True
            break
        nx, ny, nth = _rk4(x[alive], y[alive], th[alive], h, A, wid2, cx, cy)
        out = nx * nx + ny * ny > R2
        if out.any():
            ids = alive[out]
            bx0, by0, bt0 = x[ids], y[ids], th[ids]
            lo = np.zeros(ids.size)
            hi = np.ones(ids.size)
            for _ in range(bisect_iters):
                mid = 0.5 * (lo + hi)
                bx, by, _bt = _rk4(bx0, by0, bt0, mid * h, A, wid2, cx, cy)
                outside = bx * bx + by * by > R2
                hi = np.where(outside, mid, hi)
                lo = np.where(outside, lo, mid)
            bx, by, bt = _rk4(bx0, by0, bt0, hi * h, A, wid2, cx, cy)
            tau[ids] = (step + hi) * abs(h)
            ex[ids] = np.stack([bx, by, bt], axis=1)
        keep = ~out
        alive = alive[keep]
        x[alive], y[alive], th[alive] = nx[keep], ny[keep], nth[keep]
        step += 1
        if step % record_every == 0 and step // record_every < n_records:
            rec[step // record_every, alive] = np.stack([x[alive], y[alive], th[alive]], axis=1)
    return rec, tau, ex, trapped
