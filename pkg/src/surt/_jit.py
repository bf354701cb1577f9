"""Optional compiled kernels for the two hot loops: the lattice dynamic
program and the LSTM time recursion.

The pure numpy implementations in `transducer` and `model` remain the
reference; when numba is importable these kernels take over (same math, same
interfaces, results equal to floating-point reassociation). Nothing here
changes gradients or contracts, only wall time.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap


@njit(cache=True, inline="always")
def _lae(a: float, b: float) -> float:
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    if a < b:
        a, b = b, a
    return a + np.log1p(np.exp(b - a))


@njit(cache=True)
def lattice_alphas(blank_lp, label_lp):
    T, U1 = blank_lp.shape
    U = U1 - 1
    alpha = np.full((T, U + 1), -np.inf)
    alpha[0, 0] = 0.0
    for t in range(T):
        for u in range(U + 1):
            if t == 0 and u == 0:
                continue
            a = alpha[t - 1, u] + blank_lp[t - 1, u] if t > 0 else -np.inf
            b = alpha[t, u - 1] + label_lp[t, u - 1] if u > 0 else -np.inf
            alpha[t, u] = _lae(a, b)
    return alpha


@njit(cache=True)
def lattice_betas(blank_lp, label_lp):
    T, U1 = blank_lp.shape
    U = U1 - 1
    beta = np.full((T + 1, U + 1), -np.inf)
    beta[T, U] = 0.0
    for t in range(T - 1, -1, -1):
        for u in range(U, -1, -1):
            a = blank_lp[t, u] + beta[t + 1, u]
            b = label_lp[t, u] + beta[t, u + 1] if u < U else -np.inf
            beta[t, u] = _lae(a, b)
    return beta


@njit(cache=True)
def lstm_forward(x, Wx, Wh, b):
    B, T, _ = x.shape
    H = Wh.shape[0]
    one = x.dtype.type(1.0)
    xz = np.dot(x.reshape(B * T, x.shape[2]), Wx).reshape(B, T, 4 * H) + b
    h = np.zeros((B, H), dtype=x.dtype)
    c = np.zeros((B, H), dtype=x.dtype)
    out = np.empty((B, T, H), dtype=x.dtype)
    gi = np.empty((B, T, H), dtype=x.dtype)
    gf = np.empty((B, T, H), dtype=x.dtype)
    gg = np.empty((B, T, H), dtype=x.dtype)
    go = np.empty((B, T, H), dtype=x.dtype)
    tc = np.empty((B, T, H), dtype=x.dtype)
    cprev = np.empty((B, T, H), dtype=x.dtype)
    hprev = np.empty((B, T, H), dtype=x.dtype)
    for t in range(T):
        z = np.dot(h, Wh)
        for bi in range(B):
            for j in range(H):
                hprev[bi, t, j] = h[bi, j]
                cprev[bi, t, j] = c[bi, j]
                i = one / (one + np.exp(-(z[bi, j] + xz[bi, t, j])))
                f = one / (one + np.exp(-(z[bi, H + j] + xz[bi, t, H + j])))
                g = np.tanh(z[bi, 2 * H + j] + xz[bi, t, 2 * H + j])
                o = one / (one + np.exp(-(z[bi, 3 * H + j] + xz[bi, t, 3 * H + j])))
                cv = f * c[bi, j] + i * g
                th = np.tanh(cv)
                c[bi, j] = cv
                h[bi, j] = o * th
                out[bi, t, j] = o * th
                gi[bi, t, j] = i
                gf[bi, t, j] = f
                gg[bi, t, j] = g
                go[bi, t, j] = o
                tc[bi, t, j] = th
    return out, gi, gf, gg, go, tc, cprev, hprev


@njit(cache=True)
def lstm_backward(g_out, x, Wx, Wh, gi, gf, gg, go, tc, cprev, hprev):
    B, T, _ = x.shape
    H = Wh.shape[0]
    one = x.dtype.type(1.0)
    WhT = Wh.T.copy()
    dz_all = np.empty((B, T, 4 * H), dtype=x.dtype)
    dz = np.empty((B, 4 * H), dtype=x.dtype)
    dh_next = np.zeros((B, H), dtype=x.dtype)
    dc_next = np.zeros((B, H), dtype=x.dtype)
    for t in range(T - 1, -1, -1):
        for bi in range(B):
            for j in range(H):
                i = gi[bi, t, j]
                f = gf[bi, t, j]
                g = gg[bi, t, j]
                o = go[bi, t, j]
                th = tc[bi, t, j]
                dh = g_out[bi, t, j] + dh_next[bi, j]
                do = dh * th
                dc = dh * o * (one - th * th) + dc_next[bi, j]
                dz[bi, j] = dc * g * i * (one - i)
                dz[bi, H + j] = dc * cprev[bi, t, j] * f * (one - f)
                dz[bi, 2 * H + j] = dc * i * (one - g * g)
                dz[bi, 3 * H + j] = do * o * (one - o)
                dc_next[bi, j] = dc * f
        dz_all[:, t] = dz
        dh_next = np.dot(dz, WhT)
    zf = dz_all.reshape(B * T, 4 * H)
    dx = np.dot(zf, Wx.T).reshape(x.shape)
    xf = x.reshape(B * T, x.shape[2])
    dWx = np.dot(xf.T, zf)
    dWh = np.dot(hprev.reshape(B * T, H).T, zf)
    db = zf.sum(axis=0)
    return dx, dWx, dWh, db
