"""Per-sample numba kernels mirroring the batched numpy versions.

Small fixed-size matrix work (8x8 and below) dominates, so explicit loops
compiled per sample beat batched einsum dispatch.  Serial on purpose:
results must not depend on thread count.
"""

import numpy as np
from numba import njit

LN2 = float(np.log(2.0))
POWER_REL_TOL = 1e-8
BISECT_MAX_STEPS = 100


@njit(cache=True)
def _herm(a):
    return np.conj(a.T).copy()


@njit(cache=True)
def _rate_one(h, v, noise):
    h = np.ascontiguousarray(h)
    v = np.ascontiguousarray(v)
    k, nr, _ = h.shape
    eye = noise * np.eye(nr, dtype=np.complex128)
    total = 0.0
    for kk in range(k):
        cov = eye.copy()
        own = np.zeros((nr, nr), dtype=np.complex128)
        for jj in range(k):
            hv = h[kk] @ v[jj]
            g = hv @ _herm(hv)
            cov += g
            if jj == kk:
                own = g
        _, ld_total = np.linalg.slogdet(cov)
        _, ld_int = np.linalg.slogdet(cov - own)
        total += ld_total - ld_int
    return total / LN2


@njit(cache=True)
def sum_rate(h, v, noise):
    b = h.shape[0]
    out = np.empty(b)
    for i in range(b):
        out[i] = _rate_one(h[i], v[i], noise)
    return out


@njit(cache=True)
def _power_of_mu(lam, wsq, mu):
    total = 0.0
    for i in range(lam.shape[0]):
        if wsq[i] > 0.0:
            den = lam[i] + mu
            if den <= 0.0:
                return np.inf
            total += wsq[i] / (den * den)
    return total


@njit(cache=True)
def _step_one(h, v, noise, p_max):
    h = np.ascontiguousarray(h)
    v = np.ascontiguousarray(v)
    k, nr, nt = h.shape
    d = v.shape[-1]
    eye_nr = noise * np.eye(nr, dtype=np.complex128)
    eye_d = np.eye(d, dtype=np.complex128)

    u = np.zeros((k, nr, d), dtype=np.complex128)
    w = np.zeros((k, d, d), dtype=np.complex128)
    hvk = np.zeros((k, nr, d), dtype=np.complex128)
    for kk in range(k):
        cov = eye_nr.copy()
        for jj in range(k):
            hv = h[kk] @ v[jj]
            cov += hv @ _herm(hv)
            if jj == kk:
                hvk[kk] = hv
        u[kk] = np.linalg.solve(cov, hvk[kk])
        e = eye_d - _herm(u[kk]) @ hvk[kk]
        winv = np.linalg.inv(e)
        w[kk] = 0.5 * (winv + _herm(winv))

    a = np.zeros((nt, nt), dtype=np.complex128)
    c = np.zeros((k, nt, d), dtype=np.complex128)
    for kk in range(k):
        t = _herm(h[kk]) @ u[kk]
        c[kk] = t @ w[kk]
        a += c[kk] @ _herm(t)
    a = 0.5 * (a + _herm(a))

    lam, q = np.linalg.eigh(a)
    lam = np.maximum(lam, 0.0)
    m = np.zeros((k, nt, d), dtype=np.complex128)
    wsq = np.zeros(nt)
    qh = _herm(q)
    for kk in range(k):
        m[kk] = qh @ c[kk]
        for i in range(nt):
            for l in range(d):
                wsq[i] += abs(m[kk, i, l]) ** 2

    mu = 0.0
    if _power_of_mu(lam, wsq, 0.0) > p_max:
        lo = 0.0
        hi = np.sqrt(wsq.sum() / p_max) + 1e-30
        for _ in range(BISECT_MAX_STEPS):
            mid = 0.5 * (lo + hi)
            pw = _power_of_mu(lam, wsq, mid)
            if pw > p_max:
                lo = mid
            else:
                hi = mid
            if abs(pw - p_max) < POWER_REL_TOL * p_max:
                break
        mu = 0.5 * (lo + hi)

    v_new = np.zeros((k, nt, d), dtype=np.complex128)
    for kk in range(k):
        scaled = np.zeros((nt, d), dtype=np.complex128)
        for i in range(nt):
            den = lam[i] + mu
            for l in range(d):
                if m[kk, i, l] != 0.0 and den > 0.0:
                    scaled[i, l] = m[kk, i, l] / den
        v_new[kk] = q @ scaled
    return v_new


@njit(cache=True)
def wmmse_solve(h, v0, noise, p_max, tol, max_iter):
    b = h.shape[0]
    v = v0.copy()
    rate = np.empty(b)
    iters = np.zeros(b, dtype=np.int64)
    for i in range(b):
        rate[i] = _rate_one(h[i], v[i], noise)
        for _ in range(max_iter):
            v[i] = _step_one(h[i], v[i], noise, p_max)
            iters[i] += 1
            new_rate = _rate_one(h[i], v[i], noise)
            gain = abs(new_rate - rate[i])
            rate[i] = new_rate
            if gain < tol:
                break
    return v, rate, iters


def warmup():
    """Trigger JIT compilation on a tiny problem so timings stay honest."""
    h = np.ones((1, 1, 1, 2), dtype=np.complex128)
    v = np.ones((1, 1, 2, 1), dtype=np.complex128)
    sum_rate(h, v, 1.0)
    wmmse_solve(h, v, 1.0, 1.0, 1e-2, 2)
