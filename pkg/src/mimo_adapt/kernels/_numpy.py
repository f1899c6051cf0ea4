"""Batched numpy kernels: sum rate and the WMMSE block-coordinate solver.

Shapes follow one convention: channels h are (B, K, Nr, Nt) and precoders
v are (B, K, Nt, d), complex128.  All samples in a batch advance together;
converged samples are frozen while the rest keep iterating.
"""

import numpy as np

LN2 = float(np.log(2.0))
POWER_REL_TOL = 1e-8
BISECT_MAX_STEPS = 100


def _pair_grams(h, v):
    # hv[b,k,j] = H_k V_j ; gram[b,k,j] = H_k V_j V_j^H H_k^H
    hv = np.einsum("bknt,bjtd->bkjnd", h, v)
    gram = np.einsum("bkjnd,bkjmd->bkjnm", hv, hv.conj())
    return hv, gram


def sum_rate(h, v, noise):
    """Per-sample sum rate in bits/s/Hz as a difference of two log-dets."""
    b, k, nr, _ = h.shape
    _, gram = _pair_grams(h, v)
    eye = noise * np.eye(nr, dtype=np.complex128)
    total = gram.sum(axis=2) + eye
    own = gram[:, np.arange(k), np.arange(k)]
    interference = total - own
    _, ld_total = np.linalg.slogdet(total)
    _, ld_int = np.linalg.slogdet(interference)
    return (ld_total - ld_int).sum(axis=1) / LN2


def mrt_init(h, p_max):
    """Matched-filter start: V_k proportional to H_k^H with equal per-user power."""
    b, k, nr, nt = h.shape
    v = np.conj(np.swapaxes(h, -1, -2))
    norms = np.sqrt(np.sum(np.abs(v) ** 2, axis=(-2, -1), keepdims=True))
    return v * (np.sqrt(p_max / k) / np.maximum(norms, 1e-30))


def _bisect_power(lam, wsq, p_max):
    """Per-sample multiplier mu with sum_i wsq_i/(lam_i+mu)^2 = p_max (0 if slack)."""
    def power(mu):
        den = (lam + mu[:, None]) ** 2
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(wsq > 0, wsq / den, 0.0)
        return terms.sum(axis=1)

    b = lam.shape[0]
    mu = np.zeros(b)
    active = power(mu) > p_max
    if not np.any(active):
        return mu
    lo = np.zeros(b)
    hi = np.sqrt(wsq.sum(axis=1) / p_max) + 1e-30
    mu = np.where(active, 0.5 * (lo + hi), mu)
    for _ in range(BISECT_MAX_STEPS):
        mid = 0.5 * (lo + hi)
        pw = power(mid)
        high = pw > p_max
        lo = np.where(active & high, mid, lo)
        hi = np.where(active & ~high, mid, hi)
        mu = np.where(active, 0.5 * (lo + hi), mu)
        # freeze each sample at the step where its own tolerance is met
        active &= np.abs(pw - p_max) >= POWER_REL_TOL * p_max
        if not np.any(active):
            break
    return mu


def wmmse_step(h, v, noise, p_max):
    """One U/W/V block update for every sample in the batch."""
    b, k, nr, nt = h.shape
    d = v.shape[-1]
    hv, gram = _pair_grams(h, v)
    cov = gram.sum(axis=2) + noise * np.eye(nr, dtype=np.complex128)
    hvk = hv[:, np.arange(k), np.arange(k)]
    u = np.linalg.solve(cov, hvk)
    e = np.eye(d, dtype=np.complex128) - np.einsum("bknd,bkne->bkde", u.conj(), hvk)
    w = np.linalg.inv(e)
    w = 0.5 * (w + np.conj(np.swapaxes(w, -1, -2)))
    t = np.einsum("bknt,bknd->bktd", h.conj(), u)
    c = t @ w
    a = np.einsum("bktd,bksd->bkts", c, t.conj()).sum(axis=1)
    a = 0.5 * (a + np.conj(np.swapaxes(a, -1, -2)))
    lam, q = np.linalg.eigh(a)
    lam = np.clip(lam, 0.0, None)
    m = np.einsum("bts,bktd->bksd", q.conj(), c)
    wsq = (np.abs(m) ** 2).sum(axis=(1, 3))
    mu = _bisect_power(lam, wsq, p_max)
    den = lam[:, None, :, None] + mu[:, None, None, None]
    scaled = np.where(np.abs(m) > 0, m / np.where(den > 0, den, 1.0), 0.0)
    return np.einsum("bts,bksd->bktd", q, scaled)


def wmmse_solve(h, v0, noise, p_max, tol, max_iter):
    """Iterate block updates until the per-sample rate gain drops below tol.

    Returns (v, rate, iters); iters counts block updates actually applied
    to each sample.
    """
    v = v0.copy()
    rate = sum_rate(h, v, noise)
    iters = np.zeros(h.shape[0], dtype=np.int64)
    active = np.ones(h.shape[0], dtype=bool)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        v_new = wmmse_step(h[idx], v[idx], noise, p_max)
        rate_new = sum_rate(h[idx], v_new, noise)
        v[idx] = v_new
        iters[idx] += 1
        gain = np.abs(rate_new - rate[idx])
        rate[idx] = rate_new
        active[idx] = gain >= tol
    return v, rate, iters
