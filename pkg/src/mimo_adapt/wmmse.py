"""Weighted-MMSE sum-rate machinery.

Three layers: plain ndarray helpers (sum_rate, mrt_init, project_power),
the iterative solver with optional per-iteration rate trace, and builders
that assemble the same rate expression on an autodiff tape so learned
precoders can be trained on the negative sum rate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .kernels import _numpy as _np_kernels

LN2 = float(np.log(2.0))
DEFAULT_TOL = 1e-5
DEFAULT_MAX_ITER = 500


def _ensure_batched(h, v=None):
    if h.ndim == 3:
        h = h[None]
        if v is not None:
            v = v[None]
        return h, v, True
    return h, v, False


def sum_rate(h, v, noise):
    """Sum rate in bits/s/Hz; scalar for (K,Nr,Nt) input, (B,) for batched."""
    h = np.ascontiguousarray(h, dtype=np.complex128)
    v = np.ascontiguousarray(v, dtype=np.complex128)
    h, v, squeezed = _ensure_batched(h, v)
    out = kernels.sum_rate(h, v, float(noise))
    return float(out[0]) if squeezed else out


def per_user_rates(h, v, noise):
    """Individual user rates (bits/s/Hz), batched shape (B, K)."""
    h, v, squeezed = _ensure_batched(np.asarray(h, dtype=np.complex128),
                                     np.asarray(v, dtype=np.complex128))
    b, k, nr, _ = h.shape
    hv = np.einsum("bknt,bjtd->bkjnd", h, v)
    gram = np.einsum("bkjnd,bkjmd->bkjnm", hv, hv.conj())
    total = gram.sum(axis=2) + noise * np.eye(nr, dtype=np.complex128)
    own = gram[:, np.arange(k), np.arange(k)]
    _, ld_total = np.linalg.slogdet(total)
    _, ld_int = np.linalg.slogdet(total - own)
    rates = (ld_total - ld_int) / LN2
    return rates[0] if squeezed else rates


def total_power(v):
    """Transmit power summed over users and streams, per sample."""
    v = np.asarray(v)
    axes = tuple(range(v.ndim - 3, v.ndim))
    return (np.abs(v) ** 2).sum(axis=axes)


def project_power(v, p_max):
    """Scale precoders down onto the power ball (no-op for feasible input)."""
    v = np.asarray(v, dtype=np.complex128)
    pw = total_power(v)
    factor = np.where(pw > p_max, np.sqrt(p_max / np.maximum(pw, 1e-300)), 1.0)
    return v * np.reshape(factor, np.shape(factor) + (1, 1, 1))


def mrt_init(h, p_max):
    """Matched-filter initialization with equal per-user power split."""
    h = np.ascontiguousarray(h, dtype=np.complex128)
    h, _, squeezed = _ensure_batched(h)
    v = kernels.mrt_init(h, float(p_max))
    return v[0] if squeezed else v


def wmmse_step(h, v, noise, p_max):
    """One block-coordinate update (U, W, V with bisected power constraint)."""
    h = np.ascontiguousarray(h, dtype=np.complex128)
    v = np.ascontiguousarray(v, dtype=np.complex128)
    h, v, squeezed = _ensure_batched(h, v)
    out = _np_kernels.wmmse_step(h, v, float(noise), float(p_max))
    return out[0] if squeezed else out


@dataclass
class WmmseResult:
    v: np.ndarray
    rate: np.ndarray
    iters: np.ndarray
    trace: np.ndarray = None


def wmmse_solve(h, noise, p_max, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER,
                v0=None, record_trace=False):
    """Run WMMSE from MRT (or v0) until the rate gain per sweep drops below tol.

    With record_trace=True the numpy path is used and trace holds the
    sum rate after every sweep, shape (B, iters_max_reached), padded by
    repeating the final value for samples that stopped early.
    """
    h = np.ascontiguousarray(h, dtype=np.complex128)
    h, _, squeezed = _ensure_batched(h)
    v = kernels.mrt_init(h, float(p_max)) if v0 is None else \
        np.ascontiguousarray(v0 if not squeezed else v0[None], dtype=np.complex128)
    if not record_trace:
        v_out, rate, iters = kernels.wmmse_solve(h, v, float(noise), float(p_max),
                                                 float(tol), int(max_iter))
        res = WmmseResult(v_out, rate, iters)
    else:
        rate = _np_kernels.sum_rate(h, v, noise)
        iters = np.zeros(h.shape[0], dtype=np.int64)
        active = np.ones(h.shape[0], dtype=bool)
        rows = []
        for _ in range(max_iter):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            v_new = _np_kernels.wmmse_step(h[idx], v[idx], noise, p_max)
            rate_new = _np_kernels.sum_rate(h[idx], v_new, noise)
            v[idx] = v_new
            iters[idx] += 1
            gain = np.abs(rate_new - rate[idx])
            rate[idx] = rate_new
            active[idx] = gain >= tol
            rows.append(rate.copy())
        trace = np.stack(rows, axis=1) if rows else rate[:, None]
        res = WmmseResult(v, rate, iters, trace)
    if squeezed:
        res = WmmseResult(res.v[0], float(res.rate[0]), int(res.iters[0]),
                          None if res.trace is None else res.trace[0])
    return res


def waterfilling_capacity(h, noise, p_max):
    """Single-user MIMO capacity (bits/s/Hz) by waterfilling over the eigenmodes."""
    h = np.asarray(h, dtype=np.complex128)
    if h.ndim != 2:
        raise ValueError("waterfilling expects one (Nr, Nt) channel")
    sing = np.linalg.svd(h, compute_uv=False)
    gains = sing ** 2 / noise
    gains = gains[gains > 1e-15][::-1].copy()
    gains.sort()
    gains = gains[::-1]
    inv = 1.0 / gains
    for m in range(gains.size, 0, -1):
        level = (p_max + inv[:m].sum()) / m
        powers = level - inv[:m]
        if powers[-1] > 0:
            return float(np.log2(1.0 + powers * gains[:m]).sum())
    return 0.0


# -- differentiable rate graph -------------------------------------------------

def rate_graph_nodes(tape, h, v_nodes, noise):
    """Per-user rate nodes, each (B,1,1), from K precoder nodes of shape (B,Nt,d)."""
    h = np.asarray(h, dtype=np.complex128)
    if h.ndim != 4:
        raise ValueError("rate graph expects batched channels (B, K, Nr, Nt)")
    b, k, nr, _ = h.shape
    if len(v_nodes) != k:
        raise ValueError(f"need {k} precoder nodes, got {len(v_nodes)}")
    eye = tape.constant(noise * np.eye(nr, dtype=np.complex128))
    rates = []
    for kk in range(k):
        hk = tape.constant(h[:, kk])
        hv = [tape.matmul(hk, v_nodes[jj]) for jj in range(k)]
        grams = [tape.matmul(x, tape.hermitian(x)) for x in hv]
        cov_total = tape.add_n(grams + [eye])
        cov_int = tape.add_n([g for jj, g in enumerate(grams) if jj != kk] + [eye])
        diff = tape.sub(tape.logdet(cov_total), tape.logdet(cov_int))
        rates.append(tape.scale(diff, 1.0 / LN2))
    return rates


def negative_sum_rate_graph(tape, h, v_nodes, noise):
    """Scalar training loss node: minus the batch-mean sum rate."""
    rates = rate_graph_nodes(tape, h, v_nodes, noise)
    return tape.scale(tape.batch_mean(tape.add_n(rates)), -1.0)


def negative_sum_rate_graph_cat(tape, h, v_cat, noise):
    """Training loss from one concatenated precoder node of shape (B, Nt, K*d).

    Equivalent to negative_sum_rate_graph on the per-user column blocks, but
    folds users into the batch axis so the loss is a handful of large batched
    ops instead of K separate logdet chains.
    """
    h = np.asarray(h, dtype=np.complex128)
    if h.ndim != 4:
        raise ValueError("rate graph expects batched channels (B, K, Nr, Nt)")
    b, k, nr, nt = h.shape
    kd = v_cat.value.shape[-1]
    if v_cat.value.shape != (b, nt, kd) or kd % k != 0:
        raise ValueError(f"precoder node shape {v_cat.value.shape} does not match "
                         f"channels {h.shape}")
    d = kd // k
    h_all = tape.constant(h.reshape(b * k, nr, nt))
    hv = tape.matmul(h_all, tape.tile_batch(v_cat, k))
    eye = tape.constant(noise * np.eye(nr, dtype=np.complex128))
    cov_total = tape.add(tape.matmul(hv, tape.hermitian(hv)), eye)
    # zeroing each user's own columns leaves the interference gram
    mask = np.ones((k, 1, kd))
    for kk in range(k):
        mask[kk, 0, kk * d:(kk + 1) * d] = 0.0
    hv_int = tape.hadamard(hv, np.tile(mask, (b, 1, 1)))
    cov_int = tape.add(tape.matmul(hv_int, tape.hermitian(hv_int)), eye)
    diff = tape.sub(tape.logdet(cov_total), tape.logdet(cov_int))
    # mean over the B*K rows times K = batch mean of the per-sample user sums
    return tape.scale(tape.batch_mean(diff), -k / LN2)
