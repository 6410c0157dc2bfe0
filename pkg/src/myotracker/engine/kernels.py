"""Fused float32 kernels for the bandwidth-bound inner loops.

numpy evaluates one ufunc per pass, which on normalization/softmax chains
means reading the same activations five or six times. The numba kernels
below fuse those chains into one or two passes and parallelize across
rows. Every caller falls back to a numpy implementation when numba is
unavailable or the dtype is float64 (the gradcheck path), so the kernels
are an acceleration layer, never the only implementation.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is present in CI
    HAVE_NUMBA = False

    def njit(*a, **k):  # type: ignore
        def wrap(f):
            return f

        return wrap if not (len(a) == 1 and callable(a[0])) else a[0]

    prange = range


_JIT = dict(parallel=True, fastmath=True, cache=True, nogil=True)


# ---------------------------------------------------------------------------
# layer norm
# ---------------------------------------------------------------------------

@njit(**_JIT)
def _ln_fwd(x, gain, offset, eps, out, xhat, inv):
    m, d = x.shape
    for i in prange(m):
        s = np.float32(0.0)
        for j in range(d):
            s += x[i, j]
        mu = s / d
        v = np.float32(0.0)
        for j in range(d):
            t = x[i, j] - mu
            v += t * t
        r = np.float32(1.0) / np.sqrt(v / d + eps)
        inv[i] = r
        for j in range(d):
            h = (x[i, j] - mu) * r
            xhat[i, j] = h
            out[i, j] = h * gain[j] + offset[j]


@njit(**_JIT)
def _ln_bwd(g, xhat, inv, gain, gx):
    m, d = g.shape
    for i in prange(m):
        s1 = np.float32(0.0)
        s2 = np.float32(0.0)
        for j in range(d):
            gh = g[i, j] * gain[j]
            s1 += gh
            s2 += gh * xhat[i, j]
        m1 = s1 / d
        m2 = s2 / d
        r = inv[i]
        for j in range(d):
            gh = g[i, j] * gain[j]
            gx[i, j] = (gh - m1 - xhat[i, j] * m2) * r


def layer_norm_fwd(x2, gain, offset, eps):
    """Returns (out, xhat, inv) for rows of ``x2 (M, D)``."""
    if HAVE_NUMBA and x2.dtype == np.float32:
        m, d = x2.shape
        out = np.empty_like(x2)
        xhat = np.empty_like(x2)
        inv = np.empty(m, np.float32)
        _ln_fwd(x2, gain, offset, np.float32(eps), out, xhat, inv)
        return out, xhat, inv
    mu = x2.mean(axis=-1, keepdims=True)
    xc = x2 - mu
    var = np.einsum("md,md->m", xc, xc) / x2.shape[-1]
    inv = (1.0 / np.sqrt(var + eps)).astype(x2.dtype)
    xhat = xc * inv[:, None]
    return xhat * gain + offset, xhat, inv


def layer_norm_bwd(g2, xhat, inv, gain):
    """Input gradient; parameter gradients are cheap reductions done by
    the caller."""
    if HAVE_NUMBA and g2.dtype == np.float32 and xhat.dtype == np.float32:
        gx = np.empty_like(g2)
        _ln_bwd(g2, xhat, inv, gain.astype(np.float32, copy=False), gx)
        return gx
    d = g2.shape[-1]
    gh = g2 * gain
    m1 = gh.mean(axis=-1, keepdims=True)
    m2 = (np.einsum("md,md->m", gh, xhat) / d)[:, None].astype(g2.dtype)
    return (gh - m1 - xhat * m2) * inv[:, None]


# ---------------------------------------------------------------------------
# gelu (tanh form)
# ---------------------------------------------------------------------------

_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu_fwd(x):
    """In-place-chained numpy; np.tanh's SIMD loop beats scalar libm."""
    u = x * x
    u *= x
    u *= 0.044715
    u += x
    u *= _GELU_C
    th = np.tanh(u)
    out = th + 1.0
    out *= x
    out *= 0.5
    return out, th


def gelu_bwd(g, x, th):
    du = x * x
    du *= 3 * 0.044715
    du += 1.0
    du *= _GELU_C
    sech2 = th * th
    np.subtract(1.0, sech2, out=sech2)
    du *= sech2
    du *= x
    du += 1.0
    du += th
    du *= 0.5
    du *= g
    return du


# ---------------------------------------------------------------------------
# softmax over the last axis
# ---------------------------------------------------------------------------

@njit(**_JIT)
def _row_max_sub(s, mx):
    m, l = s.shape
    for i in prange(m):
        v = s[i, 0]
        for j in range(1, l):
            if s[i, j] > v:
                v = s[i, j]
        mx[i] = v
        for j in range(l):
            s[i, j] -= v


@njit(**_JIT)
def _row_div_by_sum(s):
    m, l = s.shape
    for i in prange(m):
        tot = np.float32(0.0)
        for j in range(l):
            tot += s[i, j]
        r = np.float32(1.0) / tot
        for j in range(l):
            s[i, j] *= r


@njit(**_JIT)
def _softmax_bwd_rows(gp, p):
    m, l = gp.shape
    for i in prange(m):
        dot = np.float32(0.0)
        for j in range(l):
            dot += gp[i, j] * p[i, j]
        for j in range(l):
            gp[i, j] = (gp[i, j] - dot) * p[i, j]


def softmax_lastaxis_(scores):
    """In-place softmax over the last axis; returns its argument.

    Row max/sum run in numba; the exp stays on numpy's SIMD loop, which
    is several times faster than scalar libm calls.
    """
    if HAVE_NUMBA and scores.dtype == np.float32:
        s2 = scores.reshape(-1, scores.shape[-1])
        mx = np.empty(s2.shape[0], np.float32)
        _row_max_sub(s2, mx)
        np.exp(s2, out=s2)
        _row_div_by_sum(s2)
        return scores
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    return scores


def softmax_bwd_(gp, probs):
    """In-place softmax gradient: gp <- probs * (gp - sum(gp * probs))."""
    if HAVE_NUMBA and gp.dtype == np.float32:
        _softmax_bwd_rows(gp.reshape(-1, gp.shape[-1]), probs.reshape(-1, probs.shape[-1]))
        return gp
    gp -= np.einsum("...i,...i->...", gp, probs)[..., None]
    gp *= probs
    return gp


# ---------------------------------------------------------------------------
# conv patch gather / scatter
# ---------------------------------------------------------------------------

@njit(**_JIT)
def _gather_patches(xp, cols6, k, stride):
    b, ho, wo = cols6.shape[:3]
    cin = xp.shape[3]
    for bi in prange(b):
        for oh in range(ho):
            for i in range(k):
                ih = oh * stride + i
                for ow in range(wo):
                    iw0 = ow * stride
                    for j in range(k):
                        for ci in range(cin):
                            cols6[bi, oh, ow, i, j, ci] = xp[bi, ih, iw0 + j, ci]


@njit(**_JIT)
def _scatter_patches(gcols6, gxp, k, stride):
    b, ho, wo = gcols6.shape[:3]
    cin = gxp.shape[3]
    for bi in prange(b):
        for oh in range(ho):
            for i in range(k):
                ih = oh * stride + i
                for ow in range(wo):
                    iw0 = ow * stride
                    for j in range(k):
                        for ci in range(cin):
                            gxp[bi, ih, iw0 + j, ci] += gcols6[bi, oh, ow, i, j, ci]


def gather_patches(xp, b, ho, wo, k, cin, stride):
    """(B, Hp, Wp, C) padded input -> (B*ho*wo, k*k*C) columns."""
    cols = np.empty((b * ho * wo, k * k * cin), dtype=xp.dtype)
    cols6 = cols.reshape(b, ho, wo, k, k, cin)
    if HAVE_NUMBA and xp.dtype == np.float32:
        _gather_patches(xp, cols6, k, stride)
        return cols
    for i in range(k):
        for j in range(k):
            np.copyto(
                cols6[:, :, :, i, j, :],
                xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :],
            )
    return cols


def scatter_patches(gcols6, xp_shape, h, w, k, stride, padding):
    """Accumulate column gradients back onto the (padded) input grid."""
    gxp = np.zeros(xp_shape, dtype=gcols6.dtype)
    if HAVE_NUMBA and gcols6.dtype == np.float32:
        # parallelism is across the batch axis, so overlapping patch
        # writes within one image stay on one thread
        _scatter_patches(gcols6, gxp, k, stride)
    else:
        ho, wo = gcols6.shape[1], gcols6.shape[2]
        for i in range(k):
            for j in range(k):
                gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += (
                    gcols6[:, :, :, i, j, :]
                )
    if padding:
        return gxp[:, padding : padding + h, padding : padding + w, :]
    return gxp
