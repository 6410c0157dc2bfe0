"""Differentiable operations over :class:`~myotracker.engine.tensor.Tensor`.

Every function computes the forward result with numpy and registers a
closure that maps the output gradient to input gradients. Shapes follow
the conventions used across the package:

* images / feature maps: ``(B, C, H, W)``
* token grids: ``(B, T, N, d)``
* coordinates: ``(..., 2)`` as ``(x, y)`` in pixel units

Only the broadcasting the network needs is supported: numpy-style
elementwise broadcasting (summed back out in the backward pass) plus an
explicit ``broadcast_to``.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .tensor import Tensor, apply_op, as_tensor


def _colsum(a2):
    """Column sums via a GEMV, which beats ufunc axis-0 reduction here."""
    return np.ones(a2.shape[0], dtype=a2.dtype) @ a2


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return apply_op((a, b), out, bwd)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return apply_op((a, b), out, bwd)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bwd(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return apply_op((a, b), out, bwd)


def neg(a):
    a = as_tensor(a)
    return apply_op((a,), -a.data, lambda g: (-g,))


def absolute(a):
    """Elementwise |a|; the subgradient at 0 is taken as 0."""
    a = as_tensor(a)
    out = np.abs(a.data)

    def bwd(g):
        return (g * np.sign(a.data),)

    return apply_op((a,), out, bwd)


def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def bwd(g):
        return (g * (a.data > 0),)

    return apply_op((a,), out, bwd)


def gelu(a):
    """Gaussian error linear unit (tanh form), smooth everywhere."""
    a = as_tensor(a)
    x = a.data
    out, th = kernels.gelu_fwd(x)

    def bwd(g):
        return (kernels.gelu_bwd(g, x, th),)

    return apply_op((a,), out, bwd)


# ---------------------------------------------------------------------------
# movement / shape
# ---------------------------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return apply_op((a,), out, bwd)


def transpose(a, axes=None):
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))

    def bwd(g):
        return (np.transpose(g, inv),)

    return apply_op((a,), out, bwd)


def broadcast_to(a, shape):
    a = as_tensor(a)
    out = np.broadcast_to(a.data, shape)

    def bwd(g):
        return (_unbroadcast(g, a.shape),)

    return apply_op((a,), np.ascontiguousarray(out), bwd)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return apply_op(tuple(tensors), out, bwd)


def getitem(a, index):
    """Basic (slice/int) indexing; gradient scatters back into zeros."""
    a = as_tensor(a)
    out = a.data[index]

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[index] = g
        return (ga,)

    return apply_op((a,), np.ascontiguousarray(out), bwd)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return apply_op((a,), out, bwd)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    denom = a.size if axis is None else _axis_size(a.shape, axis)

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / denom,)

    return apply_op((a,), out, bwd)


def _axis_size(shape, axis):
    if isinstance(axis, int):
        axis = (axis,)
    n = 1
    for ax in axis:
        n *= shape[ax]
    return n


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            ga = _unbroadcast(ga, a.shape) if ga.shape != a.shape else ga
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            gb = _unbroadcast(gb, b.shape) if gb.shape != b.shape else gb
        return ga, gb

    return apply_op((a, b), out, bwd)


def linear(x, weight, bias=None):
    """Affine map over the trailing dimension.

    ``x: (..., d_in)``, ``weight: (d_out, d_in)``, ``bias: (d_out,)``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(
            f"linear: trailing dim {x.shape[-1]} does not match weight "
            f"d_in {weight.shape[1]}"
        )
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out2 = x2 @ weight.data.T
    if bias is not None:
        bias = as_tensor(bias)
        out2 += bias.data
    out = out2.reshape(*lead, weight.shape[0])

    def bwd(g):
        g2 = np.ascontiguousarray(g).reshape(-1, weight.shape[0])
        gx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        gb = None
        if bias is not None and bias.requires_grad:
            gb = _colsum(g2)
        return gx, gw, gb

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    if bias is None:
        return apply_op(inputs, out, lambda g: bwd(g)[:2])
    return apply_op(inputs, out, bwd)


# ---------------------------------------------------------------------------
# convolution / pooling
# ---------------------------------------------------------------------------

def _im2col(xp, k, stride, ho, wo):
    """(B, C, Hp, Wp) padded input -> (B*ho*wo, C*k*k) patch matrix."""
    b, c = xp.shape[:2]
    cols = np.empty((b, c, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(b * ho * wo, c * k * k)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation with zero padding.

    ``x: (B, C_in, H, W)`` (a leading batch dim is required; wrap single
    images as ``(1, C, H, W)``), ``weight: (C_out, C_in, k, k)``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects x (B,C,H,W) and weight (C_out,C_in,k,k)")
    b, cin, h, w = x.shape
    cout, cink, kh, kw = weight.shape
    if kh != kw:
        raise ValueError("conv2d supports square kernels only")
    if cin != cink:
        raise ValueError(
            f"conv2d: input has {cin} channels but kernel expects {cink}"
        )
    k = kh
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(
            f"conv2d: kernel {k} with stride {stride}, padding {padding} does not "
            f"fit input {h}x{w}"
        )
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, k, stride, ho, wo)
    w2 = weight.data.reshape(cout, -1)
    out2 = cols @ w2.T
    if bias is not None:
        bias = as_tensor(bias)
        out2 += bias.data
    out = out2.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def bwd(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        gw = gb = gx = None
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            gcols = (g2 @ w2).reshape(b, ho, wo, cin, k, k)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gw, gb

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    if bias is None:
        return apply_op(inputs, out, lambda g: bwd(g)[:2])
    return apply_op(inputs, out, bwd)


def conv2d_nhwc(x, weight, bias=None, stride=1, padding=0):
    """Channels-last convolution used on the encoder hot path.

    ``x: (B, H, W, C_in)``, ``weight: (C_out, C_in, k, k)`` (same layout
    as :func:`conv2d`). Patches are gathered into a channels-last column
    matrix with k*k strided copies, so the whole convolution is one fat
    GEMM; the columns are retained for the weight-gradient GEMM.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    b, h, w, cin = x.shape
    cout, cink, k, _ = weight.shape
    if cin != cink:
        raise ValueError(f"conv2d_nhwc: input has {cin} channels, kernel expects {cink}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    # columns in (i, j, Cin) order to match weight.transpose(2, 3, 1, 0)
    m = b * ho * wo
    cols = kernels.gather_patches(xp, b, ho, wo, k, cin, stride)
    w2 = weight.data.transpose(2, 3, 1, 0).reshape(k * k * cin, cout)
    out2 = cols @ w2
    if bias is not None:
        bias = as_tensor(bias)
        out2 += bias.data
    out = out2.reshape(b, ho, wo, cout)

    def bwd(g):
        g2 = g.reshape(m, cout)
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = _colsum(g2)
        if weight.requires_grad:
            gw2 = cols.T @ g2  # (k*k*cin, cout)
            gw = np.ascontiguousarray(
                gw2.reshape(k, k, cin, cout).transpose(3, 2, 0, 1)
            )
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(b, ho, wo, k, k, cin)
            gx = kernels.scatter_patches(gcols, xp.shape, h, w, k, stride, padding)
        return gx, gw, gb

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    if bias is None:
        return apply_op(inputs, out, lambda g: bwd(g)[:2])
    return apply_op(inputs, out, bwd)


def instance_norm_nhwc(x, gain, offset, eps=1e-5):
    """Per-channel spatial normalization, channels last.

    ``x (B, H, W, C)``: each (sample, channel) plane is normalized over
    its H*W pixels, then scaled/shifted by the per-channel affine. Batch
    independent, so inference does not depend on batch composition.
    """
    x, gain, offset = as_tensor(x), as_tensor(gain), as_tensor(offset)
    b, h, w, c = x.shape
    p = h * w
    x3 = x.data.reshape(b, p, c)
    mu = np.einsum("bpc->bc", x3) / p
    ex2 = np.einsum("bpc,bpc->bc", x3, x3) / p
    var = ex2 - mu * mu
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    scale = inv * gain.data
    shift = offset.data - mu * scale
    out = x3 * scale[:, None, :]
    out += shift[:, None, :]
    out = out.reshape(x.shape)

    def bwd(g):
        ggain = goff = gx = None
        g3 = g.reshape(b, p, c)
        xh = x3 - mu[:, None, :]
        xh *= inv[:, None, :]
        if gain.requires_grad:
            ggain = np.einsum("bpc,bpc->c", g3, xh)
        if offset.requires_grad:
            goff = _colsum(g.reshape(-1, c))
        if x.requires_grad:
            gh = g3 * gain.data
            m1 = np.einsum("bpc->bc", gh) / p
            m2 = np.einsum("bpc,bpc->bc", gh, xh) / p
            xh *= m2[:, None, :].astype(x.dtype)
            gh -= m1[:, None, :].astype(x.dtype)
            gh -= xh
            gh *= inv[:, None, :]
            gx = gh.reshape(x.shape)
        return gx, ggain, goff

    return apply_op((x, gain, offset), out, bwd)


def avg_pool2(x):
    """2x2 mean pooling with stride 2; trailing odd row/col is dropped."""
    x = as_tensor(x)
    h, w = x.shape[-2], x.shape[-1]
    ho, wo = h // 2, w // 2
    lead = x.shape[:-2]
    xt = x.data[..., : 2 * ho, : 2 * wo]
    out = xt.reshape(*lead, ho, 2, wo, 2).mean(axis=(-3, -1))

    def bwd(g):
        up = np.repeat(np.repeat(0.25 * g, 2, axis=-2), 2, axis=-1)
        if up.shape == x.shape:
            return (up,)
        gx = np.zeros_like(x.data)
        gx[..., : 2 * ho, : 2 * wo] = up
        return (gx,)

    return apply_op((x,), out, bwd)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def layer_norm(x, gain, offset, eps=1e-5):
    """Normalize the trailing dimension to zero mean / unit variance, then
    apply the learned affine ``gain * xhat + offset``."""
    x, gain, offset = as_tensor(x), as_tensor(gain), as_tensor(offset)
    d = x.shape[-1]
    xd = np.ascontiguousarray(x.data)
    x2 = xd.reshape(-1, d)
    out2, xhat2, inv = kernels.layer_norm_fwd(x2, gain.data, offset.data, eps)
    out = out2.reshape(x.shape)

    def bwd(g):
        ggain = goff = gx = None
        g2 = np.ascontiguousarray(g).reshape(-1, d)
        if gain.requires_grad:
            ggain = np.einsum("md,md->d", g2, xhat2)
        if offset.requires_grad:
            goff = _colsum(g2)
        if x.requires_grad:
            gx = kernels.layer_norm_bwd(g2, xhat2, inv, gain.data).reshape(x.shape)
        return gx, ggain, goff

    return apply_op((x, gain, offset), out, bwd)


def group_norm(x, gain, offset, groups, eps=1e-5):
    """Channel-group normalization over (group, H, W), batch independent.

    ``x: (B, C, H, W)``; ``gain``/``offset``: ``(C,)``.
    """
    x, gain, offset = as_tensor(x), as_tensor(gain), as_tensor(offset)
    b, c, h, w = x.shape
    if c % groups:
        raise ValueError(f"group_norm: {c} channels not divisible by {groups} groups")
    xg = x.data.reshape(b, groups, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    xc = xg - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(b, c, h, w)
    out = xhat * gain.data[:, None, None] + offset.data[:, None, None]

    def bwd(g):
        ggain = goff = gx = None
        if gain.requires_grad:
            ggain = np.sum(g * xhat, axis=(0, 2, 3))
        if offset.requires_grad:
            goff = np.sum(g, axis=(0, 2, 3))
        if x.requires_grad:
            gh = (g * gain.data[:, None, None]).reshape(b, groups, -1)
            xh = xhat.reshape(b, groups, -1)
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xh).mean(axis=-1, keepdims=True)
            gx = ((gh - m1 - xh * m2) * inv).reshape(b, c, h, w)
        return gx, ggain, goff

    return apply_op((x, gain, offset), out, bwd)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def softmax_attention(q, k, v):
    """Scaled dot-product attention over the last two axes.

    ``q: (..., L_q, d)``, ``k: (..., L_k, d)``, ``v: (..., L_k, d_v)``;
    leading axes must match. Rows of the returned attention output are
    convex combinations of ``v`` rows.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(
            f"softmax_attention: q dim {q.shape[-1]} != k dim {k.shape[-1]}"
        )
    if k.shape[-2] != v.shape[-2]:
        raise ValueError("softmax_attention: k and v disagree on L_k")
    scale = 1.0 / np.sqrt(q.shape[-1])
    qd = np.ascontiguousarray(q.data)
    kd = np.ascontiguousarray(k.data)
    vd = np.ascontiguousarray(v.data)
    scores = qd @ np.swapaxes(kd, -1, -2)
    scores *= scale
    probs = kernels.softmax_lastaxis_(scores)  # rows sum to 1
    out = probs @ vd

    def bwd(g):
        gq = gk = gv = None
        g = np.ascontiguousarray(g)
        gp = g @ np.swapaxes(vd, -1, -2)
        # softmax backward: dS = P * (dP - sum(dP * P)), in place on gp
        gs = kernels.softmax_bwd_(gp, probs)
        gs *= scale
        if q.requires_grad:
            gq = gs @ kd
            gq = _unbroadcast(gq, q.shape) if gq.shape != q.shape else gq
        if k.requires_grad:
            gk = np.swapaxes(gs, -1, -2) @ qd
            gk = _unbroadcast(gk, k.shape) if gk.shape != k.shape else gk
        if v.requires_grad:
            gv = np.swapaxes(probs, -1, -2) @ g
            gv = _unbroadcast(gv, v.shape) if gv.shape != v.shape else gv
        return gq, gk, gv

    return apply_op((q, k, v), out, bwd)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def grid_sample(feat, coords):
    """Bilinear sampling of feature maps at subpixel points.

    ``feat: (B, C, H, W)``, ``coords: (B, P, 2)`` as (x, y) in pixel units
    of the map. Out-of-bounds points are clamped to the valid sampling
    rectangle. Returns ``(B, P, C)``; differentiable in both arguments.
    """
    feat, coords = as_tensor(feat), as_tensor(coords)
    b, c, h, w = feat.shape
    if coords.ndim != 3 or coords.shape[-1] != 2 or coords.shape[0] != b:
        raise ValueError(
            f"grid_sample: coords must be ({b}, P, 2), got {coords.shape}"
        )
    cx = np.clip(coords.data[..., 0], 0.0, w - 1.0)
    cy = np.clip(coords.data[..., 1], 0.0, h - 1.0)
    x0 = np.floor(cx)
    y0 = np.floor(cy)
    # keep x0+1 in range: at the right border sample the last cell
    x0 = np.minimum(x0, w - 2) if w > 1 else np.zeros_like(x0)
    y0 = np.minimum(y0, h - 2) if h > 1 else np.zeros_like(y0)
    fx = cx - x0
    fy = cy - y0
    ix0 = x0.astype(np.int64)
    iy0 = y0.astype(np.int64)
    ix1 = np.minimum(ix0 + 1, w - 1)
    iy1 = np.minimum(iy0 + 1, h - 1)

    flat = feat.data.reshape(b, c, h * w)
    flat = np.ascontiguousarray(np.swapaxes(flat, 1, 2))  # (B, H*W, C)

    def take(iy, ix):
        idx = iy * w + ix  # (B, P)
        return np.take_along_axis(flat, idx[..., None], axis=1)

    f00 = take(iy0, ix0)
    f01 = take(iy0, ix1)
    f10 = take(iy1, ix0)
    f11 = take(iy1, ix1)
    wx = fx[..., None]
    wy = fy[..., None]
    w00 = (1 - wy) * (1 - wx)
    w01 = (1 - wy) * wx
    w10 = wy * (1 - wx)
    w11 = wy * wx
    out = w00 * f00 + w01 * f01 + w10 * f10 + w11 * f11

    def bwd(g):
        gfeat = gcoords = None
        if feat.requires_grad:
            # scatter-add through globally flattened indices; bincount is
            # far faster than add.at for the single-channel case
            boff = (np.arange(b, dtype=np.int64) * (h * w))[:, None]
            acc = np.zeros((b * h * w, c), dtype=feat.dtype)
            for iy, ix, wgt in ((iy0, ix0, w00), (iy0, ix1, w01), (iy1, ix0, w10), (iy1, ix1, w11)):
                idx = (iy * w + ix + boff).ravel()
                contrib = (g * wgt).reshape(-1, c)
                if c == 1:
                    acc[:, 0] += np.bincount(
                        idx, weights=contrib[:, 0], minlength=b * h * w
                    ).astype(feat.dtype, copy=False)
                else:
                    np.add.at(acc, idx, contrib)
            gfeat = np.swapaxes(acc.reshape(b, h * w, c), 1, 2).reshape(feat.shape)
        if coords.requires_grad:
            dfx = ((f01 - f00) * (1 - wy) + (f11 - f10) * wy)
            dfy = ((f10 - f00) * (1 - wx) + (f11 - f01) * wx)
            gx = (g * dfx).sum(axis=-1)
            gy = (g * dfy).sum(axis=-1)
            # clamped points have zero positional gradient
            inside_x = (coords.data[..., 0] > 0.0) & (coords.data[..., 0] < w - 1.0)
            inside_y = (coords.data[..., 1] > 0.0) & (coords.data[..., 1] < h - 1.0)
            gcoords = np.stack([gx * inside_x, gy * inside_y], axis=-1)
        return gfeat, gcoords

    return apply_op((feat, coords), out, bwd)


def bilinear_sample(feature_map, coords):
    """Sample one ``(C, H, W)`` map at a list of ``(x, y)`` points.

    Thin wrapper over :func:`grid_sample`; returns ``(P, C)``.
    """
    feature_map = as_tensor(feature_map)
    coords = as_tensor(coords)
    p = coords.shape[0]
    out = grid_sample(
        reshape(feature_map, (1, *feature_map.shape)),
        reshape(coords, (1, p, 2)),
    )
    return reshape(out, (p, feature_map.shape[0]))
