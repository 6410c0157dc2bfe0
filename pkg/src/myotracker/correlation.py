"""Multi-scale correlation features around current point estimates.

A four-level pyramid is built from the encoder output by repeated 2x2
mean pooling. For every frame, point, and level, the track feature vector
is dot-multiplied with bilinearly sampled feature vectors on a k x k
integer-offset grid centered on the point (offsets live in that level's
own pixel units). Since both the dot product and bilinear interpolation
are linear in the feature map, the dot products are formed first (one
correlation map per frame and point) and sampled afterwards, which avoids
materializing k^2 feature vectors per location.
"""

from __future__ import annotations

import numpy as np

from .encoder import STRIDE
from .engine import ops
from .engine.tensor import as_tensor


def build_pyramid(features, levels=4, min_size=None):
    """List of ``levels`` feature maps, each 2x2 mean-pooled from the last.

    ``features``: (B, T, C, h, w). Level 0 is the input itself. When
    ``min_size`` is given, rejects pyramids whose top level would be
    smaller than ``min_size`` in either spatial dimension.
    """
    features = as_tensor(features)
    if features.ndim != 5:
        raise ValueError(f"expected features (B, T, C, h, w), got {features.shape}")
    pyramid = [features]
    for _ in range(levels - 1):
        pyramid.append(ops.avg_pool2(pyramid[-1]))
    if min_size is not None:
        top_h, top_w = pyramid[-1].shape[-2:]
        if top_h < min_size or top_w < min_size:
            need = min_size * STRIDE * 2 ** (levels - 1)
            raise ValueError(
                f"pyramid top level is {top_h}x{top_w}, smaller than the "
                f"{min_size}x{min_size} sampling kernel; this needs an input of "
                f"at least {need}x{need} pixels (or fewer pyramid levels)"
            )
    return pyramid


def offset_grid(k: int) -> np.ndarray:
    """(k*k, 2) integer offsets covering a centered k x k window."""
    r = (k - 1) // 2
    dx, dy = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1))
    return np.stack([dx.ravel(), dy.ravel()], axis=-1).astype(np.float32)


def correlate(q, pyramid, coords, k=5):
    """Correlation features ``C`` for all frames and points.

    ``q``: (B, N, C) track features; ``coords``: (B, T, N, 2) current
    point estimates in image pixel units; returns (B, T, N, levels*k*k).
    ``C`` is bilinear in (q, features): scaling either scales the output.
    """
    if k not in (5, 7):
        raise ValueError(f"sampling kernel must be 5 or 7, got {k}")
    q = as_tensor(q)
    coords = as_tensor(coords)
    b, n = q.shape[0], q.shape[1]
    t = coords.shape[1]
    offsets = offset_grid(k)
    kk = k * k

    features = []
    for level, feat in enumerate(pyramid):
        h, w = feat.shape[-2:]
        # dot-products first: one correlation map per (frame, point)
        fmat = ops.reshape(feat, (b, t, feat.shape[2], h * w))
        qb = ops.reshape(q, (b, 1, n, q.shape[2]))
        corr = ops.matmul(qb, fmat)  # (B, T, N, h*w)
        maps = ops.reshape(corr, (b * t * n, 1, h, w))

        scale = np.float32(1.0 / (STRIDE * 2**level))
        centers = ops.reshape(ops.mul(coords, scale), (b, t, n, 1, 2))
        pts = ops.add(centers, offsets.reshape(1, 1, 1, kk, 2))
        pts = ops.reshape(pts, (b * t * n, kk, 2))

        sampled = ops.grid_sample(maps, pts)  # (B*T*N, k*k, 1)
        features.append(ops.reshape(sampled, (b, t, n, kk)))
    return ops.concat(features, axis=-1)
