"""Per-frame convolutional feature extractor.

Four double-convolution blocks (two 3x3 convolutions each, group
normalization + ReLU after every convolution, no residual connections).
The first two blocks open with a stride-2 convolution, so the output grid
is the input divided by 4. Frames are encoded independently; all
cross-frame reasoning happens later in the transformer.
"""

from __future__ import annotations

import numpy as np

from .engine import Conv2d, InstanceNorm, Module, ops
from .engine.tensor import Tensor, as_tensor

STRIDE = 4


class _DoubleConvBlock(Module):
    """Two 3x3 convolutions, each followed by instance norm and ReLU.

    Runs channels-last internally; the layout conversion happens once at
    the encoder boundary.
    """

    def __init__(self, c_in, c_out, rng, downsample):
        self.conv1 = Conv2d(c_in, c_out, 3, rng, stride=2 if downsample else 1)
        self.norm1 = InstanceNorm(c_out)
        self.conv2 = Conv2d(c_out, c_out, 3, rng)
        self.norm2 = InstanceNorm(c_out)

    def forward(self, x):
        x = ops.conv2d_nhwc(
            x, self.conv1.weight, self.conv1.bias,
            stride=self.conv1.stride, padding=self.conv1.padding,
        )
        x = ops.relu(self.norm1(x))
        x = ops.conv2d_nhwc(
            x, self.conv2.weight, self.conv2.bias,
            stride=self.conv2.stride, padding=self.conv2.padding,
        )
        return ops.relu(self.norm2(x))


class FrameEncoder(Module):
    """(B, T, H, W) video -> (B, T, d_feat, H/4, W/4) features."""

    def __init__(self, channels, rng):
        blocks = []
        c_prev = 1
        for i, c in enumerate(channels):
            blocks.append(_DoubleConvBlock(c_prev, c, rng, downsample=i < 2))
            c_prev = c
        self.blocks = blocks
        self.d_feat = c_prev

    def forward(self, video):
        video = as_tensor(video)
        if video.ndim != 4:
            raise ValueError(f"expected video (B, T, H, W), got {video.shape}")
        b, t, h, w = video.shape
        if h % STRIDE or w % STRIDE:
            pad_h = (STRIDE - h % STRIDE) % STRIDE
            pad_w = (STRIDE - w % STRIDE) % STRIDE
            raise ValueError(
                f"frame size {h}x{w} not divisible by stride {STRIDE}; pad the "
                f"video by ({pad_h}, {pad_w}) pixels first"
            )
        x = ops.reshape(video, (b * t, h, w, 1))
        for block in self.blocks:
            x = block(x)
        x = ops.transpose(x, (0, 3, 1, 2))
        return ops.reshape(x, (b, t, self.d_feat, h // STRIDE, w // STRIDE))


def extract_track_features(features, queries):
    """Sample per-point track features from one frame's feature map.

    ``features``: (B, C, h, w) map at feature resolution (input / 4);
    ``queries``: (B, N, 2) points in image pixel coordinates. Returns
    (B, N, C).
    """
    features = as_tensor(features)
    queries = as_tensor(queries)
    coords = ops.mul(queries, np.float32(1.0 / STRIDE))
    return ops.grid_sample(features, coords)


def encode_frames(video, weights: FrameEncoder):
    """Functional alias used by tests and scripts."""
    return weights(video)
