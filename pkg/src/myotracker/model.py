"""Full tracking model: configuration, assembly, and inference modes.

The default configuration is a single-pass tracker: one encoder pass, one
correlation pass at the initial coordinates, one transformer pass, and
coordinate predictions for every frame of the sequence at once. Ablation
toggles restore iterative refinement, sliding-window processing, and
additive positional encodings.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, replace

import numpy as np

from .correlation import build_pyramid, correlate
from .encoder import STRIDE, FrameEncoder, extract_track_features
from .engine import Module, ops
from .engine.tensor import Tensor, as_tensor
from .transformer import TrackTransformer, embed_initial_coords


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 256
    d_feat: int = 32
    encoder_channels: tuple = (16, 48, 48, 32)
    pyramid_levels: int = 4
    kernel_size: int = 5
    d_model: int = 64
    n_blocks: int = 4
    n_heads: int = 2
    ffn_dim: int = 64
    coord_embed_dim: int = 64
    refinement_iters: int = 0
    window_length: int = 0
    positional_encoding: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kernel_size not in (5, 7):
            raise ValueError(f"kernel_size must be 5 or 7, got {self.kernel_size}")
        if self.input_size % STRIDE:
            raise ValueError(f"input_size must be divisible by {STRIDE}")
        if self.window_length and (self.window_length < 2 or self.window_length % 2):
            raise ValueError("window_length must be 0 (whole sequence) or an even number >= 2")
        if self.refinement_iters < 0:
            raise ValueError("refinement_iters must be >= 0")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.coord_embed_dim % 4:
            raise ValueError("coord_embed_dim must be divisible by 4")
        if self.encoder_channels[-1] != self.d_feat:
            raise ValueError("last encoder channel width must equal d_feat")
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")

    @property
    def correlation_dim(self) -> int:
        return self.pyramid_levels * self.kernel_size**2

    @property
    def transformer_input_dim(self) -> int:
        return self.d_feat + self.correlation_dim + self.coord_embed_dim

    def with_overrides(self, **kwargs) -> "ModelConfig":
        return replace(self, **kwargs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "encoder_channels" in d:
            d["encoder_channels"] = tuple(d["encoder_channels"])
        return cls(**d)


def desk_config(**overrides) -> ModelConfig:
    """Reduced-resolution configuration for CPU-scale training runs.

    The architecture widths match the default; only the working resolution
    and pyramid depth shrink (a 4-level pyramid needs inputs of at least
    32 * kernel pixels per side)."""
    base = dict(input_size=48, pyramid_levels=2)
    base.update(overrides)
    return ModelConfig(**base)


class MyoTracker(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.encoder = FrameEncoder(config.encoder_channels, rng)
        self.transformer = TrackTransformer(
            config.transformer_input_dim,
            config.d_model,
            config.n_blocks,
            config.n_heads,
            config.ffn_dim,
            rng,
        )
        self.transformer_passes = 0  # instrumentation, reset freely

    # -- input normalization -------------------------------------------
    @staticmethod
    def _prepare(video, queries):
        v = video if isinstance(video, Tensor) else Tensor(np.asarray(video))
        q = queries if isinstance(queries, Tensor) else Tensor(np.asarray(queries))
        batched = v.ndim == 4
        if v.ndim == 3:
            v = ops.reshape(v, (1, *v.shape))
        if q.ndim == 2:
            q = ops.reshape(q, (1, *q.shape))
        if v.ndim != 4 or q.ndim != 3 or q.shape[-1] != 2:
            raise ValueError(
                f"expected video (T,H,W) or (B,T,H,W) and queries (N,2) or "
                f"(B,N,2), got {v.shape} and {q.shape}"
            )
        if q.shape[1] == 0:
            raise ValueError("query set is empty; at least one point is required")
        if v.shape[1] < 2:
            raise ValueError(f"sequence too short: T={v.shape[1]}, need T >= 2")
        lo, hi = float(v.data.min()), float(v.data.max())
        if lo < -1e-3 or hi > 1 + 1e-3:
            raise ValueError(
                f"video intensities must lie in [0, 1], found range [{lo:.3g}, {hi:.3g}]"
            )
        return v, q, batched

    # -- core single/refined pass ---------------------------------------
    def _track(self, pyramid, queries, n_iters):
        cfg = self.config
        level0 = pyramid[0]
        b, t, n = level0.shape[0], level0.shape[1], queries.shape[1]
        q_feat = extract_track_features(level0[:, 0], queries)
        emb = embed_initial_coords(queries, cfg.coord_embed_dim)

        coords = ops.broadcast_to(
            ops.reshape(queries, (b, 1, n, 2)), (b, t, n, 2)
        )
        for _ in range(n_iters):
            corr = correlate(q_feat, pyramid, coords, cfg.kernel_size)
            tokens = self.transformer.assemble_input(q_feat, corr, emb)
            if cfg.positional_encoding:
                tokens = self.transformer.add_positional_encoding(tokens, queries)
            tokens = self.transformer.run_blocks(tokens)
            self.transformer_passes += 1
            coords = self.transformer.predict_coordinates(tokens, coords)
        return coords

    def forward(self, video, queries):
        """Track ``queries`` (frame-0 points) through the whole video.

        Returns per-frame coordinates (T, N, 2), or (B, T, N, 2) when the
        inputs carry a batch dimension.
        """
        video, queries, batched = self._prepare(video, queries)
        cfg = self.config
        feats = self.encoder(video)
        pyramid = build_pyramid(feats, cfg.pyramid_levels, min_size=cfg.kernel_size)
        n_iters = max(1, cfg.refinement_iters)
        if cfg.window_length:
            out = self._forward_windowed(pyramid, queries, n_iters, video.shape[1])
        else:
            out = self._track(pyramid, queries, n_iters)
        return out if batched else ops.reshape(out, out.shape[1:])

    def _forward_windowed(self, pyramid, queries, n_iters, t):
        s = self.config.window_length
        if t < s:
            raise ValueError(
                f"sequence of T={t} frames is shorter than the window S={s}; "
                "use whole-sequence mode (window_length=0)"
            )
        offsets = window_offsets(t, s)
        segments = []
        win_queries = queries
        for i, off in enumerate(offsets):
            window = [level[:, off : off + s] for level in pyramid]
            pred = self._track(window, win_queries, n_iters)
            end = offsets[i + 1] if i + 1 < len(offsets) else t
            segments.append(pred[:, : end - off])
            if i + 1 < len(offsets):
                nxt = offsets[i + 1]
                # chained queries are data for the next window, not a
                # gradient path across windows
                win_queries = pred[:, nxt - off].detach()
        return ops.concat(segments, axis=1)

    def reset_counters(self):
        self.transformer_passes = 0


def window_offsets(t: int, s: int) -> list:
    """Start offsets of overlapping windows of length ``s``, stride s/2.

    The last window is clamped so the final frame is always covered; the
    count equals ceil((t - s) / (s / 2)) + 1.
    """
    if t < s:
        raise ValueError(f"T={t} shorter than window {s}")
    stride = s // 2
    n_win = int(np.ceil((t - s) / stride)) + 1
    return [min(i * stride, t - s) for i in range(n_win)]


def count_parameters(config: ModelConfig) -> int:
    """Exact number of trainable scalars for a configuration."""
    return MyoTracker(config).num_parameters()
