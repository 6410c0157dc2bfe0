"""Time/track factorized attention over per-(frame, point) tokens.

Each block attends along the time axis (one sequence per tracked point),
then along the track axis (one sequence per frame), with a pre-norm
residual feed-forward sublayer after each attention. No positional
encoding is added by default: correlation features plus the embedded
initial coordinates carry all location information, which keeps the stack
equivariant to frame and point permutations. The ablation toggle restores
additive sinusoidal time/space encodings.
"""

from __future__ import annotations

import numpy as np

from .engine import LayerNorm, Linear, Module, ops
from .engine.tensor import Tensor, as_tensor


def sinusoid_embedding(values: np.ndarray, width: int) -> np.ndarray:
    """Interleaved (sin, cos) embedding over a geometric frequency ladder.

    ``values``: any shape; returns ``values.shape + (width,)`` float32.
    Channel 2j is sin(v * w_j), channel 2j+1 is cos(v * w_j), with
    w_j = 10000^(-2j/width). Zero value -> sines 0, cosines 1.
    """
    if width % 2:
        raise ValueError(f"embedding width must be even, got {width}")
    half = width // 2
    freqs = np.power(10000.0, -2.0 * np.arange(half) / width)
    ang = np.asarray(values, dtype=np.float64)[..., None] * freqs
    out = np.empty(ang.shape[:-1] + (width,), dtype=np.float32)
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def embed_initial_coords(queries, width: int):
    """Sinusoidal embedding of query coordinates: x and y each get
    ``width/2`` channels. ``queries``: (..., 2) in pixels."""
    if width % 2:
        raise ValueError(f"coordinate embedding width must be even, got {width}")
    pts = queries.data if isinstance(queries, Tensor) else np.asarray(queries)
    ex = sinusoid_embedding(pts[..., 0], width // 2)
    ey = sinusoid_embedding(pts[..., 1], width // 2)
    return Tensor(np.concatenate([ex, ey], axis=-1))


class _Attention(Module):
    """Multi-head self-attention over the second-to-last axis."""

    def __init__(self, d_model, n_heads, rng):
        if d_model % n_heads:
            raise ValueError(f"d_model {d_model} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.norm = LayerNorm(d_model)
        self.q_proj = Linear(d_model, d_model, rng)
        self.k_proj = Linear(d_model, d_model, rng)
        self.v_proj = Linear(d_model, d_model, rng)
        self.out_proj = Linear(d_model, d_model, rng)

    def forward(self, x):
        # x: (G, L, d) where G merges all batch-like axes
        g, length, d = x.shape
        h = self.n_heads
        dh = d // h
        xn = self.norm(x)

        def split(t):
            t = ops.reshape(t, (g, length, h, dh))
            return ops.transpose(t, (0, 2, 1, 3))  # (G, h, L, dh)

        att = ops.softmax_attention(
            split(self.q_proj(xn)), split(self.k_proj(xn)), split(self.v_proj(xn))
        )
        att = ops.reshape(ops.transpose(att, (0, 2, 1, 3)), (g, length, d))
        return ops.add(x, self.out_proj(att))


class _FeedForward(Module):
    def __init__(self, d_model, hidden, rng):
        self.norm = LayerNorm(d_model)
        self.fc1 = Linear(d_model, hidden, rng)
        self.fc2 = Linear(hidden, d_model, rng)

    def forward(self, x):
        return ops.add(x, self.fc2(ops.gelu(self.fc1(self.norm(x)))))


class TimeTrackBlock(Module):
    """time attention -> ffn -> track attention -> ffn, all residual."""

    def __init__(self, d_model, n_heads, ffn_dim, rng):
        self.time_attn = _Attention(d_model, n_heads, rng)
        self.time_ffn = _FeedForward(d_model, ffn_dim, rng)
        self.track_attn = _Attention(d_model, n_heads, rng)
        self.track_ffn = _FeedForward(d_model, ffn_dim, rng)

    def forward(self, x):
        b, t, n, d = x.shape
        # sequences along time, one per (batch, point)
        xt = ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (b * n, t, d))
        xt = self.time_ffn(self.time_attn(xt))
        x = ops.transpose(ops.reshape(xt, (b, n, t, d)), (0, 2, 1, 3))
        # sequences along tracks, one per (batch, frame)
        xs = ops.reshape(x, (b * t, n, d))
        xs = self.track_ffn(self.track_attn(xs))
        return ops.reshape(xs, (b, t, n, d))


class TrackTransformer(Module):
    """Maps aggregated per-(frame, point) inputs to coordinate updates."""

    def __init__(self, d_input, d_model, n_blocks, n_heads, ffn_dim, rng):
        self.input_proj = Linear(d_input, d_model, rng)
        self.blocks = [
            TimeTrackBlock(d_model, n_heads, ffn_dim, rng) for _ in range(n_blocks)
        ]
        self.final_norm = LayerNorm(d_model)
        self.head = Linear(d_model, 2, rng, zero_init=True)
        self.d_model = d_model

    def assemble_input(self, track_features, correlation, coord_embedding):
        """Concatenate Q, C and the coordinate embedding per token and
        project to d_model.

        ``track_features``: (B, N, d_feat); ``correlation``: (B, T, N, w_c);
        ``coord_embedding``: (B, N, w_e). Returns (B, T, N, d_model).
        """
        q = as_tensor(track_features)
        c = as_tensor(correlation)
        e = as_tensor(coord_embedding)
        b, t, n = c.shape[0], c.shape[1], c.shape[2]
        if q.shape[0] != b or q.shape[1] != n or e.shape[0] != b or e.shape[1] != n:
            raise ValueError(
                f"inconsistent shapes: Q {q.shape}, C {c.shape}, emb {e.shape}"
            )
        qb = ops.broadcast_to(ops.reshape(q, (b, 1, n, q.shape[-1])), (b, t, n, q.shape[-1]))
        eb = ops.broadcast_to(ops.reshape(e, (b, 1, n, e.shape[-1])), (b, t, n, e.shape[-1]))
        return self.input_proj(ops.concat([qb, c, eb], axis=-1))

    def add_positional_encoding(self, tokens, queries):
        """Ablation only: additive sinusoidal time and space encodings."""
        b, t, n, d = tokens.shape
        time_enc = sinusoid_embedding(np.arange(t, dtype=np.float64), d)
        tokens = ops.add(tokens, time_enc.reshape(1, t, 1, d))
        pts = queries.data if isinstance(queries, Tensor) else np.asarray(queries)
        space = embed_initial_coords(pts, d).data.reshape(b, 1, n, d)
        return ops.add(tokens, space)

    def run_blocks(self, tokens):
        for block in self.blocks:
            tokens = block(tokens)
        return self.final_norm(tokens)

    def predict_coordinates(self, tokens, base_coords):
        """Linear head on each token gives a displacement added to the
        per-point base coordinates. ``base_coords``: (B, N, 2) or
        (B, T, N, 2)."""
        disp = self.head(tokens)
        base = as_tensor(base_coords)
        if base.ndim == 3:
            base = ops.reshape(base, (base.shape[0], 1, base.shape[1], 2))
        return ops.add(base, disp)
