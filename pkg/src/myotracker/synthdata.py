"""Synthetic echo-like sequences with exact ground-truth trajectories.

A crescent-shaped wall (two concentric elliptical arcs) contracts and
shears over one cardiac cycle under a time-varying affine deformation
about the wall center. Speckle texture is rendered once at the reference
frame and advected by backward warping with the exact inverse map, so the
keypoint trajectories (the analytic advection of the reference keypoints)
are correct by construction rather than estimated.

Frame 0 is the reference phase (zero displacement), and the cycle closes:
the deformation at the final frame returns to the identity.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, field, replace

import numpy as np
from scipy import ndimage

__all__ = [
    "MotionParams",
    "SyntheticSample",
    "phase_weight",
    "deformation_matrix",
    "displacement_field",
    "reference_keypoints",
    "exact_trajectories",
    "generate",
    "random_params",
    "generate_dataset",
]


@dataclass(frozen=True)
class MotionParams:
    image_size: int = 256
    center: tuple = (0.52, 0.48)       # fraction of image size
    axis_angle: float = 0.35           # long-axis orientation, radians
    radius_x: float = 0.26             # wall centerline radii, fraction of size
    radius_y: float = 0.33
    wall_thickness: float = 0.085      # fraction of size
    arc_start: float = -2.35           # free-wall base angle, radians
    arc_span: float = 4.0              # crescent angular extent (> pi)
    contraction: float = 0.16          # peak fractional contraction, short axis
    long_shortening: float = 0.10      # peak fractional contraction, long axis
    shear: float = 0.06                # peak shear along the long axis
    systole_shape: float = 1.0         # phase-warp exponent, peak at (1/2)^(1/p)
    n_frames: int = 64
    n_per_subgraph: int = 32
    scale_mm_per_px: float = 0.52
    speckle_grain: float = 1.1         # band-pass low sigma, pixels
    background_level: float = 0.14
    noise_sigma: float = 0.02
    dropout_sector: bool = False
    noise_burst: bool = False
    max_step_px: float | None = None   # per-frame displacement bound check


@dataclass
class SyntheticSample:
    video: np.ndarray          # (T, H, W) float32 in [0, 1]
    trajectories: np.ndarray   # (T, 2N, 2): inner points then outer points
    n_per_subgraph: int
    scale_mm_per_px: float
    seed: int
    params: MotionParams

    @property
    def inner(self):
        return self.trajectories[:, : self.n_per_subgraph]

    @property
    def outer(self):
        return self.trajectories[:, self.n_per_subgraph :]


def phase_weight(phi, shape=1.0):
    """Activation s(phi) of the deformation over one cycle.

    s(0) = s(1) = 0, smooth, peak value 1 at phi = 0.5^(1/shape).
    """
    phi = np.asarray(phi, dtype=np.float64)
    return np.sin(np.pi * phi**shape) ** 2


def deformation_matrix(params: MotionParams, phi) -> np.ndarray:
    """2x2 linear part of the deformation about the wall center at phase
    ``phi``; identity at phi = 0 and phi = 1."""
    s = float(phase_weight(phi, params.systole_shape))
    ca, sa = np.cos(params.axis_angle), np.sin(params.axis_angle)
    rot = np.array([[ca, -sa], [sa, ca]])
    stretch = np.array(
        [[1.0 - params.contraction * s, params.shear * s],
         [0.0, 1.0 - params.long_shortening * s]]
    )
    return rot @ stretch @ rot.T


def _center_px(params: MotionParams) -> np.ndarray:
    return np.array(params.center, dtype=np.float64) * params.image_size


def displacement_field(params: MotionParams, points, phi) -> np.ndarray:
    """Analytic displacement u(x, phi) = (M(phi) - I)(x - c) at the given
    points ((..., 2), pixel units)."""
    m = deformation_matrix(params, phi) - np.eye(2)
    rel = np.asarray(points, dtype=np.float64) - _center_px(params)
    return rel @ m.T


def reference_keypoints(params: MotionParams):
    """Inner and outer boundary points at the reference frame.

    Both sub-graphs run from the free-wall base (index 0) to the septal
    base (index N-1). Returns (inner (N, 2), outer (N, 2)).
    """
    n = params.n_per_subgraph
    size = params.image_size
    theta = params.arc_start + np.linspace(0.0, params.arc_span, n)
    ca, sa = np.cos(params.axis_angle), np.sin(params.axis_angle)
    rot = np.array([[ca, -sa], [sa, ca]])
    half_w = 0.5 * params.wall_thickness * size

    def ring(dr):
        rx = params.radius_x * size + dr
        ry = params.radius_y * size + dr
        pts = np.stack([rx * np.cos(theta), ry * np.sin(theta)], axis=-1)
        return pts @ rot.T + _center_px(params)

    return ring(-half_w), ring(+half_w)


def exact_trajectories(params: MotionParams) -> np.ndarray:
    """(T, 2N, 2) analytic keypoint trajectories over one cycle."""
    inner, outer = reference_keypoints(params)
    pts = np.concatenate([inner, outer], axis=0)
    rel = pts - _center_px(params)
    t = params.n_frames
    traj = np.empty((t, pts.shape[0], 2), dtype=np.float64)
    for ti in range(t):
        m = deformation_matrix(params, ti / (t - 1))
        traj[ti] = rel @ m.T + _center_px(params)
    return traj


def _speckle_texture(params: MotionParams, rng: np.random.Generator) -> np.ndarray:
    """Band-pass speckle, brightened inside the wall crescent."""
    size = params.image_size
    noise = rng.normal(size=(size, size))
    lo = ndimage.gaussian_filter(noise, params.speckle_grain)
    hi = ndimage.gaussian_filter(noise, 3.0 * params.speckle_grain)
    band = lo - hi
    band = np.clip(band / (2.5 * band.std() + 1e-12) + 0.5, 0.0, 1.0)

    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    pts = np.stack([xs, ys], axis=-1) - _center_px(params)
    ca, sa = np.cos(params.axis_angle), np.sin(params.axis_angle)
    rot_back = np.array([[ca, sa], [-sa, ca]])
    local = pts @ rot_back.T
    rx, ry = params.radius_x * size, params.radius_y * size
    rho = np.sqrt((local[..., 0] / rx) ** 2 + (local[..., 1] / ry) ** 2)
    rbar = 0.5 * (rx + ry)
    ring_dist = np.abs(rho - 1.0) * rbar
    half_w = 0.5 * params.wall_thickness * size
    radial = 1.0 / (1.0 + np.exp((ring_dist - half_w) / (0.15 * half_w + 1e-9)))

    ang = np.arctan2(local[..., 1], local[..., 0])
    rel_ang = np.mod(ang - params.arc_start, 2.0 * np.pi)
    soft = 0.12
    angular = np.clip(rel_ang / soft, 0.0, 1.0) * np.clip(
        (params.arc_span - rel_ang) / soft, 0.0, 1.0
    )
    angular = np.clip(angular, 0.0, 1.0)
    mask = radial * angular

    tex = params.background_level * (0.4 + 0.9 * band)
    tex = tex + mask * (0.25 + 0.62 * band)
    return np.clip(tex, 0.0, 1.0)


def generate(params: MotionParams, seed: int = 0) -> SyntheticSample:
    """Render one sample; raises if the wall would leave the frame."""
    size = params.image_size
    t = params.n_frames
    if t < 2:
        raise ValueError("n_frames must be >= 2")
    traj = exact_trajectories(params)
    margin = 2.0
    if (traj.min() < margin) or (traj.max() > size - 1 - margin):
        raise ValueError(
            "motion parameters push the wall out of frame "
            f"(extent [{traj.min():.1f}, {traj.max():.1f}] for size {size}); "
            "reduce radii, amplitudes, or recenter"
        )
    step = np.abs(np.diff(traj, axis=0)).max()
    limit = params.max_step_px if params.max_step_px is not None else 0.075 * size
    if step > limit:
        raise ValueError(
            f"per-frame displacement {step:.2f}px exceeds the limit {limit:.2f}px"
        )

    rng = np.random.default_rng(seed)
    tex = _speckle_texture(params, rng)
    center = _center_px(params)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    grid = np.stack([xs.ravel(), ys.ravel()], axis=-1) - center

    video = np.empty((t, size, size), dtype=np.float32)
    sector_mask = None
    if params.dropout_sector:
        ang = np.arctan2(ys - center[1], xs - center[0])
        a0 = rng.uniform(-np.pi, np.pi)
        width = rng.uniform(0.25, 0.6)
        d = np.abs(np.mod(ang - a0 + np.pi, 2 * np.pi) - np.pi)
        sector_mask = np.where(d < width, 0.22, 1.0)
    burst_frames = set()
    if params.noise_burst:
        burst_frames = set(rng.choice(t, size=max(1, t // 10), replace=False).tolist())

    for ti in range(t):
        m_inv = np.linalg.inv(deformation_matrix(params, ti / (t - 1)))
        src = grid @ m_inv.T + center
        frame = ndimage.map_coordinates(
            tex, [src[:, 1].reshape(size, size), src[:, 0].reshape(size, size)],
            order=1, mode="nearest",
        )
        if sector_mask is not None:
            frame = frame * sector_mask
        sigma = params.noise_sigma * (4.0 if ti in burst_frames else 1.0)
        if sigma > 0:
            frame = frame + rng.normal(0.0, sigma, frame.shape)
        video[ti] = np.clip(frame, 0.0, 1.0)

    return SyntheticSample(
        video=video,
        trajectories=traj.astype(np.float32),
        n_per_subgraph=params.n_per_subgraph,
        scale_mm_per_px=params.scale_mm_per_px,
        seed=seed,
        params=params,
    )


def random_params(rng: np.random.Generator, image_size: int = 256, **overrides) -> MotionParams:
    """Randomized geometry, amplitudes, rate, and sizes for one sample."""
    base = dict(
        image_size=image_size,
        center=(rng.uniform(0.46, 0.56), rng.uniform(0.44, 0.54)),
        axis_angle=rng.uniform(-0.7, 0.7),
        radius_x=rng.uniform(0.20, 0.27),
        radius_y=rng.uniform(0.24, 0.33),
        wall_thickness=rng.uniform(0.07, 0.11),
        arc_start=rng.uniform(-2.9, -1.9),
        arc_span=rng.uniform(3.6, 4.6),
        contraction=rng.uniform(0.08, 0.22),
        long_shortening=rng.uniform(0.05, 0.14),
        shear=rng.uniform(-0.08, 0.08),
        systole_shape=rng.uniform(0.75, 1.3),
        n_frames=int(rng.integers(38, 129)),
        n_per_subgraph=int(rng.integers(21, 45)),
        scale_mm_per_px=0.52 * 256.0 / image_size * rng.uniform(0.9, 1.1),
        dropout_sector=bool(rng.random() < 0.2),
        noise_burst=bool(rng.random() < 0.2),
        noise_sigma=rng.uniform(0.01, 0.03),
    )
    base.update(overrides)
    return MotionParams(**base)


def generate_dataset(count: int, seed: int = 0, image_size: int = 256, **overrides):
    """``count`` randomized samples plus a parameter manifest.

    Each sample draws its own parameters and render seed from a child of
    ``seed``, so disjoint seeds give disjoint geometry streams.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    samples = []
    manifest = []
    for i in range(count):
        rng = np.random.default_rng((seed, i))
        for attempt in range(8):
            params = random_params(rng, image_size=image_size, **overrides)
            try:
                sample = generate(params, seed=int(np.random.default_rng((seed, i, attempt)).integers(2**31)))
            except ValueError:
                continue
            break
        else:
            raise RuntimeError(f"could not draw valid motion parameters for sample {i}")
        samples.append(sample)
        entry = asdict(params)
        entry.update(sample_index=i, render_seed=sample.seed)
        manifest.append(entry)
    return samples, manifest
