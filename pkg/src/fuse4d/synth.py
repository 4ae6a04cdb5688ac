"""Synthetic RGB-D sequences with analytic ground truth, plus noise injection."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from fuse4d.core import (
    CameraIntrinsics,
    DepthFrame,
    GroundTruth,
    InvalidInputError,
    Sequence,
    SequenceFrame,
)
from fuse4d.flow import Flow2D

# Reference setup the desk-scale scene is scaled from: 600x600 frames,
# 140 mm ball at 1 m seen with a 1500 px focal length.
FULL_SIZE = 600
FULL_FOCAL = 1500.0
FULL_DEPTH = 1000.0
FULL_RADIUS = 140.0


class SceneSpecError(InvalidInputError):
    pass


@dataclass(frozen=True)
class SphereSceneSpec:
    radius_mm: float = FULL_RADIUS * 128 / FULL_SIZE
    center_depth_mm: float = FULL_DEPTH * 128 / FULL_SIZE
    size: int = 128
    fall_px: float = 2.0
    frames: int = 16
    background_depth_mm: Optional[float] = None
    texture_contrast: float = 0.6
    texture_seed: int = 7

    def __post_init__(self):
        if self.radius_mm <= 0 or self.center_depth_mm <= self.radius_mm:
            raise SceneSpecError("need 0 < radius < center depth")
        if self.size < 8 or self.frames < 1:
            raise SceneSpecError("size must be >= 8 and frames >= 1")


@dataclass(frozen=True)
class NoiseSpec:
    depth_sigma: float = 0.0
    intensity_sigma: float = 0.0
    texture_correlated: bool = False
    outlier_fraction: float = 0.0
    outlier_mm: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if min(self.depth_sigma, self.intensity_sigma, self.outlier_fraction, self.outlier_mm) < 0:
            raise InvalidInputError("noise magnitudes must be >= 0")
        if self.outlier_fraction > 1:
            raise InvalidInputError("outlier_fraction must be <= 1")


def scaled_intrinsics(size: int) -> CameraIntrinsics:
    """Camera with the reference field of view at ``size`` x ``size`` pixels."""
    f = FULL_FOCAL * size / FULL_SIZE
    c = (size - 1) / 2.0
    return CameraIntrinsics(f, f, c, c)


def desk_sphere_spec(**overrides) -> SphereSceneSpec:
    return SphereSceneSpec(**overrides)


def full_sphere_spec(**overrides) -> SphereSceneSpec:
    base = dict(radius_mm=FULL_RADIUS, center_depth_mm=FULL_DEPTH, size=FULL_SIZE,
                fall_px=2.0, frames=50)
    base.update(overrides)
    return SphereSceneSpec(**base)


def value_noise(xs: np.ndarray, ys: np.ndarray, seed: int, cell: float = 4.0,
                octaves: int = 2) -> np.ndarray:
    """Smooth lattice noise in [0, 1] evaluated at continuous coordinates."""
    rng = np.random.default_rng(seed)
    lattice = rng.random((octaves, 256, 256))
    out = np.zeros(np.broadcast(xs, ys).shape)
    norm = 0.0
    for o in range(octaves):
        c = cell / (2 ** o)
        u, v = xs / c, ys / c
        i0, j0 = np.floor(u).astype(np.int64), np.floor(v).astype(np.int64)
        fu, fv = u - i0, v - j0
        fu = fu * fu * (3 - 2 * fu)
        fv = fv * fv * (3 - 2 * fv)
        lat = lattice[o]

        def at(i, j):
            return lat[j % 256, i % 256]

        top = at(i0, j0) * (1 - fu) + at(i0 + 1, j0) * fu
        bot = at(i0, j0 + 1) * (1 - fu) + at(i0 + 1, j0 + 1) * fu
        amp = 0.5 ** o
        out += amp * (top * (1 - fv) + bot * fv)
        norm += amp
    return out / norm


def _texture(xs, ys, seed, contrast):
    return np.clip(0.5 + contrast * (value_noise(xs, ys, seed) - 0.5) * 2.0, 0.0, 1.0)


def sphere_center_pixel(spec: SphereSceneSpec, frame: int):
    """Projected sphere center (column, row) at ``frame``."""
    mid = (spec.size - 1) / 2.0
    col = float(math.floor(mid + 0.5))
    row0 = math.floor(mid + 0.5 - spec.fall_px * (spec.frames - 1) / 2.0)
    return col, row0 + spec.fall_px * frame


def _sphere_depth(rays: np.ndarray, center: np.ndarray, radius: float):
    """Z-depth of the near ray/sphere intersection; NaN where the ray misses."""
    rc = rays @ center
    rr = np.einsum("...i,...i->...", rays, rays)
    disc = rc * rc - rr * (center @ center - radius * radius)
    with np.errstate(invalid="ignore"):
        d = (rc - np.sqrt(disc)) / rr
    return np.where(disc >= 0, d, np.nan)


def gen_falling_sphere(spec: Optional[SphereSceneSpec] = None,
                       k: Optional[CameraIntrinsics] = None) -> Sequence:
    """Noiseless textured sphere translating downwards by ``fall_px`` per frame.

    The sphere texture is attached to the projected sphere center, so the
    intensity motion on the sphere is exactly ``(0, fall_px)`` per frame. The
    background carries a static texture and masked depth (or a far plane when
    ``background_depth_mm`` is set).
    """
    spec = spec or SphereSceneSpec()
    k = k or scaled_intrinsics(spec.size)
    n = spec.size
    rays = k.rays(n, n)
    ys, xs = np.mgrid[0:n, 0:n].astype(np.float64)
    background = _texture(xs, ys, spec.texture_seed + 1, spec.texture_contrast)
    frames, centers = [], []
    for t in range(spec.frames):
        col, row = sphere_center_pixel(spec, t)
        z = spec.center_depth_mm
        center = np.array([(col - k.u0) * z / k.fx, (row - k.v0) * z / k.fy, z])
        depth = _sphere_depth(rays, center, spec.radius_mm)
        on = np.isfinite(depth)
        if on[0].any() or on[-1].any() or on[:, 0].any() or on[:, -1].any():
            raise SceneSpecError(f"sphere leaves the {n}x{n} frame at frame {t}")
        if not on.any():
            raise SceneSpecError("sphere is not visible")
        tex = _texture(xs - col, ys - row, spec.texture_seed, spec.texture_contrast)
        intensity = np.where(on, tex, background)
        depth = np.where(on, depth, 0.0)
        valid = on.copy()
        if spec.background_depth_mm is not None:
            depth = np.where(on, depth, spec.background_depth_mm)
            valid[:] = True
        frames.append(SequenceFrame.from_arrays(t, intensity, depth, k, valid))
        centers.append(center)
    gt = GroundTruth("sphere", radius_mm=spec.radius_mm, centers=np.array(centers),
                     fall_px=spec.fall_px)
    return Sequence(tuple(frames), k, gt, name="sphere")


def gen_textured_plane(size: int = 128, depth: float = FULL_DEPTH * 128 / FULL_SIZE,
                       contrast: float = 0.6, k: Optional[CameraIntrinsics] = None,
                       frames: int = 1, texture_seed: int = 11) -> Sequence:
    """Static fronto-parallel plane at ``depth`` mm with a procedural texture."""
    if depth <= 0:
        raise InvalidInputError("plane depth must be positive")
    k = k or scaled_intrinsics(size)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    tex = _texture(xs, ys, texture_seed, contrast)
    dmap = np.full((size, size), float(depth))
    seq = [SequenceFrame.from_arrays(t, tex, dmap, k) for t in range(frames)]
    return Sequence(tuple(seq), k, GroundTruth("plane", plane_depth=float(depth)), name="plane")


def ground_truth_flow(seq: Sequence, t: int, T: int) -> Flow2D:
    """Analytic integer flow t -> T for a generated sphere sequence.

    Sphere pixels of frame ``t`` move by ``(0, fall_px * (T - t))``; the
    static background has zero flow.
    """
    gt = seq.ground_truth
    if gt is None or gt.shape != "sphere":
        raise InvalidInputError("ground-truth flow needs a sphere sequence")
    dy = gt.fall_px * (T - t)
    if dy != round(dy):
        raise InvalidInputError("ground-truth displacement is not integral")
    on = _sphere_mask(seq, t)
    vec = np.zeros((seq.height, seq.width, 2), np.int64)
    vec[on, 1] = int(round(dy))
    return Flow2D(vec, None, seq[t].index, seq[T].index)


def _sphere_mask(seq: Sequence, t: int) -> np.ndarray:
    gt = seq.ground_truth
    d = _sphere_depth(seq.intrinsics.rays(seq.width, seq.height), gt.centers[t], gt.radius_mm)
    return np.isfinite(d)


def _gradient_magnitude(img: np.ndarray) -> np.ndarray:
    gy, gx = np.gradient(img)
    return np.hypot(gx, gy)


def add_noise(seq: Sequence, noise: NoiseSpec) -> Sequence:
    """Add independent Gaussian noise to depth and intensity of every frame.

    Each frame draws from its own stream seeded by ``(seed, frame index)``.
    With ``texture_correlated`` the per-pixel depth sigma is scaled by the
    local intensity-gradient magnitude normalized to unit mean over valid
    pixels.
    """
    out = []
    for f in seq:
        rng = np.random.default_rng([noise.seed, f.index])
        depth = f.depth.values
        valid = f.depth.valid
        inten = f.intensity.values
        if noise.depth_sigma > 0:
            sigma = np.full(depth.shape, noise.depth_sigma)
            if noise.texture_correlated:
                g = _gradient_magnitude(inten)
                mean = g[valid].mean() if valid.any() else 0.0
                sigma = noise.depth_sigma * (g / mean if mean > 0 else np.ones_like(g))
            depth = np.where(valid, depth + sigma * rng.standard_normal(depth.shape), 0.0)
        if noise.outlier_fraction > 0:
            idx = np.flatnonzero(valid)
            count = int(math.floor(noise.outlier_fraction * idx.size))
            pick = rng.choice(idx, size=count, replace=False)
            depth = depth.copy()
            depth.flat[pick] += rng.uniform(-noise.outlier_mm, noise.outlier_mm, count)
        if noise.intensity_sigma > 0:
            inten = np.clip(inten + noise.intensity_sigma * rng.standard_normal(inten.shape), 0, 1)
        if depth is f.depth.values and inten is f.intensity.values:
            out.append(f)
            continue
        valid = valid & (depth > 0)
        out.append(SequenceFrame.from_arrays(f.index, inten, DepthFrame(depth, valid),
                                             seq.intrinsics))
    return seq.with_frames(out)


def inject_outliers(flow: Flow2D, fraction: float, magnitude: float, seed: int = 0):
    """Replace ``floor(fraction * N)`` vectors by ones at least ``magnitude`` px off.

    Returns the corrupted flow and the boolean mask of altered pixels.
    """
    if not 0 <= fraction <= 1:
        raise InvalidInputError("fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    n = flow.width * flow.height
    count = int(math.floor(fraction * n))
    mask = np.zeros(n, bool)
    vec = flow.vectors.reshape(-1, 2).copy()
    if count:
        pick = rng.choice(n, size=count, replace=False)
        mask[pick] = True
        reach = int(math.ceil(magnitude)) + 2
        cand = np.array([(a, b) for a in range(-reach, reach + 1) for b in range(-reach, reach + 1)
                         if a * a + b * b >= magnitude * magnitude])
        vec[pick] += cand[rng.integers(0, len(cand), size=count)]
    corrupted = Flow2D(vec.reshape(flow.vectors.shape), flow.valid, flow.source, flow.target)
    return corrupted, mask.reshape(flow.height, flow.width)
