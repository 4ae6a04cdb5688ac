"""Motion-compensated spatio-temporal fusion of organized point clouds.

For a reference frame ``t`` and each frame ``T`` of its temporal window, the
cloud of ``T`` is bilaterally smoothed around the pixel that ``t`` tracks to,
mapped back by subtracting the 3D motion ``m^{t,T}`` and blended with a
temporal Gaussian weight::

    p_hat = sum_T nu f(t,T) (B_T[x_T] - m^{t,T}) / sum_T nu f(t,T)
    B_T[x] = sum_n d(p_x, p_n) g(I_x, I_n) p_n / sum_n d g

Pixels that end up without any valid term are holes; they are filled from
their spatial neighbours' local planes by :func:`fill_holes`.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Dict, Mapping, Optional

import numpy as np

from fuse4d.core import (
    CameraIntrinsics,
    DepthFrame,
    InvalidInputError,
    OrganizedCloud,
    Sequence,
    SequenceFrame,
)
from fuse4d.flow import FlowParams, estimate_flow
from fuse4d.lift import (
    MotionField3D,
    fb_check,
    fb_check_3d,
    integrate_motion,
    lift_flow,
    smooth_motion,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FusionParams:
    """Fusion settings. ``None`` sigmas resolve to scale-aware defaults.

    delta_d: spatial Gaussian (mm), default twice the median point spacing.
    delta_g: intensity Gaussian. delta_f: temporal Gaussian (frames),
    default ``n / 2``. delta_h: hole-fill Gaussian (mm), default ``delta_d``.
    motion_sigma: Gaussian (px) applied to each integrated motion field
    before fusion; 0 uses the raw lifted vectors.
    """

    temporal_window: int = 9
    spatial_radius: int = 2
    delta_d: Optional[float] = None
    delta_g: float = 0.1
    delta_f: Optional[float] = None
    delta_h: Optional[float] = None
    theta: float = 2.0
    fb_mode: str = "px"
    theta_mm: float = 2.0
    motion_sigma: float = 3.0
    fill: bool = True

    def __post_init__(self):
        n = self.temporal_window
        if n < 1 or n % 2 == 0:
            raise InvalidInputError("temporal window must be odd and >= 1")
        if self.spatial_radius < 1:
            raise InvalidInputError("spatial_radius must be >= 1")
        for name in ("delta_d", "delta_g", "delta_f", "delta_h", "theta", "theta_mm"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise InvalidInputError(f"{name} must be positive")
        if self.motion_sigma < 0:
            raise InvalidInputError("motion_sigma must be >= 0")
        if self.fb_mode not in ("px", "mm"):
            raise InvalidInputError("fb_mode must be 'px' or 'mm'")

    @property
    def half_window(self) -> int:
        return self.temporal_window // 2

    def temporal_sigma(self) -> float:
        return self.delta_f if self.delta_f is not None else self.temporal_window / 2.0


def median_spacing(cloud: OrganizedCloud) -> float:
    """Median distance between 4-connected valid neighbours."""
    p, v = cloud.points, cloud.valid
    d = [np.linalg.norm(p[:, 1:] - p[:, :-1], axis=-1)[v[:, 1:] & v[:, :-1]],
         np.linalg.norm(p[1:] - p[:-1], axis=-1)[v[1:] & v[:-1]]]
    d = np.concatenate(d)
    if d.size == 0:
        raise InvalidInputError("cloud has no adjacent valid points")
    return float(np.median(d))


def _offsets(radius: int):
    return [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]


def _neighbour(a: np.ndarray, dy: int, dx: int, fill=0):
    """``a[y + dy, x + dx]`` with ``fill`` outside the frame."""
    h, w = a.shape[:2]
    out = np.full_like(a, fill)
    ys, ye = max(0, -dy), min(h, h - dy)
    xs, xe = max(0, -dx), min(w, w - dx)
    if ys < ye and xs < xe:
        out[ys:ye, xs:xe] = a[ys + dy:ye + dy, xs + dx:xe + dx]
    return out


def bilateral_points(frame: SequenceFrame, radius: int, delta_d: float, delta_g: float):
    """Intensity-guided bilateral average of each valid point's neighbourhood.

    Returns ``(points, valid)``; invalid neighbours are skipped.
    """
    p = frame.cloud.points
    v = frame.cloud.valid
    inten = frame.intensity.values
    num = np.zeros_like(p)
    den = np.zeros(v.shape)
    for dy, dx in _offsets(radius):
        q = _neighbour(p, dy, dx)
        qv = _neighbour(v, dy, dx, False) & v
        qi = _neighbour(inten, dy, dx)
        w = np.exp(-((p - q) ** 2).sum(-1) / (2 * delta_d ** 2)) \
            * np.exp(-(inten - qi) ** 2 / (2 * delta_g ** 2))
        w = np.where(qv, w, 0.0)
        num += w[..., None] * q
        den += w
    out = np.divide(num, den[..., None], out=np.zeros_like(num), where=den[..., None] > 0)
    return out, v & (den > 0)


def _interior_dropouts(valid: np.ndarray) -> np.ndarray:
    count = sum(_neighbour(valid, dy, dx, False).astype(int)
                for dy, dx in _offsets(1) if (dy, dx) != (0, 0))
    return ~valid & (count >= 6)


def fuse_frame(t: int, frames: Mapping[int, SequenceFrame], motions: Mapping[int, MotionField3D],
               params: FusionParams, smoothed: Optional[Dict[int, tuple]] = None) -> OrganizedCloud:
    """Fuse the window ``frames`` (keyed by index) into the reference frame ``t``.

    ``motions[T]`` must be the integrated field ``t -> T`` for every ``T != t``
    in ``frames``. ``smoothed`` optionally caches :func:`bilateral_points`
    results per frame index; it is only valid for a fixed ``delta_d``.
    Returns the fused cloud; pixels without a valid term are flagged holes.
    """
    if t not in frames:
        raise InvalidInputError(f"reference frame {t} missing from the window")
    ref = frames[t]
    h, w = ref.height, ref.width
    for T, fr in frames.items():
        if (fr.height, fr.width) != (h, w):
            raise InvalidInputError("window frames differ in size")
        if T != t:
            m = motions.get(T)
            if m is None:
                raise InvalidInputError(f"missing motion field {t}->{T}")
            if (m.source, m.target) != (t, T):
                raise InvalidInputError(f"motion field {m.source}->{m.target} supplied for {t}->{T}")
    delta_d = params.delta_d if params.delta_d is not None else 2.0 * median_spacing(ref.cloud)
    sigma_f = params.temporal_sigma()
    ys, xs = np.mgrid[0:h, 0:w]
    num = np.zeros((h, w, 3))
    den = np.zeros((h, w))
    for T in sorted(frames):
        if smoothed is not None and T in smoothed:
            bp, bv = smoothed[T]
        else:
            bp, bv = bilateral_points(frames[T], params.spatial_radius, delta_d, params.delta_g)
            if smoothed is not None:
                smoothed[T] = (bp, bv)
        if T == t:
            nu = bv.copy()
            mvec = np.zeros((h, w, 3))
            tx, ty = xs, ys
        else:
            m = motions[T]
            tx = xs + m.displacement[..., 0]
            ty = ys + m.displacement[..., 1]
            inside = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
            tx = np.clip(tx, 0, w - 1)
            ty = np.clip(ty, 0, h - 1)
            nu = m.valid & inside & bv[ty, tx]
            mvec = m.vectors
        f = math.exp(-((t - T) ** 2) / (2 * sigma_f ** 2))
        wt = np.where(nu, f, 0.0)
        num += wt[..., None] * (bp[ty, tx] - mvec)
        den += wt
    fused_valid = den > 0
    pts = np.divide(num, den[..., None], out=np.zeros_like(num), where=fused_valid[..., None])
    candidates = ref.depth.valid | _interior_dropouts(ref.depth.valid)
    return OrganizedCloud(pts, fused_valid, intrinsics=ref.cloud.intrinsics,
                          holes=candidates & ~fused_valid)


def _plane_fit(points: np.ndarray):
    """Total-least-squares plane ``(centroid, unit normal)``; None if degenerate."""
    if len(points) < 3:
        return None
    c = points.mean(axis=0)
    q = points - c
    evals, evecs = np.linalg.eigh(q.T @ q)
    if evals[1] <= 1e-12 * max(evals[2], 1e-300):
        return None
    return c, evecs[:, 0]


def fill_holes(cloud: OrganizedCloud, params: Optional[FusionParams] = None,
               k: Optional[CameraIntrinsics] = None) -> OrganizedCloud:
    """Fill flagged holes from the local planes of their valid 8-neighbours.

    Each neighbour ``n`` contributes the point where the hole pixel's viewing
    ray meets the least-squares plane of ``n``'s own valid 3x3 neighbourhood,
    i.e. ``p_n`` moved along its local surface gradient to the hole's line of
    sight. Contributions are weighted by a Gaussian of the pixel distance
    times the median point spacing. Holes with fewer than 3 valid neighbours
    stay holes.
    """
    params = params or FusionParams()
    k = k or cloud.intrinsics
    if k is None:
        raise InvalidInputError("hole filling needs camera intrinsics")
    holes = cloud.holes
    if not holes.any():
        return cloud
    p, v = cloud.points, cloud.valid
    h, w = v.shape
    try:
        spacing = median_spacing(cloud)
    except InvalidInputError:
        # no adjacent pairs: use the pixel footprint at the median depth
        spacing = float(np.median(p[..., 2][v])) / math.sqrt(k.fx * k.fy) if v.any() else 1.0
    delta_d = params.delta_d if params.delta_d is not None else 2.0 * spacing
    delta_h = params.delta_h if params.delta_h is not None else delta_d
    out_p = p.copy()
    out_v = v.copy()
    still = holes.copy()
    planes: dict = {}

    def plane_at(ny, nx):
        key = (ny, nx)
        if key not in planes:
            y0, y1 = max(0, ny - 1), min(h, ny + 2)
            x0, x1 = max(0, nx - 1), min(w, nx + 2)
            patch = p[y0:y1, x0:x1][v[y0:y1, x0:x1]]
            planes[key] = _plane_fit(patch)
        return planes[key]

    for y, x in zip(*np.nonzero(holes)):
        ray = np.array([(x - k.u0) / k.fx, (y - k.v0) / k.fy, 1.0])
        acc = np.zeros(3)
        wsum = 0.0
        count = 0
        for dy, dx in _offsets(1):
            ny, nx = y + dy, x + dx
            if (dy, dx) == (0, 0) or not (0 <= ny < h and 0 <= nx < w) or not v[ny, nx]:
                continue
            count += 1
            fit = plane_at(ny, nx)
            if fit is None:
                continue
            c, normal = fit
            denom = normal @ ray
            if abs(denom) < 1e-9:
                continue
            q = ray * (normal @ c) / denom
            if q[2] <= 0:
                continue
            wgt = math.exp(-((dy * dy + dx * dx) * spacing ** 2) / (2 * delta_h ** 2))
            acc += wgt * q
            wsum += wgt
        if count >= 3 and wsum > 0:
            out_p[y, x] = acc / wsum
            out_v[y, x] = True
            still[y, x] = False
    return OrganizedCloud(out_p, out_v, intrinsics=cloud.intrinsics, holes=still)


def local_normals(cloud: OrganizedCloud, radius: int = 1):
    """Unit normals from a total-least-squares plane over each valid point's
    (2r+1)^2 neighbourhood; returns ``(normals, ok)``."""
    p, v = cloud.points, cloud.valid
    cnt = np.zeros(v.shape)
    s1 = np.zeros(p.shape)
    s2 = np.zeros(v.shape + (3, 3))
    for dy, dx in _offsets(radius):
        qv = _neighbour(v, dy, dx, False) & v
        q = np.where(qv[..., None], _neighbour(p, dy, dx) - p, 0.0)
        cnt += qv
        s1 += q
        s2 += q[..., :, None] * q[..., None, :]
    n = np.maximum(cnt, 1.0)
    cov = s2 - s1[..., :, None] * s1[..., None, :] / n[..., None, None]
    evals, evecs = np.linalg.eigh(cov)
    ok = v & (cnt >= 3) & (evals[..., 1] > 1e-12 * np.maximum(evals[..., 2], 1e-300))
    return evecs[..., 0], ok


def depth_on_rays(cloud: OrganizedCloud, k: Optional[CameraIntrinsics] = None) -> DepthFrame:
    """Depth map whose pixel rays meet each fused point's local plane.

    Fused points drift off their own pixel ray; sliding them along the local
    surface back onto the ray keeps the depth map consistent with the cloud.
    Points without a usable plane fall back to their z coordinate.
    """
    k = k or cloud.intrinsics
    if k is None:
        raise InvalidInputError("re-gridding needs camera intrinsics")
    normals, ok = local_normals(cloud)
    rays = k.rays(cloud.width, cloud.height)
    num = (normals * cloud.points).sum(-1)
    den = (normals * rays).sum(-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = num / den
    z0 = cloud.points[..., 2]
    use = ok & (np.abs(den) > 0.2) & np.isfinite(z) & (z > 0)
    depth = np.where(use, z, z0)
    return DepthFrame(np.where(cloud.valid, depth, 0.0), cloud.valid & (depth > 0))


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get("FUSE4D_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True, eq=False)
class PairFlows:
    """Validated flows between consecutive frames ``j`` and ``j + 1``."""

    forward: tuple
    backward: tuple


def compute_flows(seq: Sequence, flow_params: Optional[FlowParams] = None,
                  params: Optional[FusionParams] = None,
                  threads: Optional[int] = None) -> PairFlows:
    """Estimate forward and backward flow for every consecutive frame pair and
    mark forward-backward inconsistent vectors invalid."""
    flow_params = flow_params or FlowParams()
    params = params or FusionParams()
    threads = threads or _default_threads()
    jobs = []
    for j in range(len(seq) - 1):
        a, b = seq[j], seq[j + 1]
        jobs.append((a.intensity, b.intensity, a.index, b.index))
        jobs.append((b.intensity, a.intensity, b.index, a.index))

    def run(job):
        return estimate_flow(job[0], job[1], flow_params, job[2], job[3])

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            raw = list(pool.map(run, jobs))
    else:
        raw = [run(j) for j in jobs]
    fwd, bwd = [], []
    for j in range(len(seq) - 1):
        f, b = raw[2 * j], raw[2 * j + 1]
        if params.fb_mode == "px":
            fwd.append(f.with_validity(fb_check(f, b, params.theta)))
            bwd.append(b.with_validity(fb_check(b, f, params.theta)))
        else:
            k = seq.intrinsics
            mf = lift_flow(seq[j], seq[j + 1], f, k)
            mb = lift_flow(seq[j + 1], seq[j], b, k)
            fwd.append(f.with_validity(fb_check_3d(mf, mb, params.theta_mm)))
            bwd.append(b.with_validity(fb_check_3d(mb, mf, params.theta_mm)))
        log.debug("flows %d<->%d done", seq[j].index, seq[j + 1].index)
    return PairFlows(tuple(fwd), tuple(bwd))


def window_motions(seq: Sequence, t: int, flows: PairFlows, params: FusionParams,
                   links: Optional[dict] = None) -> Dict[int, MotionField3D]:
    """Integrated (and optionally smoothed) motion fields from ``t`` to each
    other frame of its temporal window, truncated at the sequence ends."""
    k = seq.intrinsics
    links = {} if links is None else links

    def link(j, forward):
        key = (j, forward)
        if key not in links:
            if forward:
                links[key] = lift_flow(seq[j], seq[j + 1], flows.forward[j], k)
            else:
                links[key] = lift_flow(seq[j], seq[j - 1], flows.backward[j - 1], k)
        return links[key]

    out = {}
    lo = max(0, t - params.half_window)
    hi = min(len(seq) - 1, t + params.half_window)
    for T in range(lo, hi + 1):
        if T == t:
            continue
        if T > t:
            chain = [link(j, True) for j in range(t, T)]
        else:
            chain = [link(j, False) for j in range(t, T, -1)]
        m = integrate_motion(chain)
        out[seq[T].index] = smooth_motion(m, params.motion_sigma)
    return out


def fuse_sequence(seq: Sequence, params: Optional[FusionParams] = None,
                  k: Optional[CameraIntrinsics] = None,
                  flow_params: Optional[FlowParams] = None,
                  flows: Optional[PairFlows] = None,
                  threads: Optional[int] = None) -> Sequence:
    """Denoise every frame of ``seq``; returns a sequence with fused depths.

    Output depth is read off the pixel rays through the local plane of the
    fused points (see :func:`depth_on_rays`). ``flows`` may be
    precomputed with :func:`compute_flows` and reused across settings.
    """
    params = params or FusionParams()
    if k is not None and k != seq.intrinsics:
        raise InvalidInputError("intrinsics differ from the sequence camera")
    threads = threads or _default_threads()
    if flows is None and len(seq) > 1 and params.temporal_window > 1:
        flows = compute_flows(seq, flow_params, params, threads)
    smoothed_by_delta: Dict[float, Dict[int, tuple]] = {}
    links: dict = {}

    def fuse_one(t):
        ref = seq[t]
        delta_d = params.delta_d if params.delta_d is not None else 2.0 * median_spacing(ref.cloud)
        local = replace(params, delta_d=delta_d)
        if params.temporal_window > 1 and len(seq) > 1:
            motions = window_motions(seq, t, flows, params, links)
        else:
            motions = {}
        window = {ref.index: ref}
        for T in motions:
            window[T] = next(f for f in seq if f.index == T)
        cache = smoothed_by_delta.setdefault(delta_d, {})
        fused = fuse_frame(ref.index, window, motions, local, cache)
        if params.fill:
            fused = fill_holes(fused, local, seq.intrinsics)
        return depth_on_rays(fused, seq.intrinsics)

    # Motion links and smoothing caches are filled lazily, so frames run in
    # order; threads only parallelise flow estimation.
    depths = [fuse_one(t) for t in range(len(seq))]
    return seq.replace_depths(depths)
