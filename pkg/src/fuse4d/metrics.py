"""Quantitative evaluation: roughness, shape correctness, decay fit, flow error."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Tuple

import numpy as np
from scipy.optimize import least_squares

from fuse4d.core import InvalidInputError, OrganizedCloud, Sequence
from fuse4d.flow import Flow2D


class FitFailure(RuntimeError):
    """Robust model fitting found no acceptable model."""


Roi = Tuple[int, int, int, int]  # x0, y0, x1, y1 (half-open)


def default_roi(width: int, height: int) -> Roi:
    """Central band covering 160..440 of 600 pixels, scaled to the frame."""
    return (round(width * 160 / 600), round(height * 160 / 600),
            round(width * 440 / 600), round(height * 440 / 600))


@dataclass(frozen=True)
class RoughnessParams:
    window: int = 7
    roi: Optional[Roi] = None
    absolute: bool = True

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise InvalidInputError("roughness window must be odd and >= 3")

    def roi_for(self, width: int, height: int) -> Roi:
        roi = self.roi if self.roi is not None else default_roi(width, height)
        x0, y0, x1, y1 = roi
        if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
            raise InvalidInputError(f"roi {roi} empty or outside {width}x{height} frame")
        return roi


def _shift(a, dy, dx, fill):
    h, w = a.shape[:2]
    out = np.full_like(a, fill)
    ys, ye = max(0, -dy), min(h, h - dy)
    xs, xe = max(0, -dx), min(w, w - dx)
    if ys < ye and xs < xe:
        out[ys:ye, xs:xe] = a[ys + dy:ye + dy, xs + dx:xe + dx]
    return out


def roughness_map(cloud: OrganizedCloud, window: int = 7):
    """Signed local roughness of every pixel and the mask where it is defined.

    The plane ``z = a x + b y + c`` is fitted by least squares to the valid
    window points; with the camera-facing normal ``n = (a, b, -1)``,
    ``Pi_i = sum_j (p_i - p_j) . n / |n|``. Pixels need a valid center, at
    least 4 other valid window points and a well-posed fit.
    """
    r = window // 2
    p, v = cloud.points, cloud.valid
    shape = v.shape
    cnt = np.zeros(shape)
    s = {key: np.zeros(shape) for key in ("x", "y", "z", "xx", "xy", "yy", "xz", "yz")}
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            qv = _shift(v, dy, dx, False) & v
            q = np.where(qv[..., None], _shift(p, dy, dx, 0.0) - p, 0.0)
            x, y, z = q[..., 0], q[..., 1], q[..., 2]
            cnt += qv
            s["x"] += x
            s["y"] += y
            s["z"] += z
            s["xx"] += x * x
            s["xy"] += x * y
            s["yy"] += y * y
            s["xz"] += x * z
            s["yz"] += y * z
    with np.errstate(divide="ignore", invalid="ignore"):
        n = np.where(cnt > 0, cnt, 1.0)
        cxx = s["xx"] - s["x"] ** 2 / n
        cxy = s["xy"] - s["x"] * s["y"] / n
        cyy = s["yy"] - s["y"] ** 2 / n
        cxz = s["xz"] - s["x"] * s["z"] / n
        cyz = s["yz"] - s["y"] * s["z"] / n
        det = cxx * cyy - cxy ** 2
        ok = v & (cnt >= 5) & (det > 1e-12 * np.maximum(cxx * cyy, 1e-300))
        safe = np.where(ok, det, 1.0)
        a = (cxz * cyy - cyz * cxy) / safe
        b = (cyz * cxx - cxz * cxy) / safe
        # p_i is the origin of q, so sum_j (p_i - p_j).n = -(a Sx + b Sy - Sz)
        pi = -(a * s["x"] + b * s["y"] - s["z"]) / np.sqrt(a * a + b * b + 1.0)
    return np.where(ok, pi, np.nan), ok


def local_roughness(cloud: OrganizedCloud, pixel, params: Optional[RoughnessParams] = None) -> float:
    """Roughness at ``pixel=(x, y)``; NaN when the plane fit is ill-posed."""
    params = params or RoughnessParams()
    x, y = pixel
    r = params.window // 2
    y0, x0 = max(0, y - r), max(0, x - r)
    crop = OrganizedCloud(cloud.points[y0:y + r + 1, x0:x + r + 1],
                          cloud.valid[y0:y + r + 1, x0:x + r + 1])
    pi, ok = roughness_map(crop, params.window)
    return float(pi[y - y0, x - x0]) if ok[y - y0, x - x0] else float("nan")


def mean_roughness(cloud: OrganizedCloud, params: Optional[RoughnessParams] = None) -> float:
    """Average (absolute by default) roughness over the computable ROI pixels."""
    params = params or RoughnessParams()
    x0, y0, x1, y1 = params.roi_for(cloud.width, cloud.height)
    pi, ok = roughness_map(cloud, params.window)
    vals = pi[y0:y1, x0:x1][ok[y0:y1, x0:x1]]
    if vals.size == 0:
        return float("nan")
    return float(np.mean(np.abs(vals) if params.absolute else vals))


def sequence_roughness(clouds, params: Optional[RoughnessParams] = None) -> Tuple[float, float]:
    """Mean and population std of the per-frame mean roughness."""
    if isinstance(clouds, Sequence):
        clouds = [f.cloud for f in clouds]
    per_frame = np.array([mean_roughness(c, params) for c in clouds])
    return float(np.mean(per_frame)), float(np.std(per_frame))


@dataclass(frozen=True)
class MlesacParams:
    iterations: int = 500
    sigma: float = 1.0
    seed: int = 0
    em_steps: int = 5
    refine: bool = True


@dataclass(frozen=True)
class SphereFit:
    center: np.ndarray
    radius: float
    inliers: np.ndarray
    score: float


def _sphere_from_samples(samples: np.ndarray):
    """Algebraic spheres through batches of 4 points, shape (B, 4, 3)."""
    a = np.concatenate([samples, np.ones(samples.shape[:2] + (1,))], axis=-1)
    rhs = -(samples ** 2).sum(-1)
    det = np.linalg.det(a)
    scale = np.abs(samples - samples.mean(1, keepdims=True)).max(axis=(1, 2)) + 1e-300
    ok = np.abs(det) > 1e-9 * scale ** 3
    sol = np.zeros((len(samples), 4))
    if ok.any():
        sol[ok] = np.linalg.solve(a[ok], rhs[ok][..., None])[..., 0]
    centers = -sol[:, :3] / 2
    r2 = (centers ** 2).sum(-1) - sol[:, 3]
    ok &= r2 > 0
    return centers, np.sqrt(np.where(ok, r2, 1.0)), ok


def _mixture_nll(res: np.ndarray, sigma: float, spread: float, steps: int):
    """Negative log-likelihood under a Gaussian-inlier/uniform-outlier mixture,
    with the mixing weight estimated by EM. ``res`` is (B, N)."""
    gauss = np.exp(-res ** 2 / (2 * sigma ** 2)) / (math.sqrt(2 * math.pi) * sigma)
    outlier = 1.0 / spread
    gamma = np.full((res.shape[0], 1), 0.5)
    for _ in range(steps):
        p_in = gamma * gauss
        z = p_in / (p_in + (1 - gamma) * outlier)
        gamma = z.mean(axis=1, keepdims=True)
    like = gamma * gauss + (1 - gamma) * outlier
    return -np.log(like).sum(axis=1), gamma[:, 0]


def fit_sphere_mlesac(points: np.ndarray, params: Optional[MlesacParams] = None) -> SphereFit:
    """Robust sphere fit: MLESAC over minimal 4-point samples, then
    geometric least squares on the inliers of the best hypothesis."""
    params = params or MlesacParams()
    pts = np.asarray(points, np.float64).reshape(-1, 3)
    if len(pts) < 4:
        raise FitFailure("need at least 4 points")
    rng = np.random.default_rng(params.seed)
    idx = np.stack([rng.choice(len(pts), 4, replace=False) for _ in range(params.iterations)])
    centers, radii, ok = _sphere_from_samples(pts[idx])
    spread = float(np.linalg.norm(pts.max(0) - pts.min(0))) or 1.0
    scores = np.full(params.iterations, np.inf)
    gammas = np.zeros(params.iterations)
    chunk = max(1, 4_000_000 // len(pts))
    for s in range(0, params.iterations, chunk):
        sl = slice(s, s + chunk)
        good = np.flatnonzero(ok[sl]) + s
        if good.size == 0:
            continue
        res = np.abs(np.linalg.norm(pts[None] - centers[good][:, None], axis=-1) - radii[good][:, None])
        scores[good], gammas[good] = _mixture_nll(res, params.sigma, spread, params.em_steps)
    if not np.isfinite(scores).any():
        raise FitFailure("no non-degenerate sphere hypothesis")
    best = int(np.argmin(scores))
    c, r, gamma = centers[best], float(radii[best]), gammas[best]

    def inliers_of(c, r):
        res = np.abs(np.linalg.norm(pts - c, axis=1) - r)
        p_in = gamma * np.exp(-res ** 2 / (2 * params.sigma ** 2)) / (math.sqrt(2 * math.pi) * params.sigma)
        return p_in > (1 - gamma) / spread

    inl = inliers_of(c, r)
    if inl.sum() < 4:
        raise FitFailure("best hypothesis has fewer than 4 inliers")
    if params.refine:
        sol = least_squares(lambda x: np.linalg.norm(pts[inl] - x[:3], axis=1) - x[3],
                            np.r_[c, r], method="lm")
        c, r = sol.x[:3], float(abs(sol.x[3]))
        inl = inliers_of(c, r)
    return SphereFit(np.asarray(c), r, inl, float(scores[best]))


def roi_points(cloud: OrganizedCloud, roi: Optional[Roi] = None) -> np.ndarray:
    x0, y0, x1, y1 = roi if roi is not None else default_roi(cloud.width, cloud.height)
    return cloud.points[y0:y1, x0:x1][cloud.valid[y0:y1, x0:x1]]


def shape_correctness(cloud: OrganizedCloud, roi: Optional[Roi], true_radius: float,
                      mlesac: Optional[MlesacParams] = None) -> float:
    """``1 - |r - r_true| / r_true`` with ``r`` from a robust sphere fit."""
    pts = roi_points(cloud, roi)
    if len(pts) < 100:
        raise InvalidInputError(f"roi holds {len(pts)} valid points; 100 required")
    fit = fit_sphere_mlesac(pts, mlesac)
    return 1.0 - abs(fit.radius - true_radius) / true_radius


@dataclass(frozen=True)
class DecayFit:
    delta_s: float
    delta_t: float
    r_squared: float
    degenerate: bool = False


def fit_noise_decay(roughness_by_n: Iterable[Tuple[float, float]]) -> DecayFit:
    """Fit ``R(n) = sqrt(delta_s^2 + delta_t^2 / n)`` by linear least squares
    of ``R^2`` against ``1/n``."""
    data = np.array(list(roughness_by_n), np.float64).reshape(-1, 2)
    if len(np.unique(data[:, 0])) < 3:
        raise InvalidInputError("decay fit needs at least 3 distinct frame counts")
    x = 1.0 / data[:, 0]
    y = data[:, 1] ** 2
    design = np.stack([np.ones_like(x), x], axis=1)
    (icpt, slope), *_ = np.linalg.lstsq(design, y, rcond=None)
    # coefficients below round-off of the data are zero
    tiny = 1e-12 * float(np.abs(y).max())
    icpt = 0.0 if abs(icpt) <= tiny else icpt
    slope = 0.0 if abs(slope) <= tiny else slope
    resid = y - design @ np.array([icpt, slope])
    ss_tot = float(((y - y.mean()) ** 2).sum())
    ss_res = float((resid ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    degenerate = bool(icpt < 0 or slope < 0)
    return DecayFit(math.sqrt(max(icpt, 0.0)), math.sqrt(max(slope, 0.0)), r2, degenerate)


def flow_epe(flow: Flow2D, ground_truth: Flow2D, mask: Optional[np.ndarray] = None):
    """Mean and median endpoint error (px) over ``mask`` (default: both valid)."""
    if flow.vectors.shape != ground_truth.vectors.shape:
        raise InvalidInputError("flow sizes differ")
    m = flow.valid & ground_truth.valid if mask is None else np.asarray(mask, bool)
    if not m.any():
        raise InvalidInputError("empty evaluation mask")
    err = np.linalg.norm((flow.vectors - ground_truth.vectors).astype(np.float64), axis=-1)[m]
    return float(err.mean()), float(np.median(err))


REPORT_COLUMNS = (
    "kind", "label", "frame", "sweep", "value", "mean_roughness_mm", "std_roughness_mm",
    "shape_correctness", "delta_s_mm", "delta_t_mm", "r_squared", "status", "params",
)


@dataclass
class ReportRow:
    """One CSV line: a frame, a sequence summary, a sweep point or a decay fit."""

    kind: str
    label: str
    frame: Optional[int] = None
    sweep: str = ""
    value: Optional[float] = None
    mean_roughness_mm: Optional[float] = None
    std_roughness_mm: Optional[float] = None
    shape_correctness: Optional[float] = None
    delta_s_mm: Optional[float] = None
    delta_t_mm: Optional[float] = None
    r_squared: Optional[float] = None
    status: str = "ok"
    params: str = ""


@dataclass
class MetricsReport:
    label: str
    params: dict = field(default_factory=dict)
    rows: List[ReportRow] = field(default_factory=list)

    def frame_rows(self) -> List[ReportRow]:
        return [r for r in self.rows if r.kind == "frame"]

    def summary(self) -> Optional[ReportRow]:
        return next((r for r in self.rows if r.kind == "sequence"), None)


def format_params(params: dict) -> str:
    return ";".join(f"{k}={params[k]}" for k in sorted(params))


def evaluate_sequence(seq: Sequence, label: str,
                      roughness: Optional[RoughnessParams] = None,
                      gt_radius: Optional[float] = None,
                      mlesac: Optional[MlesacParams] = None,
                      frames: Optional[List[int]] = None,
                      extra_params: Optional[dict] = None) -> MetricsReport:
    """Per-frame roughness (and shape correctness when ``gt_radius`` is given)
    plus a sequence summary row."""
    roughness = roughness or RoughnessParams()
    mlesac = mlesac or MlesacParams()
    positions = range(len(seq)) if frames is None else frames
    roi = roughness.roi_for(seq.width, seq.height)
    params = {"window": roughness.window, "roi": "x".join(map(str, roi)),
              "absolute": roughness.absolute}
    if gt_radius is not None:
        params.update(gt_radius_mm=gt_radius, mlesac_iterations=mlesac.iterations,
                      mlesac_sigma=mlesac.sigma, mlesac_seed=mlesac.seed)
    params.update(extra_params or {})
    report = MetricsReport(label, params)
    means, corr = [], []
    for t in positions:
        cloud = seq[t].cloud
        rough = mean_roughness(cloud, roughness)
        c = None
        status = "ok"
        if gt_radius is not None:
            try:
                c = shape_correctness(cloud, roi, gt_radius, mlesac)
            except (FitFailure, InvalidInputError):
                c, status = float("nan"), "fit_failed"
            corr.append(c)
        means.append(rough)
        report.rows.append(ReportRow("frame", label, frame=seq[t].index, mean_roughness_mm=rough,
                                     shape_correctness=c, status=status))
    arr = np.array(means)
    report.rows.append(ReportRow(
        "sequence", label, mean_roughness_mm=float(np.mean(arr)), std_roughness_mm=float(np.std(arr)),
        shape_correctness=float(np.mean(corr)) if corr else None, params=format_params(params)))
    return report
