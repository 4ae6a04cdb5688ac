"""Reference depth denoisers used in the comparisons.

All filters operate on the depth map, skip masked pixels inside their
windows and leave masked pixels masked. ``joint_bilateral`` and ``guided``
take the registered intensity as guidance. Temporal kinds average or take
medians across neighbouring frames without motion compensation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
import warnings

import numpy as np

from fuse4d.core import DepthFrame, InvalidInputError, Sequence

KINDS = ("gaussian", "bilateral", "joint_bilateral", "guided", "temporal_average", "st_median")
TEMPORAL_KINDS = ("temporal_average", "st_median")
# per-kind departures from the dataclass defaults (classic 3x3x3 median cube)
STANDARD_SETTINGS = {"st_median": {"window_radius": 1, "temporal_radius": 1}}


@dataclass(frozen=True)
class BaselineMethod:
    kind: str
    window_radius: int = 2
    sigma_spatial: float = 1.5
    sigma_range: float = 1.0
    sigma_intensity: float = 0.1
    eps_guided: float = 0.01
    temporal_radius: int = 2
    iterations: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"unknown baseline kind {self.kind!r}; expected one of {KINDS}")
        need = {}
        if self.kind != "temporal_average":
            need["window_radius"] = self.window_radius
        if self.kind not in TEMPORAL_KINDS:
            need["iterations"] = self.iterations
        if self.kind in ("gaussian", "bilateral", "joint_bilateral"):
            need["sigma_spatial"] = self.sigma_spatial
        if self.kind == "bilateral":
            need["sigma_range"] = self.sigma_range
        if self.kind == "joint_bilateral":
            need["sigma_intensity"] = self.sigma_intensity
        if self.kind == "guided":
            need["eps_guided"] = self.eps_guided
        if self.kind in TEMPORAL_KINDS:
            need["temporal_radius"] = self.temporal_radius
        bad = [k for k, v in need.items() if not v > 0]
        if bad:
            raise InvalidInputError(f"{self.kind} needs positive {', '.join(bad)}")

    def describe(self) -> dict:
        """Parameters relevant to this kind (for reports)."""
        keys = {
            "gaussian": ("window_radius", "sigma_spatial"),
            "bilateral": ("window_radius", "sigma_spatial", "sigma_range"),
            "joint_bilateral": ("window_radius", "sigma_spatial", "sigma_intensity"),
            "guided": ("window_radius", "eps_guided"),
            "temporal_average": ("temporal_radius",),
            "st_median": ("window_radius", "temporal_radius"),
        }[self.kind]
        out = {"kind": self.kind, "form": "standard"}
        out.update({k: getattr(self, k) for k in keys})
        if self.kind not in TEMPORAL_KINDS:
            out["iterations"] = self.iterations
        return out


def _shift(a, dy, dx, fill):
    h, w = a.shape[:2]
    out = np.full_like(a, fill)
    ys, ye = max(0, -dy), min(h, h - dy)
    xs, xe = max(0, -dx), min(w, w - dx)
    if ys < ye and xs < xe:
        out[ys:ye, xs:xe] = a[ys + dy:ye + dy, xs + dx:xe + dx]
    return out


def _window(r):
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]


def _weighted(depth, valid, weight_fn, r):
    num = np.zeros(depth.shape)
    den = np.zeros(depth.shape)
    for dy, dx in _window(r):
        qd = _shift(depth, dy, dx, 0.0)
        qv = _shift(valid, dy, dx, False)
        w = np.where(qv, weight_fn(dy, dx, qd), 0.0)
        num += w * qd
        den += w
    return np.divide(num, den, out=depth.copy(), where=den > 0)


def _box_mean(a, valid, r):
    num = np.zeros(a.shape)
    cnt = np.zeros(a.shape)
    for dy, dx in _window(r):
        qv = _shift(valid, dy, dx, False)
        num += np.where(qv, _shift(a, dy, dx, 0.0), 0.0)
        cnt += qv
    return np.divide(num, cnt, out=np.zeros_like(num), where=cnt > 0)


def _spatial(m: BaselineMethod, depth, valid, inten):
    r = m.window_radius
    if m.kind == "gaussian":
        return _weighted(depth, valid,
                         lambda dy, dx, qd: np.exp(-(dy * dy + dx * dx) / (2 * m.sigma_spatial ** 2)), r)
    if m.kind == "bilateral":
        return _weighted(depth, valid, lambda dy, dx, qd: np.exp(
            -(dy * dy + dx * dx) / (2 * m.sigma_spatial ** 2)
            - (qd - depth) ** 2 / (2 * m.sigma_range ** 2)), r)
    if m.kind == "joint_bilateral":
        return _weighted(depth, valid, lambda dy, dx, qd: np.exp(
            -(dy * dy + dx * dx) / (2 * m.sigma_spatial ** 2)
            - (_shift(inten, dy, dx, 0.0) - inten) ** 2 / (2 * m.sigma_intensity ** 2)), r)
    # guided filter: local linear model q = a I + b on box windows
    mean_i = _box_mean(inten, valid, r)
    mean_p = _box_mean(depth, valid, r)
    cov_ip = _box_mean(inten * depth, valid, r) - mean_i * mean_p
    var_i = _box_mean(inten * inten, valid, r) - mean_i ** 2
    a = cov_ip / (var_i + m.eps_guided)
    b = mean_p - a * mean_i
    return _box_mean(a, valid, r) * inten + _box_mean(b, valid, r)


def apply_baseline(method: BaselineMethod, seq: Sequence, t: int) -> DepthFrame:
    """Filter the depth map of frame position ``t``."""
    if not 0 <= t < len(seq):
        raise InvalidInputError(f"frame {t} outside sequence of {len(seq)}")
    frame = seq[t]
    valid = frame.depth.valid
    if method.kind in TEMPORAL_KINDS:
        lo = max(0, t - method.temporal_radius)
        hi = min(len(seq) - 1, t + method.temporal_radius)
        if hi - lo < 1:
            raise InvalidInputError(f"{method.kind} needs neighbouring frames")
        stack = np.stack([np.where(seq[j].depth.valid, seq[j].depth.values, np.nan)
                          for j in range(lo, hi + 1)])
        with warnings.catch_warnings():
            # pixels masked in every frame of the window give all-NaN slices
            warnings.simplefilter("ignore", RuntimeWarning)
            if method.kind == "temporal_average":
                out = np.nanmean(stack, axis=0)
            else:
                r = method.window_radius
                cube = np.concatenate([_shift(stack.transpose(1, 2, 0), dy, dx, np.nan)
                                       for dy, dx in _window(r)], axis=-1)
                out = np.nanmedian(cube, axis=-1)
        out = np.where(valid, out, 0.0)
        return DepthFrame(out, valid)
    depth = frame.depth.values
    for _ in range(method.iterations):
        depth = _spatial(method, depth, valid, frame.intensity.values)
        depth = np.where(valid, depth, 0.0)
    return DepthFrame(depth, valid)


def apply_baseline_sequence(method: BaselineMethod, seq: Sequence) -> Sequence:
    return seq.replace_depths([apply_baseline(method, seq, t) for t in range(len(seq))])


def standard_method(kind: str, **overrides) -> BaselineMethod:
    """Baseline of ``kind`` with the standard settings plus ``overrides``."""
    if kind not in KINDS:
        raise InvalidInputError(f"unknown baseline kind {kind!r}; expected one of {KINDS}")
    kw = dict(STANDARD_SETTINGS.get(kind, {}))
    kw.update(overrides)
    return BaselineMethod(kind, **kw)


def default_methods() -> list:
    """One standard instance of every baseline kind."""
    return [standard_method(kind) for kind in KINDS]


def with_strength(method: BaselineMethod, radius: int, iterations: int = 1) -> BaselineMethod:
    """Same filter with a different neighbourhood size / iteration count."""
    if method.kind in TEMPORAL_KINDS:
        return replace(method, temporal_radius=radius, window_radius=min(method.window_radius, radius))
    return replace(method, window_radius=radius, sigma_spatial=max(radius * 0.75, 0.5),
                   iterations=iterations)
