"""Dense integer optical flow by min-sum belief propagation.

The objective is a patch-based unary term plus a truncated-quadratic
smoothness term summed over each pixel's 4-neighbourhood::

    E(s) = sum_i psi1(s_i) + sum_i sum_{n in N(i)} psi2(s_i, s_n)

Every undirected edge appears twice in that sum, so the MRF edge potential
used by the message passing is ``2 * psi2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from numba import njit

from fuse4d.core import IntensityFrame, InvalidInputError


@dataclass(frozen=True)
class FlowParams:
    patch_radius: int = 3
    search_radius: int = 4
    smoothness: float = 0.005
    unary_truncation: float = 0.05
    pairwise_truncation: float = 16.0
    iterations: int = 4

    def __post_init__(self):
        if self.patch_radius < 1 or self.search_radius < 1 or self.iterations < 1:
            raise InvalidInputError("patch_radius, search_radius and iterations must be >= 1")
        if self.smoothness < 0:
            raise InvalidInputError("smoothness weight must be >= 0")
        if self.unary_truncation <= 0 or self.pairwise_truncation <= 0:
            raise InvalidInputError("truncation thresholds must be positive")


@dataclass(frozen=True, eq=False)
class Flow2D:
    """Integer displacement field from frame ``source`` to frame ``target``.

    ``vectors[y, x] = (sx, sy)``.
    """

    vectors: np.ndarray
    valid: Optional[np.ndarray] = None
    source: int = 0
    target: int = 1
    energy_trace: tuple = field(default=(), compare=False)

    def __post_init__(self):
        v = np.array(self.vectors, copy=True)
        if v.ndim != 3 or v.shape[2] != 2:
            raise InvalidInputError("flow vectors must be (H, W, 2)")
        if not np.issubdtype(v.dtype, np.integer):
            if not np.all(np.isfinite(v)) or np.any(v != np.round(v)):
                raise InvalidInputError("flow vectors must be integer-valued")
        v = v.astype(np.int64)
        valid = np.ones(v.shape[:2], bool) if self.valid is None else np.array(self.valid, bool)
        if valid.shape != v.shape[:2]:
            raise InvalidInputError("flow validity mask shape mismatch")
        v.setflags(write=False)
        valid.setflags(write=False)
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "valid", valid)

    @property
    def height(self) -> int:
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]

    def with_validity(self, valid: np.ndarray) -> "Flow2D":
        return replace(self, valid=np.asarray(valid, bool))

    def targets(self):
        """Target pixel coordinates and their in-bounds mask."""
        ys, xs = np.mgrid[0:self.height, 0:self.width]
        tx = xs + self.vectors[..., 0]
        ty = ys + self.vectors[..., 1]
        inside = (tx >= 0) & (tx < self.width) & (ty >= 0) & (ty < self.height)
        return tx, ty, inside


def _label_grid(radius: int):
    """Displacements in grid order: label ``a*K + b`` is ``(sx, sy) = (b - R, a - R)``."""
    k = 2 * radius + 1
    a, b = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    return np.stack([b.ravel() - radius, a.ravel() - radius], axis=1)


def _tie_order(labels: np.ndarray) -> np.ndarray:
    # smallest |s| first, then lexicographic (sx, sy)
    return np.lexsort((labels[:, 1], labels[:, 0], (labels ** 2).sum(axis=1)))


def _box_sum(a: np.ndarray, r: int) -> np.ndarray:
    """Sum over a (2r+1)^2 window with zero padding, by explicit shifted adds."""
    h, w = a.shape
    p = np.pad(a, r)
    rows = np.zeros((h, w + 2 * r))
    for dy in range(2 * r + 1):
        rows += p[dy:dy + h]
    out = np.zeros((h, w))
    for dx in range(2 * r + 1):
        out += rows[:, dx:dx + w]
    return out


def _shifted(img: np.ndarray, sx: int, sy: int):
    """``img[y + sy, x + sx]`` with an in-bounds mask (zeros outside)."""
    h, w = img.shape
    out = np.zeros_like(img)
    mask = np.zeros((h, w), bool)
    y0, y1 = max(0, -sy), min(h, h - sy)
    x0, x1 = max(0, -sx), min(w, w - sx)
    if y0 < y1 and x0 < x1:
        out[y0:y1, x0:x1] = img[y0 + sy:y1 + sy, x0 + sx:x1 + sx]
        mask[y0:y1, x0:x1] = True
    return out, mask


def unary_cost_map(src: np.ndarray, dst: np.ndarray, sx: int, sy: int,
                   params: FlowParams) -> np.ndarray:
    """Truncated patch SSD mean for one displacement at every pixel."""
    moved, inside = _shifted(dst, sx, sy)
    diff = np.where(inside, (src - moved) ** 2, 0.0)
    r = params.patch_radius
    num = _box_sum(diff, r)
    den = _box_sum(inside.astype(np.float64), r)
    with np.errstate(divide="ignore", invalid="ignore"):
        cost = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.inf)
    return np.minimum(cost, params.unary_truncation)


def unary_cost(i_t: IntensityFrame, i_T: IntensityFrame, pixel, s, params: FlowParams) -> float:
    """Unary cost of assigning displacement ``s=(sx, sy)`` to ``pixel=(x, y)``."""
    a, b = _as_array(i_t), _as_array(i_T)
    x, y = pixel
    if not (0 <= x < a.shape[1] and 0 <= y < a.shape[0]):
        raise InvalidInputError("pixel out of bounds")
    r = params.patch_radius
    total, count = 0.0, 0
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            px, py = x + dx, y + dy
            qx, qy = px + s[0], py + s[1]
            if not (0 <= px < a.shape[1] and 0 <= py < a.shape[0]):
                continue
            if not (0 <= qx < b.shape[1] and 0 <= qy < b.shape[0]):
                continue
            total += (a[py, px] - b[qy, qx]) ** 2
            count += 1
    if count == 0:
        return float("inf")
    return min(params.unary_truncation, total / count)


def pairwise_cost(s_i, s_n, params: FlowParams) -> float:
    d2 = float((s_i[0] - s_n[0]) ** 2 + (s_i[1] - s_n[1]) ** 2)
    return params.smoothness * min(params.pairwise_truncation, d2)


def _as_array(frame) -> np.ndarray:
    return frame.values if isinstance(frame, IntensityFrame) else np.asarray(frame, np.float64)


def unary_volume(src: np.ndarray, dst: np.ndarray, params: FlowParams) -> np.ndarray:
    labels = _label_grid(params.search_radius)
    vol = np.empty(src.shape + (len(labels),))
    for li, (sx, sy) in enumerate(labels):
        vol[..., li] = unary_cost_map(src, dst, int(sx), int(sy), params)
    return vol


def flow_energy(unary: np.ndarray, label_idx: np.ndarray, labels: np.ndarray,
                params: FlowParams) -> float:
    """Total objective of a labelling (edges counted from both endpoints)."""
    data = np.take_along_axis(unary, label_idx[..., None], axis=-1).sum()
    s = labels[label_idx]
    pair = 0.0
    for axis in (0, 1):
        d = np.diff(s, axis=axis)
        d2 = (d ** 2).sum(axis=-1)
        pair += np.minimum(params.pairwise_truncation, d2).sum()
    return float(data + 2.0 * params.smoothness * pair)


@njit(cache=True, nogil=True)
def _forward_pass(unary, into, side_a, side_b, cost, cap):
    """Sequential min-sum pass along axis 1 (low to high index).

    ``into[:, x]`` receives the message sent by pixel ``x - 1``, built from its
    unary term and every incoming message except the one from ``x``. The
    callers pass flipped/transposed views for the other three directions.
    """
    n_rows, n_cols, n_lab = unary.shape
    k = cost.shape[0]
    h = np.empty(n_lab)
    g = np.empty((k, k))
    for x in range(1, n_cols):
        for y in range(n_rows):
            hmin = np.inf
            for l in range(n_lab):
                v = unary[y, x - 1, l] + into[y, x - 1, l] + side_a[y, x - 1, l] + side_b[y, x - 1, l]
                h[l] = v
                if v < hmin:
                    hmin = v
            # squared L2 over the label grid is separable: transform sx, then sy
            for a in range(k):
                for b in range(k):
                    best = np.inf
                    for b2 in range(k):
                        v = h[a * k + b2] + cost[b, b2]
                        if v < best:
                            best = v
                    g[a, b] = best
            floor = hmin + cap
            mmin = np.inf
            for a in range(k):
                for b in range(k):
                    best = floor
                    for a2 in range(k):
                        v = g[a2, b] + cost[a, a2]
                        if v < best:
                            best = v
                    into[y, x, a * k + b] = best
                    if best < mmin:
                        mmin = best
            for l in range(n_lab):
                into[y, x, l] -= mmin


@njit(cache=True, nogil=True)
def _decode(unary, m0, m1, m2, m3, order):
    n_rows, n_cols, n_lab = unary.shape
    out = np.empty((n_rows, n_cols), np.int64)
    for y in range(n_rows):
        for x in range(n_cols):
            best = np.inf
            arg = order[0]
            for j in range(n_lab):
                l = order[j]
                v = unary[y, x, l] + m0[y, x, l] + m1[y, x, l] + m2[y, x, l] + m3[y, x, l]
                if v < best:
                    best = v
                    arg = l
            out[y, x] = arg
    return out


def estimate_flow(i_t, i_T, params: Optional[FlowParams] = None,
                  source: int = 0, target: int = 1) -> Flow2D:
    """Estimate the integer flow from ``i_t`` to ``i_T``.

    Loopy BP runs a fixed schedule of left-right, right-left, top-bottom and
    bottom-top sweeps per iteration. After every sweep the beliefs are decoded
    and the labelling is kept only if it lowers the energy, starting from the
    zero field, so the returned energy never exceeds the zero-flow energy.
    ``energy_trace`` records the kept energy after each sweep.
    """
    params = params or FlowParams()
    src, dst = _as_array(i_t), _as_array(i_T)
    if src.shape != dst.shape:
        raise InvalidInputError(f"frame sizes differ: {src.shape} vs {dst.shape}")
    h, w = src.shape
    labels = _label_grid(params.search_radius)
    order = _tie_order(labels)
    zero = int(np.flatnonzero((labels == 0).all(axis=1))[0])

    unary = unary_volume(src, dst, params)
    k = 2 * params.search_radius + 1
    idx = np.arange(k, dtype=np.float64)
    weight = 2.0 * params.smoothness
    cost = weight * (idx[:, None] - idx[None, :]) ** 2
    cap = weight * params.pairwise_truncation
    n_lab = len(labels)
    from_left = np.zeros((h, w, n_lab))
    from_right = np.zeros((h, w, n_lab))
    from_up = np.zeros((h, w, n_lab))
    from_down = np.zeros((h, w, n_lab))

    def rows(a):
        return a.transpose(1, 0, 2)

    best = np.full((h, w), zero, dtype=np.int64)
    best_energy = flow_energy(unary, best, labels, params)
    trace = [best_energy]
    for _ in range(params.iterations):
        for sweep in range(4):
            if sweep == 0:
                _forward_pass(unary, from_left, from_up, from_down, cost, cap)
            elif sweep == 1:
                _forward_pass(unary[:, ::-1], from_right[:, ::-1], from_up[:, ::-1],
                              from_down[:, ::-1], cost, cap)
            elif sweep == 2:
                _forward_pass(rows(unary), rows(from_up), rows(from_left), rows(from_right),
                              cost, cap)
            else:
                _forward_pass(rows(unary)[:, ::-1], rows(from_down)[:, ::-1],
                              rows(from_left)[:, ::-1], rows(from_right)[:, ::-1], cost, cap)
            cand = _decode(unary, from_left, from_right, from_up, from_down, order)
            e = flow_energy(unary, cand, labels, params)
            if e < best_energy:
                best, best_energy = cand, e
            trace.append(best_energy)

    return Flow2D(labels[best], None, source, target, energy_trace=tuple(trace))
