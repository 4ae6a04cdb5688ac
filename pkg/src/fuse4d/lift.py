"""3D motion fields from integer 2D flow: lifting, consistency checks, chaining."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence as SeqType

import numpy as np
from scipy import ndimage

from fuse4d.core import CameraIntrinsics, InvalidInputError, SequenceFrame
from fuse4d.flow import Flow2D


@dataclass(frozen=True, eq=False)
class MotionField3D:
    """Per-pixel 3D motion ``m`` (mm) from frame ``source`` to ``target``.

    ``displacement`` is the integer pixel offset at which each pixel lands in
    the target frame; ``valid`` is the per-pixel validity flag.
    """

    vectors: np.ndarray
    valid: np.ndarray
    displacement: np.ndarray
    source: int
    target: int

    def __post_init__(self):
        m = np.array(self.vectors, np.float64, copy=True)
        valid = np.array(self.valid, bool, copy=True)
        disp = np.array(self.displacement, np.int64, copy=True)
        if m.shape[:2] != valid.shape or m.shape[2:] != (3,) or disp.shape != valid.shape + (2,):
            raise InvalidInputError("motion field arrays disagree in shape")
        m[~valid] = 0.0
        for a in (m, valid, disp):
            a.setflags(write=False)
        object.__setattr__(self, "vectors", m)
        object.__setattr__(self, "valid", valid)
        object.__setattr__(self, "displacement", disp)

    @property
    def height(self) -> int:
        return self.valid.shape[0]

    @property
    def width(self) -> int:
        return self.valid.shape[1]

    @classmethod
    def identity(cls, index: int, height: int, width: int) -> "MotionField3D":
        return cls(np.zeros((height, width, 3)), np.ones((height, width), bool),
                   np.zeros((height, width, 2), np.int64), index, index)


def lift_flow(frame_t: SequenceFrame, frame_T: SequenceFrame, flow: Flow2D,
              k: CameraIntrinsics) -> MotionField3D:
    """Turn the 2D flow ``t -> T`` into 3D correspondence vectors.

    Uses the closed form of the lifted motion,
    ``m_x = (x - u0) (d^T - d^t) / fx + d^T sx / fx`` (same for y) and
    ``m_z = d^T - d^t``, where ``d^T`` is read at the flow target.
    """
    if (flow.source, flow.target) != (frame_t.index, frame_T.index):
        raise InvalidInputError(
            f"flow {flow.source}->{flow.target} does not join frames "
            f"{frame_t.index}->{frame_T.index}"
        )
    if flow.vectors.shape[:2] != frame_t.depth.values.shape or \
            frame_t.depth.values.shape != frame_T.depth.values.shape:
        raise InvalidInputError("flow and frame sizes differ")
    ys, xs = np.mgrid[0:flow.height, 0:flow.width]
    tx, ty, inside = flow.targets()
    txc = np.clip(tx, 0, flow.width - 1)
    tyc = np.clip(ty, 0, flow.height - 1)
    d_t = frame_t.depth.values
    d_T = frame_T.depth.values[tyc, txc]
    valid = flow.valid & inside & frame_t.depth.valid & frame_T.depth.valid[tyc, txc]
    sx = flow.vectors[..., 0]
    sy = flow.vectors[..., 1]
    dd = d_T - d_t
    m = np.stack([
        (xs - k.u0) * dd / k.fx + d_T * sx / k.fx,
        (ys - k.v0) * dd / k.fy + d_T * sy / k.fy,
        dd,
    ], axis=-1)
    return MotionField3D(np.where(valid[..., None], m, 0.0), valid, flow.vectors,
                         frame_t.index, frame_T.index)


def fb_check(fwd: Flow2D, bwd: Flow2D, theta: float = 2.0) -> np.ndarray:
    """Forward-backward consistency in pixel units.

    A pixel passes when its forward target is inside the frame and
    ``|s_fwd(x) + s_bwd(x + s_fwd(x))| < theta``. Pixels already flagged
    invalid in either flow fail.
    """
    if fwd.vectors.shape != bwd.vectors.shape:
        raise InvalidInputError("forward and backward flows differ in size")
    tx, ty, inside = fwd.targets()
    txc = np.clip(tx, 0, fwd.width - 1)
    tyc = np.clip(ty, 0, fwd.height - 1)
    back = bwd.vectors[tyc, txc]
    loop = np.linalg.norm((fwd.vectors + back).astype(np.float64), axis=-1)
    return inside & fwd.valid & bwd.valid[tyc, txc] & (loop < theta)


def fb_check_3d(fwd: MotionField3D, bwd: MotionField3D, theta_mm: float) -> np.ndarray:
    """Forward-backward consistency on lifted 3D vectors (threshold in mm)."""
    if fwd.vectors.shape != bwd.vectors.shape:
        raise InvalidInputError("forward and backward motion fields differ in size")
    ys, xs = np.mgrid[0:fwd.height, 0:fwd.width]
    tx = xs + fwd.displacement[..., 0]
    ty = ys + fwd.displacement[..., 1]
    inside = (tx >= 0) & (tx < fwd.width) & (ty >= 0) & (ty < fwd.height)
    txc = np.clip(tx, 0, fwd.width - 1)
    tyc = np.clip(ty, 0, fwd.height - 1)
    loop = np.linalg.norm(fwd.vectors + bwd.vectors[tyc, txc], axis=-1)
    return inside & fwd.valid & bwd.valid[tyc, txc] & (loop < theta_mm)


def integrate_motion(chain: SeqType[MotionField3D],
                     flows: Optional[SeqType[Flow2D]] = None) -> MotionField3D:
    """Compose a contiguous chain ``t -> t+1 -> ... -> T`` of motion fields.

    Each link is sampled at the pixel reached by following the integer
    displacements of the previous links; validity is the conjunction along
    the path, and leaving the frame invalidates the pixel.
    """
    if not chain:
        raise InvalidInputError("empty motion chain")
    if flows is not None:
        if len(flows) != len(chain):
            raise InvalidInputError("flow chain and motion chain differ in length")
        for m, f in zip(chain, flows):
            if (f.source, f.target) != (m.source, m.target) or \
                    not np.array_equal(f.vectors, m.displacement):
                raise InvalidInputError(f"flow {f.source}->{f.target} does not match its motion link")
    for a, b in zip(chain[:-1], chain[1:]):
        if a.target != b.source:
            raise InvalidInputError(f"broken chain: {a.source}->{a.target} then {b.source}->{b.target}")
    h, w = chain[0].height, chain[0].width
    ys, xs = np.mgrid[0:h, 0:w]
    px, py = xs.copy(), ys.copy()
    total = np.zeros((h, w, 3))
    valid = np.ones((h, w), bool)
    for link in chain:
        inside = (px >= 0) & (px < w) & (py >= 0) & (py < h)
        cx = np.clip(px, 0, w - 1)
        cy = np.clip(py, 0, h - 1)
        valid &= inside & link.valid[cy, cx]
        total += link.vectors[cy, cx]
        px = px + link.displacement[cy, cx, 0]
        py = py + link.displacement[cy, cx, 1]
    inside = (px >= 0) & (px < w) & (py >= 0) & (py < h)
    valid &= inside
    return MotionField3D(np.where(valid[..., None], total, 0.0), valid,
                         np.stack([px - xs, py - ys], axis=-1), chain[0].source, chain[-1].target)


def smooth_motion(field: MotionField3D, sigma_px: float) -> MotionField3D:
    """Normalized Gaussian smoothing of the motion vectors over valid pixels.

    Displacements and validity are unchanged. ``sigma_px <= 0`` returns the
    field as is.
    """
    if sigma_px <= 0:
        return field
    w = field.valid.astype(np.float64)
    den = ndimage.gaussian_filter(w, sigma_px, mode="constant", truncate=3.0)
    out = np.empty_like(field.vectors)
    for c in range(3):
        num = ndimage.gaussian_filter(field.vectors[..., c] * w, sigma_px, mode="constant",
                                      truncate=3.0)
        out[..., c] = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return replace(field, vectors=np.where(field.valid[..., None], out, 0.0))
