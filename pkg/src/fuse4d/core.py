"""Data model for registered intensity/depth sequences and the pinhole camera."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator, Optional, Sequence as SeqType

import numpy as np


class InvalidInputError(ValueError):
    """Raised when an operation receives data outside its domain."""


class BehindCameraError(InvalidInputError):
    """Raised when projecting a point with non-positive depth."""


def _frozen(array, dtype) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics: focal lengths and principal point, in pixels."""

    fx: float
    fy: float
    u0: float
    v0: float

    def __post_init__(self):
        for name in ("fx", "fy", "u0", "v0"):
            if not np.isfinite(getattr(self, name)):
                raise InvalidInputError(f"{name} must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError("focal lengths must be positive")

    def check_frame(self, width: int, height: int) -> None:
        if not (0 <= self.u0 < width and 0 <= self.v0 < height):
            raise InvalidInputError(
                f"principal point ({self.u0}, {self.v0}) outside {width}x{height} frame"
            )

    def rays(self, width: int, height: int) -> np.ndarray:
        """Per-pixel ray directions scaled to unit depth, shape (H, W, 3)."""
        ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
        return np.stack(
            [(xs - self.u0) / self.fx, (ys - self.v0) / self.fy, np.ones_like(xs)], axis=-1
        )


def back_project(x, y, d, k: CameraIntrinsics) -> np.ndarray:
    """Lift pixel ``(x, y)`` with depth ``d`` (mm) to a camera-frame point.

    Accepts scalars or broadcastable arrays; the result has a trailing axis of 3.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if not np.all(np.isfinite(d)) or np.any(d <= 0):
        raise InvalidInputError("depth must be finite and positive")
    x, y, d = np.broadcast_arrays(x, y, d)
    return np.stack([d * (x - k.u0) / k.fx, d * (y - k.v0) / k.fy, d], axis=-1)


def project(p, k: CameraIntrinsics) -> np.ndarray:
    """Inverse of :func:`back_project`: returns ``(x, y, d)`` along the last axis."""
    p = np.asarray(p, dtype=np.float64)
    z = p[..., 2]
    if np.any(~(z > 0)):
        raise BehindCameraError("point is behind the camera")
    return np.stack([k.fx * p[..., 0] / z + k.u0, k.fy * p[..., 1] / z + k.v0, z], axis=-1)


@dataclass(frozen=True, eq=False)
class IntensityFrame:
    """Normalized intensity image with values in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        v = _frozen(self.values, np.float64)
        if v.ndim != 2:
            raise InvalidInputError("intensity must be a 2D grid")
        if not np.all(np.isfinite(v)) or v.min(initial=0.0) < 0 or v.max(initial=0.0) > 1:
            raise InvalidInputError("intensity values must be finite and within [0, 1]")
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class DepthFrame:
    """Depth image in millimetres with an explicit validity mask.

    Invalid pixels hold 0.0 in ``values``; that value carries no meaning and
    readers must consult ``valid``.
    """

    values: np.ndarray
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True)
        if v.ndim != 2:
            raise InvalidInputError("depth must be a 2D grid")
        usable = np.isfinite(v) & (v > 0)
        if self.valid is None:
            mask = usable
        else:
            mask = np.asarray(self.valid, dtype=bool)
            if mask.shape != v.shape:
                raise InvalidInputError("validity mask shape differs from depth shape")
            if np.any(mask & ~usable):
                raise InvalidInputError("valid depths must be finite and > 0")
        v[~mask] = 0.0
        object.__setattr__(self, "values", _frozen(v, np.float64))
        object.__setattr__(self, "valid", _frozen(mask, bool))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class OrganizedCloud:
    """3D points on the pixel grid of their source depth image.

    ``holes`` flags pixels that should carry a point but have none yet
    (see :func:`fuse4d.fusion.fill_holes`).
    """

    points: np.ndarray
    valid: np.ndarray
    intrinsics: Optional[CameraIntrinsics] = None
    holes: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True)
        mask = np.asarray(self.valid, dtype=bool)
        if pts.ndim != 3 or pts.shape[2] != 3 or mask.shape != pts.shape[:2]:
            raise InvalidInputError("cloud must be (H, W, 3) with an (H, W) mask")
        if not np.all(np.isfinite(pts[mask])):
            raise InvalidInputError("valid points must be finite")
        pts[~mask] = 0.0
        holes = np.zeros(mask.shape, bool) if self.holes is None else np.asarray(self.holes, bool)
        if holes.shape != mask.shape:
            raise InvalidInputError("hole mask shape differs from cloud shape")
        object.__setattr__(self, "points", _frozen(pts, np.float64))
        object.__setattr__(self, "valid", _frozen(mask, bool))
        object.__setattr__(self, "holes", _frozen(holes & ~mask, bool))

    @property
    def height(self) -> int:
        return self.points.shape[0]

    @property
    def width(self) -> int:
        return self.points.shape[1]

    def depth(self) -> DepthFrame:
        """Z channel as a depth frame (same mask)."""
        return DepthFrame(self.points[..., 2], self.valid)


def cloud_from_depth(depth: DepthFrame, k: CameraIntrinsics) -> OrganizedCloud:
    """Back-project every valid depth pixel; masked pixels stay masked."""
    ys, xs = np.mgrid[0:depth.height, 0:depth.width].astype(np.float64)
    d = depth.values
    # same operation order as back_project, so the points agree bit for bit
    pts = np.stack([d * (xs - k.u0) / k.fx, d * (ys - k.v0) / k.fy, d], axis=-1)
    return OrganizedCloud(pts, depth.valid, intrinsics=k)


@dataclass(frozen=True, eq=False)
class SequenceFrame:
    """One time step: registered intensity, depth and the derived cloud."""

    index: int
    intensity: IntensityFrame
    depth: DepthFrame
    cloud: OrganizedCloud

    def __post_init__(self):
        shapes = {self.intensity.values.shape, self.depth.values.shape, self.cloud.valid.shape}
        if len(shapes) != 1:
            raise InvalidInputError(f"frame {self.index}: component sizes differ {shapes}")

    @classmethod
    def from_arrays(cls, index: int, intensity, depth, k: CameraIntrinsics,
                    valid=None) -> "SequenceFrame":
        inten = intensity if isinstance(intensity, IntensityFrame) else IntensityFrame(intensity)
        dep = depth if isinstance(depth, DepthFrame) else DepthFrame(depth, valid)
        return cls(int(index), inten, dep, cloud_from_depth(dep, k))

    @property
    def height(self) -> int:
        return self.depth.height

    @property
    def width(self) -> int:
        return self.depth.width


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Analytic shape parameters of a synthetic scene.

    ``centers`` holds one sphere center per frame (mm); planes use ``plane_depth``.
    """

    shape: str
    radius_mm: float = float("nan")
    centers: Optional[np.ndarray] = None
    plane_depth: float = float("nan")
    fall_px: float = 0.0

    def __post_init__(self):
        if self.shape not in ("sphere", "plane"):
            raise InvalidInputError(f"unknown ground-truth shape {self.shape!r}")
        if self.centers is not None:
            object.__setattr__(self, "centers", _frozen(self.centers, np.float64).reshape(-1, 3))


@dataclass(frozen=True, eq=False)
class Sequence:
    """Temporally ordered frames sharing one camera."""

    frames: tuple
    intrinsics: CameraIntrinsics
    ground_truth: Optional[GroundTruth] = None
    name: str = field(default="sequence")

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise InvalidInputError("a sequence needs at least one frame")
        size = (frames[0].width, frames[0].height)
        for f in frames:
            if (f.width, f.height) != size:
                raise InvalidInputError("all frames of a sequence must share one size")
        self.intrinsics.check_frame(*size)
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, t: int) -> SequenceFrame:
        return self.frames[t]

    def __iter__(self) -> Iterator[SequenceFrame]:
        return iter(self.frames)

    @property
    def width(self) -> int:
        return self.frames[0].width

    @property
    def height(self) -> int:
        return self.frames[0].height

    def with_frames(self, frames: SeqType[SequenceFrame]) -> "Sequence":
        return replace(self, frames=tuple(frames))

    def replace_depths(self, depths: SeqType[DepthFrame]) -> "Sequence":
        """Same intensities and camera, new depth maps (clouds recomputed)."""
        if len(depths) != len(self.frames):
            raise InvalidInputError("one depth frame per sequence frame is required")
        return self.with_frames(
            SequenceFrame.from_arrays(f.index, f.intensity, d, self.intrinsics)
            for f, d in zip(self.frames, depths)
        )
