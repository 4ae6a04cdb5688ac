"""Intensity-guided multi-frame 4D fusion for high-frame-rate RGB-D sequences."""

from fuse4d.core import (
    CameraIntrinsics,
    DepthFrame,
    GroundTruth,
    IntensityFrame,
    InvalidInputError,
    OrganizedCloud,
    Sequence,
    SequenceFrame,
    back_project,
    cloud_from_depth,
    project,
)

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "DepthFrame",
    "GroundTruth",
    "IntensityFrame",
    "InvalidInputError",
    "OrganizedCloud",
    "Sequence",
    "SequenceFrame",
    "back_project",
    "cloud_from_depth",
    "project",
    "__version__",
]
