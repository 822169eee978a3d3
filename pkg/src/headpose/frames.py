"""Plain records shared by the data, preprocessing and training code."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CameraIntrinsics:
    """Focal lengths in pixels. The principal point is the image centre."""

    fx: float
    fy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")


@dataclass
class DepthFrame:
    depth: np.ndarray  # (H, W) uint16 millimetres, 0 = hole
    intrinsics: CameraIntrinsics
    frame_id: str = ""

    def __post_init__(self):
        if self.depth.ndim != 2:
            raise ValueError(f"depth must be 2-d, got shape {self.depth.shape}")

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def principal_point(self) -> tuple[float, float]:
        return (self.width - 1) / 2.0, (self.height - 1) / 2.0


@dataclass(frozen=True)
class Annotation:
    frame_id: str
    xc: float
    yc: float
    z_mm: float
    angles: tuple[float, float, float]  # (pitch, roll, yaw) in degrees

    @property
    def subject(self) -> str:
        return self.frame_id.split("_", 1)[0]
