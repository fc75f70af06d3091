"""Depth-map and guidance-image containers.

Depths are stored in meters. Invalid pixels carry both a False mask entry
and a 0.0 depth value; the two representations are kept consistent at
construction time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DepthMap:
    """H x W depths in meters plus a validity mask."""

    depth: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        depth = np.asarray(self.depth, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if depth.ndim != 2 or depth.shape != valid.shape:
            raise ValueError(f"depth {depth.shape} and valid {valid.shape} must be equal 2-d shapes")
        if np.any(depth[valid] <= 0):
            raise ValueError("valid pixels must have strictly positive depth")
        depth = np.where(valid, depth, 0.0)
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "valid", valid)

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    def density(self) -> float:
        return float(self.valid.mean())

    @staticmethod
    def dense(depth: np.ndarray) -> "DepthMap":
        """Fully valid map from strictly positive depths."""
        depth = np.asarray(depth, dtype=np.float64)
        return DepthMap(depth, np.ones(depth.shape, dtype=bool))

    @staticmethod
    def from_values(depth: np.ndarray) -> "DepthMap":
        """Map whose validity is inferred from the 0-sentinel convention."""
        depth = np.asarray(depth, dtype=np.float64)
        return DepthMap(depth, depth > 0)


@dataclass(frozen=True)
class RgbImage:
    """H x W x 3 guidance image with channel values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[2] != 3:
            raise ValueError(f"rgb image must be HxWx3, got {data.shape}")
        if data.min() < 0.0 or data.max() > 1.0:
            raise ValueError("rgb values must lie in [0, 1]")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]
