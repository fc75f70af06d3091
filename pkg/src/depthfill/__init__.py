"""Depth completion at desk scale: a two-branch backbone with confidence
fusion, single-pass deformable kernel refinement, classical densification
baselines, and KITTI-style evaluation."""

__version__ = "0.1.0"

from .maps import DepthMap, RgbImage

__all__ = ["DepthMap", "RgbImage", "__version__"]
