"""PNG file formats and the on-disk dataset layout.

Depth maps use the KITTI devkit convention: 16-bit single-channel PNG,
depth_meters = stored / 256, stored 0 marks an invalid pixel. Guidance
images are plain 8-bit RGB PNGs. A dataset directory is laid out as
``<split>/<scene>/{image,sparse,groundtruth}/NNNNN.png``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .maps import DepthMap, RgbImage

DEPTH_SCALE = 256.0
MAX_DEPTH_M = 65535 / DEPTH_SCALE


def read_depth_png(path) -> DepthMap:
    """Load a 16-bit depth PNG; stored/256 meters, 0 means invalid."""
    img = Image.open(path)
    if img.mode not in ("I;16", "I;16B", "I"):
        raise ValueError(f"{path}: expected 16-bit single-channel PNG, got mode {img.mode!r}")
    stored = np.asarray(img)
    if stored.ndim != 2:
        raise ValueError(f"{path}: expected single-channel image, got shape {stored.shape}")
    if stored.dtype == np.int32 and stored.max(initial=0) > 65535:
        raise ValueError(f"{path}: sample values exceed 16 bits")
    stored = stored.astype(np.uint16)
    return DepthMap(stored.astype(np.float64) / DEPTH_SCALE, stored > 0)


def write_depth_png(dmap: DepthMap, path) -> None:
    """Inverse of :func:`read_depth_png`; depths quantized to 1/256 m."""
    if np.any(dmap.depth >= MAX_DEPTH_M):
        raise ValueError(f"depth overflow: values must be < {MAX_DEPTH_M:.2f} m for 16-bit storage")
    # quantizing to the nearest 1/256 m step; a depth under half a step
    # stores as 0 and is therefore invalid on re-read
    stored = np.rint(dmap.depth * DEPTH_SCALE).astype(np.uint16)
    stored[~dmap.valid] = 0
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(stored).save(path)


def read_rgb_png(path) -> RgbImage:
    img = Image.open(path).convert("RGB")
    return RgbImage(np.asarray(img).astype(np.float64) / 255.0)


def write_rgb_png(img: RgbImage, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.rint(img.data * 255.0).astype(np.uint8)).save(path)


@dataclass(frozen=True)
class Frame:
    """Paths of one (image, sparse, groundtruth) triple."""

    name: str
    image: Path
    sparse: Path
    groundtruth: Path | None

    def load(self) -> tuple[RgbImage, DepthMap, DepthMap | None]:
        gt = read_depth_png(self.groundtruth) if self.groundtruth else None
        return read_rgb_png(self.image), read_depth_png(self.sparse), gt


def list_frames(root, split: str | None = None, require_groundtruth: bool = True) -> list[Frame]:
    """Enumerate frames under ``root[/split]/<scene>/...`` sorted by scene and name."""
    base = Path(root) / split if split else Path(root)
    if not base.is_dir():
        raise FileNotFoundError(f"dataset directory {base} does not exist")
    frames: list[Frame] = []
    scenes = sorted(p for p in base.iterdir() if p.is_dir())
    # also accept a bare scene directory (image/ directly under base)
    if (base / "image").is_dir():
        scenes = [base]
    for scene in scenes:
        image_dir = scene / "image"
        if not image_dir.is_dir():
            continue
        for image in sorted(image_dir.glob("*.png")):
            sparse = scene / "sparse" / image.name
            gt = scene / "groundtruth" / image.name
            if not sparse.is_file():
                raise FileNotFoundError(f"missing sparse depth for {image}")
            if require_groundtruth and not gt.is_file():
                raise FileNotFoundError(f"missing groundtruth for {image}")
            frames.append(
                Frame(
                    name=f"{scene.name}/{image.stem}",
                    image=image,
                    sparse=sparse,
                    groundtruth=gt if gt.is_file() else None,
                )
            )
    if not frames:
        raise FileNotFoundError(f"no frames found under {base}")
    return frames


def write_frame(root, split: str, scene: str, name: str, rgb: RgbImage, sparse: DepthMap, gt: DepthMap) -> None:
    base = Path(root) / split / scene
    write_rgb_png(rgb, base / "image" / f"{name}.png")
    write_depth_png(sparse, base / "sparse" / f"{name}.png")
    write_depth_png(gt, base / "groundtruth" / f"{name}.png")
