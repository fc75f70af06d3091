"""Synthetic desk-scale scenes and controlled sparsification.

Scenes are a ground plane whose depth varies linearly along rows, plus
fronto-parallel boxes, thin poles, and spheres rendered with a painter's
algorithm. Shading is Lambertian under a fixed directional light, with a
distinct albedo per object, so color edges coincide with depth edges and
the guidance image carries usable signal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .maps import DepthMap, RgbImage


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 64
    depth_range: tuple[float, float] = (2.0, 10.0)
    boxes: tuple[int, int] = (2, 4)
    poles: tuple[int, int] = (1, 3)
    spheres: tuple[int, int] = (0, 2)
    light_dir: tuple[float, float, float] = (0.4, -0.35, 0.85)
    sparse_density: float = 0.05
    gt_density: float = 0.16
    val_fraction: float = 0.2

    def __post_init__(self):
        lo, hi = self.depth_range
        if not 0 < lo < hi:
            raise ValueError("depth_range must be positive and increasing")
        for name in ("sparse_density", "gt_density"):
            d = getattr(self, name)
            if not 0 < d <= 1:
                raise ValueError(f"{name} must lie in (0, 1], got {d}")
        if self.height < 8 or self.width < 8:
            raise ValueError("scene must be at least 8x8")

    @staticmethod
    def from_dict(d: dict) -> "SceneConfig":
        kwargs = dict(d)
        for key in ("depth_range", "boxes", "poles", "spheres", "light_dir"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return SceneConfig(**kwargs)


@dataclass
class RenderedScene:
    rgb: RgbImage
    depth: DepthMap
    # silhouette[i] is the boolean mask of object i's visible pixels
    silhouettes: list[np.ndarray] = field(default_factory=list)


def synth_scene(config: SceneConfig, seed: int) -> RenderedScene:
    """Render one scene deterministically from (config, seed)."""
    rng = np.random.default_rng(np.random.SeedSequence([0x5CE7E, seed]))
    h, w = config.height, config.width
    z_near, z_far = config.depth_range

    rows = np.arange(h, dtype=np.float64)[:, None]
    depth = np.broadcast_to(z_far - (z_far - z_near) * rows / max(h - 1, 1), (h, w)).copy()
    # plane normal tilted toward the camera; shade per-object below
    normal = np.broadcast_to(_normalize([0.0, -0.55, 0.835]), (h, w, 3)).copy()
    albedo = np.broadcast_to(np.array([0.45, 0.42, 0.38]), (h, w, 3)).copy()

    silhouettes: list[np.ndarray] = []
    yy, xx = np.mgrid[0:h, 0:w]

    def paint(mask: np.ndarray, obj_depth: np.ndarray, obj_normal: np.ndarray, color: np.ndarray):
        visible = mask & (obj_depth < depth)
        depth[visible] = obj_depth[visible]
        normal[visible] = obj_normal[visible] if obj_normal.ndim == 3 else obj_normal
        albedo[visible] = color
        silhouettes.append(visible)

    n_boxes = int(rng.integers(config.boxes[0], config.boxes[1] + 1))
    n_poles = int(rng.integers(config.poles[0], config.poles[1] + 1))
    n_spheres = int(rng.integers(config.spheres[0], config.spheres[1] + 1))

    for _ in range(n_boxes):
        bh = int(rng.integers(h // 8, h // 3 + 1))
        bw = int(rng.integers(w // 8, w // 3 + 1))
        r0 = int(rng.integers(0, h - bh))
        c0 = int(rng.integers(0, w - bw))
        z = float(rng.uniform(z_near, 0.75 * z_far))
        mask = (yy >= r0) & (yy < r0 + bh) & (xx >= c0) & (xx < c0 + bw)
        paint(mask, np.full((h, w), z), _normalize([0.0, 0.0, 1.0]), rng.uniform(0.2, 0.95, 3))

    for _ in range(n_poles):
        pw = int(rng.integers(1, 4))
        ph = int(rng.integers(h // 2, h))
        r0 = int(rng.integers(0, h - ph + 1))
        c0 = int(rng.integers(0, w - pw))
        z = float(rng.uniform(z_near, 0.6 * z_far))
        mask = (yy >= r0) & (yy < r0 + ph) & (xx >= c0) & (xx < c0 + pw)
        paint(mask, np.full((h, w), z), _normalize([0.0, 0.0, 1.0]), rng.uniform(0.2, 0.95, 3))

    for _ in range(n_spheres):
        radius = float(rng.uniform(min(h, w) / 10, min(h, w) / 4))
        cr = float(rng.uniform(radius, h - radius))
        cc = float(rng.uniform(radius, w - radius))
        zc = float(rng.uniform(z_near + radius / 32, 0.8 * z_far))
        d2 = (yy - cr) ** 2 + (xx - cc) ** 2
        mask = d2 <= radius**2
        bulge = np.sqrt(np.maximum(radius**2 - d2, 0.0))
        obj_depth = zc - bulge / 32.0  # 32 px per meter keeps spheres gently curved
        nz = bulge / radius
        nx = (xx - cc) / radius
        ny = (yy - cr) / radius
        obj_normal = np.stack([nx, ny, np.maximum(nz, 1e-6)], axis=2)
        obj_normal /= np.linalg.norm(obj_normal, axis=2, keepdims=True)
        paint(mask, obj_depth, obj_normal, rng.uniform(0.2, 0.95, 3))

    light = _normalize(config.light_dir)
    lambert = np.clip((normal * light).sum(axis=2), 0.0, 1.0)
    shade = 0.35 + 0.65 * lambert
    rgb = np.clip(albedo * shade[:, :, None], 0.0, 1.0)
    return RenderedScene(RgbImage(rgb), DepthMap.dense(depth), silhouettes)


def sparsify(dense: DepthMap, density: float, seed: int, pattern: str = "uniform") -> DepthMap:
    """Drop measurements from a fully valid map down to a target density."""
    if not 0 < density <= 1:
        raise ValueError(f"density must lie in (0, 1], got {density}")
    if not dense.valid.all():
        raise ValueError("sparsify expects a fully valid input map")
    if pattern not in ("uniform", "scanline"):
        raise ValueError(f"unknown sparsify pattern {pattern!r}")
    h, w = dense.depth.shape
    total = h * w
    keep = int(round(density * total))
    if keep >= total:
        return dense
    keep = max(keep, 1)
    rng = np.random.default_rng(np.random.SeedSequence([0x5BA55, seed]))
    mask = np.zeros(total, dtype=bool)
    if pattern == "uniform":
        mask[rng.choice(total, size=keep, replace=False)] = True
        mask = mask.reshape(h, w)
    else:
        # equally spaced scanlines, subsampled within each kept row
        row_step = max(1, min(4, int(1 / density))) if density < 1 else 1
        rows = np.arange(int(rng.integers(0, row_step)), h, row_step)
        per_row = np.full(len(rows), keep // len(rows))
        per_row[: keep % len(rows)] += 1
        mask = mask.reshape(h, w)
        for r, n_keep in zip(rows, per_row):
            if n_keep > 0:
                mask[r, rng.choice(w, size=min(n_keep, w), replace=False)] = True
    return DepthMap(np.where(mask, dense.depth, 0.0), mask)


def _normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)
