"""Classical scattered-data densification of sparse depth maps.

Nearest assigns each pixel the depth of its Euclidean-nearest valid site
(exact, ties broken toward the smaller row then column index). Linear and
Cubic interpolate over a Delaunay triangulation of the valid sites
(barycentric and Clough-Tocher respectively); pixels outside the convex
hull stay invalid with depth 0. Rbf fits a thin-plate spline on at most
``RBF_MAX_SITES`` subsampled sites and evaluates everywhere.
"""

from __future__ import annotations

from enum import Enum

import numpy as np
from scipy.interpolate import CloughTocher2DInterpolator, LinearNDInterpolator, RBFInterpolator
from scipy.spatial import cKDTree

from .maps import DepthMap
from .metrics import MetricAccumulator, MetricReport

RBF_MAX_SITES = 2000
RBF_SUBSAMPLE_SEED = 7


class InterpMethod(Enum):
    NEAREST = "nearest"
    LINEAR = "linear"
    CUBIC = "cubic"
    RBF = "rbf"


def densify(sparse: DepthMap, method: InterpMethod) -> DepthMap:
    """Fill a sparse map by classical interpolation; values at valid input
    pixels are reproduced exactly (interpolating, not smoothing)."""
    sites = np.argwhere(sparse.valid)  # (n, 2) as (row, col), already lexicographic
    values = sparse.depth[sparse.valid]
    n = len(sites)
    if n == 0:
        raise ValueError("densify needs at least one valid pixel")
    h, w = sparse.depth.shape

    if method is InterpMethod.NEAREST:
        idx = _nearest_site_index(sites, h, w)
        return DepthMap.dense(values[idx].reshape(h, w))

    grid = np.stack(np.mgrid[0:h, 0:w], axis=-1).reshape(-1, 2).astype(np.float64)
    if method in (InterpMethod.LINEAR, InterpMethod.CUBIC):
        if n < 3 or _collinear(sites):
            raise ValueError(f"{method.value} interpolation needs >= 3 non-collinear valid pixels")
        cls = LinearNDInterpolator if method is InterpMethod.LINEAR else CloughTocher2DInterpolator
        dense = cls(sites.astype(np.float64), values)(grid).reshape(h, w)
        valid = np.isfinite(dense)
        return DepthMap(np.where(valid, dense, 0.0), valid & (np.where(valid, dense, 0.0) > 0))

    if method is InterpMethod.RBF:
        if n < 2:
            raise ValueError("rbf interpolation needs >= 2 valid pixels")
        if n > RBF_MAX_SITES:
            rng = np.random.default_rng(RBF_SUBSAMPLE_SEED)
            pick = rng.choice(n, size=RBF_MAX_SITES, replace=False)
            sites, values = sites[pick], values[pick]
        # degree-0 tail keeps 2-site inputs solvable; thin-plate needs >= 3
        degree = 1 if len(sites) >= 3 and not _collinear(sites) else 0
        interp = RBFInterpolator(sites.astype(np.float64), values, kernel="thin_plate_spline", degree=degree)
        dense = interp(grid).reshape(h, w)
        valid = dense > 0
        return DepthMap(np.where(valid, dense, 0.0), valid)

    raise ValueError(f"unknown method {method!r}")


def _nearest_site_index(sites: np.ndarray, h: int, w: int) -> np.ndarray:
    """Index of the exact nearest site per pixel, ties to smaller (row, col).

    Grid coordinates are integers, so squared distances are exact integers;
    candidate ties are resolved by scanning a ball of the nearest radius.
    """
    tree = cKDTree(sites.astype(np.float64))
    grid = np.stack(np.mgrid[0:h, 0:w], axis=-1).reshape(-1, 2)
    dist, idx = tree.query(grid.astype(np.float64))
    d2 = np.rint(dist * dist).astype(np.int64)
    balls = tree.query_ball_point(grid.astype(np.float64), r=dist + 1e-7)
    out = np.empty(len(grid), dtype=np.intp)
    for i, cand in enumerate(balls):
        if len(cand) == 1:
            out[i] = cand[0]
            continue
        cand = np.asarray(cand)
        diff = sites[cand] - grid[i]
        cd2 = (diff * diff).sum(axis=1)
        tied = cand[cd2 == d2[i]]
        # sites are in lexicographic (row, col) order, so min index wins ties
        out[i] = tied.min()
    return out


def _collinear(sites: np.ndarray) -> bool:
    if len(sites) < 3:
        return True
    d = sites[1:] - sites[0]
    return bool(np.all(d[:, 0] * d[0, 1] == d[:, 1] * d[0, 0]))


def evaluate_baselines(pairs, methods) -> dict[InterpMethod, MetricReport]:
    """Densify and score (sparse, groundtruth) pairs with each method.

    ``pairs`` is a sequence (or iterable factory) of (name, sparse, gt)
    triples; metrics pool all valid-groundtruth pixels across the dataset.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("evaluate_baselines needs a non-empty dataset")
    out: dict[InterpMethod, MetricReport] = {}
    for method in methods:
        acc = MetricAccumulator()
        for name, sparse, gt in pairs:
            acc.add(densify(sparse, method), gt, name=name)
        out[method] = acc.report()
    return out
