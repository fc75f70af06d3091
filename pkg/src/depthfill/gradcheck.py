"""Finite-difference verification of every differentiable operator.

Each named check builds randomized double-precision instances, runs a
backward pass, and compares every input gradient against central finite
differences (default step 1e-5). The per-element relative error is
|ad - fd| / max(1, |ad|, |fd|); inputs are O(1) so the 1 floor keeps
near-zero gradients comparable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import fuse_tensors
from .maps import DepthMap
from .refine import deformable_refine_tensor
from .train import LossConfig, masked_loss_tensor

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    instances: int
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def numerical_grad(f, x: np.ndarray, step: float = DEFAULT_STEP) -> np.ndarray:
    """Central finite differences of scalar f() w.r.t. array x, in place."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * step)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def _compare(arrays: dict[str, np.ndarray], build, wrt: list[str], step: float) -> float:
    """Max relative error between backward and FD grads over ``wrt`` inputs."""
    tensors = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    build(tensors).backward()
    worst = 0.0
    for name in wrt:
        fd = numerical_grad(lambda: build({k: Tensor(v) for k, v in arrays.items()}).item(), arrays[name], step)
        worst = max(worst, relative_error(tensors[name].grad, fd))
    return worst


# -- instance builders -----------------------------------------------------------


def _case_conv2d(rng, step):
    stride = int(rng.integers(1, 3))
    arrays = {
        "x": rng.normal(0, 1, (1, 2, 5, 5)),
        "w": rng.normal(0, 1, (3, 2, 3, 3)),
        "b": rng.normal(0, 1, (3,)),
    }

    def build(t):
        return ad.tmean(ad.conv2d(t["x"], t["w"], t["b"], stride=stride, padding=1))

    return _compare(arrays, build, ["x", "w", "b"], step)


def _case_sigmoid(rng, step):
    arrays = {"x": rng.normal(0, 2, (4, 4))}
    probe = rng.normal(0, 1, (4, 4))

    def build(t):
        return ad.tsum(ad.mul(ad.sigmoid(t["x"]), Tensor(probe)))

    return _compare(arrays, build, ["x"], step)


def _case_softmax(rng, step):
    axis = int(rng.integers(0, 2))
    arrays = {"x": rng.normal(0, 2, (4, 5))}
    probe = rng.normal(0, 1, (4, 5))

    def build(t):
        return ad.tsum(ad.mul(ad.softmax(t["x"], axis=axis), Tensor(probe)))

    return _compare(arrays, build, ["x"], step)


def _off_integer(rng, size, lo_int, hi_int):
    """Values of the form m + s with m integer and 0.1 <= |s| <= 0.45,
    so a finite-difference step never crosses a bilinear kink."""
    base = rng.integers(lo_int, hi_int + 1, size).astype(np.float64)
    frac = rng.uniform(0.1, 0.45, size) * rng.choice([-1.0, 1.0], size)
    return base + frac


def _case_gather(rng, step, wrt):
    h = w = 6
    m = 10
    arrays = {
        "map": rng.normal(2, 1, (h, w)),
        "pos": np.stack(
            [_off_integer(rng, m, 1, w - 2), _off_integer(rng, m, 1, h - 2)], axis=1
        ),
    }
    probe = rng.normal(0, 1, m)

    def build(t):
        return ad.tsum(ad.mul(ad.bilinear_gather(t["map"], t["pos"]), Tensor(probe)))

    return _compare(arrays, build, [wrt], step)


def _case_fuse(rng, step):
    shape = (5, 5)
    arrays = {
        "dc": rng.uniform(1, 9, shape),
        "dd": rng.uniform(1, 9, shape),
        "cc": rng.normal(0, 2, shape),
        "cd": rng.normal(0, 2, shape),
    }
    probe = rng.normal(0, 1, shape)

    def build(t):
        return ad.tsum(ad.mul(fuse_tensors(t["dc"], t["dd"], t["cc"], t["cd"]), Tensor(probe)))

    return _compare(arrays, build, ["dc", "dd", "cc", "cd"], step)


def _refine_arrays(rng, h=6, w=6, k=3):
    kk = k * k
    return {
        "coarse": rng.uniform(1, 9, (h, w)),
        "weights": rng.uniform(0.05, 0.95, (kk, h, w)),
        "offsets": _off_integer(rng, (2 * kk, h, w), -1, 1),
    }


def _case_refine(rng, step, wrt):
    arrays = _refine_arrays(rng)
    probe = rng.normal(0, 1, arrays["coarse"].shape)

    def build(t):
        out = deformable_refine_tensor(t["coarse"], t["weights"], t["offsets"], 3)
        return ad.tsum(ad.mul(out, Tensor(probe)))

    return _compare(arrays, build, [wrt], step)


def _case_masked_loss(rng, step):
    shape = (6, 6)
    valid = rng.random(shape) < 0.6
    valid.flat[0] = True  # never empty
    gt = DepthMap(np.where(valid, rng.uniform(1, 9, shape), 0.0), valid)
    arrays = {"pred": rng.uniform(1, 9, shape)}
    cfg = LossConfig(alpha=0.5)

    def build(t):
        return masked_loss_tensor(t["pred"], gt, cfg)

    return _compare(arrays, build, ["pred"], step)


CHECKS = {
    "conv2d": _case_conv2d,
    "sigmoid": _case_sigmoid,
    "softmax": _case_softmax,
    "bilinear_gather_values": lambda rng, step: _case_gather(rng, step, "map"),
    "bilinear_gather_positions": lambda rng, step: _case_gather(rng, step, "pos"),
    "fuse": _case_fuse,
    "refine_coarse": lambda rng, step: _case_refine(rng, step, "coarse"),
    "refine_weights": lambda rng, step: _case_refine(rng, step, "weights"),
    "refine_offsets": lambda rng, step: _case_refine(rng, step, "offsets"),
    "masked_loss": _case_masked_loss,
}


def run_gradcheck(
    instances: int = 20,
    step: float = DEFAULT_STEP,
    tolerance: float = DEFAULT_TOL,
    seed: int = 0,
    names: list[str] | None = None,
) -> list[CheckResult]:
    """Run the named checks (all by default) and collect worst-case errors."""
    results = []
    for case_index, (name, case) in enumerate(CHECKS.items()):
        if names is not None and name not in names:
            continue
        rng = np.random.default_rng(np.random.SeedSequence([0x6C, seed, case_index]))
        worst = max(case(rng, step) for _ in range(instances))
        results.append(CheckResult(name, instances, worst, tolerance))
    return results
