"""Single-pass deformable kernel refinement of a coarse depth map.

Each output pixel p receives a residual on top of the coarse depth: a sum
over the k x k window centered at p where tap q contributes its learned
weight times the coarse depth bilinearly sampled at q plus a learned
per-pixel offset. Weights come from a 1x1 conv head squashed by a sigmoid;
offsets come from a second 1x1 conv head and are unconstrained (sampling
positions are clamped to the map border instead).

Tap ordering is row-major over the window: tap j covers displacement
(dy, dx) = (j // k - k // 2, j % k - k // 2); the center tap is included.
Offset channels interleave as (dx_1, dy_1, ..., dx_{k^2}, dy_{k^2}).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import Conv2dLayer
from .maps import DepthMap

# counts every execution of the deformable operator; lets callers prove
# the single-pass contract (exactly one refinement per inference frame)
_refine_calls = 0


def refine_call_count() -> int:
    return _refine_calls


def reset_refine_call_count() -> None:
    global _refine_calls
    _refine_calls = 0


@dataclass(frozen=True)
class KernelField:
    """H x W x k^2 interpolation weights, each in the open interval (0, 1)."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 3 or int(round(w.shape[2] ** 0.5)) ** 2 != w.shape[2]:
            raise ValueError(f"kernel field must be HxWxk^2, got {w.shape}")
        if np.any(w <= 0) or np.any(w >= 1):
            raise ValueError("kernel weights must lie strictly inside (0, 1)")
        object.__setattr__(self, "weights", w)

    @property
    def k(self) -> int:
        return int(round(self.weights.shape[2] ** 0.5))


@dataclass(frozen=True)
class OffsetField:
    """H x W x 2k^2 sampling offsets in pixels, (dx_1, dy_1, ...) order."""

    offsets: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.offsets, dtype=np.float64)
        if o.ndim != 3 or o.shape[2] % 2:
            raise ValueError(f"offset field must be HxWx2k^2, got {o.shape}")
        if int(round((o.shape[2] // 2) ** 0.5)) ** 2 != o.shape[2] // 2:
            raise ValueError(f"offset channel count {o.shape[2]} is not 2*k^2")
        if not np.isfinite(o).all():
            raise ValueError("offsets must be finite")
        object.__setattr__(self, "offsets", o)

    @property
    def k(self) -> int:
        return int(round((self.offsets.shape[2] // 2) ** 0.5))


class RefineHeads:
    """The two 1x1 conv heads regressing weights and offsets from guidance.

    Near-identity initialization: both heads start with zero conv weights;
    the offset head's bias is zero (regular grid) and the weight head's
    bias defaults to -6 so the k^2 sigmoid weights sum to about 2% and the
    initial residual stays small.
    """

    def __init__(self, guidance_channels: int, k: int = 3, weight_head_bias: float = -6.0):
        if k % 2 == 0 or k < 1:
            raise ValueError(f"kernel size must be odd, got {k}")
        self.k = k
        self.guidance_channels = guidance_channels
        rng = np.random.default_rng(0)  # zero-init heads; rng unused but required
        self.weight_head = Conv2dLayer(guidance_channels, k * k, 1, rng)
        self.offset_head = Conv2dLayer(guidance_channels, 2 * k * k, 1, rng)
        self.weight_head.weight.data[:] = 0.0
        self.weight_head.bias.data[:] = weight_head_bias
        self.offset_head.weight.data[:] = 0.0
        self.offset_head.bias.data[:] = 0.0

    def __call__(self, guidance: Tensor) -> tuple[Tensor, Tensor]:
        """Map (1, 2F, H, W) guidance to weight and offset tensors."""
        if guidance.data.ndim != 4 or guidance.data.shape[1] != self.guidance_channels:
            raise ValueError(
                f"guidance must be (1, {self.guidance_channels}, H, W), got {guidance.data.shape}"
            )
        weights = ad.sigmoid(self.weight_head(guidance))
        offsets = self.offset_head(guidance)
        return weights, offsets

    def named_params(self) -> dict[str, Tensor]:
        return {
            "refine.weight_head.weight": self.weight_head.weight,
            "refine.weight_head.bias": self.weight_head.bias,
            "refine.offset_head.weight": self.offset_head.weight,
            "refine.offset_head.bias": self.offset_head.bias,
        }


def predict_fields(guidance: np.ndarray, heads: RefineHeads) -> tuple[KernelField, OffsetField]:
    """Run the heads on an H x W x 2F guidance array."""
    if guidance.ndim != 3:
        raise ValueError(f"guidance must be HxWxC, got shape {guidance.shape}")
    g = Tensor(np.ascontiguousarray(guidance.transpose(2, 0, 1))[None])
    weights, offsets = heads(g)
    return (
        KernelField(weights.data[0].transpose(1, 2, 0)),
        OffsetField(offsets.data[0].transpose(1, 2, 0)),
    )


def tap_displacements(k: int) -> np.ndarray:
    """(k^2, 2) integer (dx, dy) pairs in tap order."""
    half = k // 2
    taps = [(j % k - half, j // k - half) for j in range(k * k)]
    return np.asarray(taps, dtype=np.float64)


def deformable_refine_tensor(
    coarse: Tensor,
    weights: Tensor,
    offsets: Tensor,
    k: int,
    subtract_mean_weights: bool = False,
) -> Tensor:
    """Graph-level refinement: coarse (H, W), weights (k^2, H, W), offsets
    (2k^2, H, W); returns the refined (H, W) tensor.

    Differentiable w.r.t. all three inputs. With ``subtract_mean_weights``
    the per-pixel tap mean is removed from the weights first (zero-sum
    kernels), which allows signed residuals.
    """
    global _refine_calls
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    h, w = coarse.data.shape
    if weights.data.shape != (k * k, h, w):
        raise ValueError(f"weights must be ({k * k}, {h}, {w}), got {weights.data.shape}")
    if offsets.data.shape != (2 * k * k, h, w):
        raise ValueError(f"offsets must be ({2 * k * k}, {h}, {w}), got {offsets.data.shape}")
    _refine_calls += 1

    if subtract_mean_weights:
        weights = ad.sub(weights, ad.tmean(weights, axis=0))

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    taps = tap_displacements(k)
    m = h * w
    out = coarse
    for j in range(k * k):
        dx, dy = taps[j]
        px = ad.add(ad.take_channel(offsets, 2 * j), Tensor(xx + dx))
        py = ad.add(ad.take_channel(offsets, 2 * j + 1), Tensor(yy + dy))
        pos = ad.concat([ad.reshape(px, (m, 1)), ad.reshape(py, (m, 1))], axis=1)
        sampled = ad.reshape(ad.bilinear_gather(coarse, pos), (h, w))
        out = ad.add(out, ad.mul(ad.take_channel(weights, j), sampled))
    return out


def refine(coarse: DepthMap, weights: KernelField, offsets: OffsetField, k: int) -> DepthMap:
    """Value-level refinement of a fully valid coarse map."""
    if not coarse.valid.all():
        raise ValueError("refine expects a fully valid coarse map")
    if weights.k != k or offsets.k != k:
        raise ValueError(f"field kernel sizes ({weights.k}, {offsets.k}) do not match k={k}")
    out = deformable_refine_tensor(
        Tensor(coarse.depth),
        Tensor(np.ascontiguousarray(weights.weights.transpose(2, 0, 1))),
        Tensor(np.ascontiguousarray(offsets.offsets.transpose(2, 0, 1))),
        k,
    )
    return DepthMap.dense(out.data)


def refine_module_forward(coarse: DepthMap, guidance: np.ndarray, heads: RefineHeads, k: int) -> DepthMap:
    """Predict fields from guidance, then refine — one single pass."""
    weights, offsets = predict_fields(guidance, heads)
    return refine(coarse, weights, offsets, k)
