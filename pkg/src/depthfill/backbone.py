"""Two-branch encoder-decoder backbone with confidence fusion.

A color-dominant branch consumes the guidance image together with the
input depth; a depth-dominant branch consumes the input depth and, by
default, the color branch's depth estimate. Each branch is a small U-Net
(strided-conv encoder, upsample+conv decoder, skip connections) emitting a
strictly positive depth map, a raw confidence logit map, and the feature
map of its last decoder layer. The two depth estimates are blended per
pixel by a numerically stable two-way softmax over the confidences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class BackboneConfig:
    levels: int = 3
    base_channels: int = 16
    kernel_size: int = 3
    activation: str = "relu"
    upsample: str = "nearest"
    chain_color_to_depth: bool = True
    init_seed: int = 0

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError("levels must be >= 2")
        if self.base_channels < 8:
            raise ValueError("base_channels must be >= 8")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.upsample not in ("nearest", "bilinear"):
            raise ValueError(f"unsupported upsample mode {self.upsample!r}")

    @staticmethod
    def from_dict(d: dict) -> "BackboneConfig":
        return BackboneConfig(**d)

    def to_dict(self) -> dict:
        return {
            "levels": self.levels,
            "base_channels": self.base_channels,
            "kernel_size": self.kernel_size,
            "activation": self.activation,
            "upsample": self.upsample,
            "chain_color_to_depth": self.chain_color_to_depth,
            "init_seed": self.init_seed,
        }


@dataclass
class BackboneOutput:
    """Per-branch depths/confidences plus decoder features (NCHW tensors)."""

    d_color: Tensor
    d_depth: Tensor
    c_color: Tensor
    c_depth: Tensor
    z_color: Tensor
    z_depth: Tensor

    def guidance(self) -> Tensor:
        """Channel-wise concatenation of the two feature maps."""
        return ad.concat([self.z_depth, self.z_color], axis=1)


class Conv2dLayer:
    """Convolution parameters with Kaiming fan-in initialization."""

    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1, gain: float = np.sqrt(2.0)):
        std = gain / np.sqrt(cin * k * k)
        self.weight = Tensor(rng.normal(0.0, std, size=(cout, cin, k, k)), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)
        self.stride = stride
        self.padding = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def params(self) -> list[Tensor]:
        return [self.weight, self.bias]


class UNetBranch:
    """Strided-conv encoder, upsample+conv decoder with skip connections."""

    def __init__(self, in_channels: int, cfg: BackboneConfig, rng: np.random.Generator):
        k = cfg.kernel_size
        f = cfg.base_channels
        self.cfg = cfg
        widths = [f * 2**i for i in range(cfg.levels)]
        self.enc = [Conv2dLayer(in_channels, widths[0], k, rng)]
        for i in range(1, cfg.levels):
            self.enc.append(Conv2dLayer(widths[i - 1], widths[i], k, rng, stride=2))
        self.dec = []
        for i in range(cfg.levels - 1, 0, -1):
            self.dec.append(Conv2dLayer(widths[i] + widths[i - 1], widths[i - 1], k, rng))
        self.head_depth = Conv2dLayer(f, 1, 1, rng, gain=1.0)
        self.head_conf = Conv2dLayer(f, 1, 1, rng, gain=1.0)

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        skips = []
        for layer in self.enc:
            x = ad.relu(layer(x))
            skips.append(x)
        for layer, skip in zip(self.dec, reversed(skips[:-1])):
            x = ad.upsample2x(x, mode=self.cfg.upsample)
            x = ad.relu(layer(ad.concat([x, skip], axis=1)))
        depth = ad.softplus(self.head_depth(x))
        conf = self.head_conf(x)
        return depth, conf, x

    def params(self) -> list[Tensor]:
        layers = [*self.enc, *self.dec, self.head_depth, self.head_conf]
        return [p for layer in layers for p in layer.params()]


class Backbone:
    """Color-dominant and depth-dominant branches over a shared input frame."""

    def __init__(self, cfg: BackboneConfig):
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence([0xBB0E, cfg.init_seed]))
        # color branch: rgb(3) + depth(1) + validity(1); depth branch:
        # depth(1) + validity(1) [+ chained color-branch depth]
        self.color = UNetBranch(5, cfg, rng)
        self.depth = UNetBranch(3 if cfg.chain_color_to_depth else 2, cfg, rng)

    def forward(self, rgb: np.ndarray, depth_in: np.ndarray, valid: np.ndarray) -> BackboneOutput:
        """Run both branches on one frame (HxWx3 rgb, HxW depth and mask)."""
        h, w = depth_in.shape
        div = 2 ** (self.cfg.levels - 1)
        if h % div or w % div:
            raise ValueError(
                f"spatial size {h}x{w} must be divisible by {div}; pad the input to the next multiple"
            )
        rgb_t = Tensor(np.ascontiguousarray(rgb.transpose(2, 0, 1))[None])
        depth_t = Tensor(depth_in[None, None])
        valid_t = Tensor(valid.astype(np.float64)[None, None])
        d_c, c_c, z_c = self.color(ad.concat([rgb_t, depth_t, valid_t], axis=1))
        parts = [depth_t, valid_t]
        if self.cfg.chain_color_to_depth:
            parts.append(d_c)
        d_d, c_d, z_d = self.depth(ad.concat(parts, axis=1))
        return BackboneOutput(d_color=d_c, d_depth=d_d, c_color=c_c, c_depth=c_d, z_color=z_c, z_depth=z_d)

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for branch_name, branch in (("color", self.color), ("depth", self.depth)):
            layers = (
                [(f"enc{i}", l) for i, l in enumerate(branch.enc)]
                + [(f"dec{i}", l) for i, l in enumerate(branch.dec)]
                + [("head_depth", branch.head_depth), ("head_conf", branch.head_conf)]
            )
            for layer_name, layer in layers:
                out[f"{branch_name}.{layer_name}.weight"] = layer.weight
                out[f"{branch_name}.{layer_name}.bias"] = layer.bias
        return out


def fuse_tensors(d_color: Tensor, d_depth: Tensor, c_color: Tensor, c_depth: Tensor) -> Tensor:
    """Confidence-weighted blend of the two branch depths.

    fused = (d_depth * e^{c_depth} + d_color * e^{c_color})
          / (e^{c_depth} + e^{c_color}),
    evaluated with the per-pixel max logit subtracted first. The shift is
    a detached constant, so values are overflow-safe and gradients are the
    exact softmax gradients.
    """
    if not (d_color.shape == d_depth.shape == c_color.shape == c_depth.shape):
        raise ValueError("fuse requires four equal-shape maps")
    shift = Tensor(np.maximum(c_color.data, c_depth.data))
    e_c = ad.exp(ad.sub(c_color, shift))
    e_d = ad.exp(ad.sub(c_depth, shift))
    num = ad.add(ad.mul(d_depth, e_d), ad.mul(d_color, e_c))
    return ad.div(num, ad.add(e_d, e_c))


def fuse(d_color: np.ndarray, d_depth: np.ndarray, c_color: np.ndarray, c_depth: np.ndarray) -> np.ndarray:
    """Value-level fusion of plain arrays (same math as fuse_tensors)."""
    return fuse_tensors(Tensor(d_color), Tensor(d_depth), Tensor(c_color), Tensor(c_depth)).data
