"""Completion pipelines: backbone, fusion, and deformable refinement wired
per experiment variant.

Variants differ in which depth grid the deformable operator refines:
the learned fused coarse map (the full pipeline), the raw sparse input
(invalid pixels as zeros), the nearest-neighbor densified input, or no
refinement at all (backbone only).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import Backbone, BackboneConfig, BackboneOutput, fuse_tensors
from .checkpoint import load_params, save_params
from .interp import InterpMethod, densify
from .maps import DepthMap, RgbImage
from .refine import RefineHeads, deformable_refine_tensor


class Variant(Enum):
    BACKBONE_ONLY = "backbone_only"
    DEFORM_ON_SPARSE = "deform_on_sparse"
    DEFORM_ON_NN = "deform_on_nn"
    DEFORM_ON_COARSE = "deform_on_coarse"


@dataclass
class ForwardResult:
    output: Tensor  # final (H, W) depth
    coarse: Tensor  # fused backbone depth (H, W)
    backbone: BackboneOutput


class CompletionModel:
    def __init__(
        self,
        variant: Variant,
        backbone_cfg: BackboneConfig,
        kernel_size: int = 3,
        weight_head_bias: float = -6.0,
        subtract_mean_weights: bool = False,
    ):
        self.variant = variant
        self.backbone_cfg = backbone_cfg
        self.kernel_size = kernel_size
        self.weight_head_bias = weight_head_bias
        self.subtract_mean_weights = subtract_mean_weights
        self.backbone = Backbone(backbone_cfg)
        self.heads = None
        if variant is not Variant.BACKBONE_ONLY:
            self.heads = RefineHeads(2 * backbone_cfg.base_channels, kernel_size, weight_head_bias)

    def forward(self, rgb: RgbImage, sparse: DepthMap) -> ForwardResult:
        """One frame through the variant's pipeline (builds the grad graph)."""
        h, w = sparse.depth.shape
        if self.variant is Variant.DEFORM_ON_NN:
            nn = densify(sparse, InterpMethod.NEAREST)
            depth_in, valid_in = nn.depth, nn.valid
        else:
            depth_in, valid_in = sparse.depth, sparse.valid
        bb = self.backbone.forward(rgb.data, depth_in, valid_in)
        coarse = ad.reshape(
            fuse_tensors(bb.d_color, bb.d_depth, bb.c_color, bb.c_depth), (h, w)
        )
        if self.variant is Variant.BACKBONE_ONLY:
            return ForwardResult(output=coarse, coarse=coarse, backbone=bb)

        weights, offsets = self.heads(bb.guidance())
        kk = self.kernel_size**2
        weights = ad.reshape(weights, (kk, h, w))
        offsets = ad.reshape(offsets, (2 * kk, h, w))
        if self.variant is Variant.DEFORM_ON_COARSE:
            base = coarse
        else:
            # refine the (densified) input grid itself; it is data, not a
            # function of the parameters, so it enters as a constant
            base = Tensor(depth_in)
        refined = deformable_refine_tensor(
            base, weights, offsets, self.kernel_size, self.subtract_mean_weights
        )
        return ForwardResult(output=refined, coarse=coarse, backbone=bb)

    def infer(self, rgb: RgbImage, sparse: DepthMap) -> DepthMap:
        """Inference on one frame; 0-valued outputs map to invalid pixels."""
        out = self.forward(rgb, sparse).output.data
        return DepthMap.from_values(np.maximum(out, 0.0))

    def named_params(self) -> dict[str, Tensor]:
        params = {f"backbone.{k}": v for k, v in self.backbone.named_params().items()}
        if self.heads is not None:
            params.update(self.heads.named_params())
        return params

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_params().items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_params()
        missing = set(params) ^ set(arrays)
        if missing:
            raise ValueError(f"parameter name mismatch: {sorted(missing)}")
        for k, p in params.items():
            if p.data.shape != arrays[k].shape:
                raise ValueError(f"shape mismatch for {k}: {p.data.shape} vs {arrays[k].shape}")
            p.data = arrays[k].astype(p.data.dtype)

    def meta(self) -> dict:
        return {
            "variant": self.variant.value,
            "backbone": self.backbone_cfg.to_dict(),
            "kernel_size": self.kernel_size,
            "weight_head_bias": self.weight_head_bias,
            "subtract_mean_weights": self.subtract_mean_weights,
        }

    def save(self, path) -> None:
        save_params(path, self.state_arrays(), meta=self.meta())

    @staticmethod
    def load(path) -> "CompletionModel":
        arrays, meta = load_params(path)
        model = CompletionModel(
            variant=Variant(meta["variant"]),
            backbone_cfg=BackboneConfig.from_dict(meta["backbone"]),
            kernel_size=meta["kernel_size"],
            weight_head_bias=meta["weight_head_bias"],
            subtract_mean_weights=meta["subtract_mean_weights"],
        )
        model.load_state_arrays(arrays)
        return model
