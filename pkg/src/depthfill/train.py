"""Training loss, optimizer, schedules, augmentation, and the variant
experiment harness.

The loss is a masked mix of squared and absolute error: alpha * mean over
valid-groundtruth pixels of (D - Y)^2 plus (1 - alpha) * mean of |D - Y|,
computed in meters. The optimizer is Adam with bias correction and an L2
weight-decay term added to the gradient. All randomness flows from the
experiment seed, so identical configs reproduce identical runs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import BackboneConfig
from .maps import DepthMap, RgbImage
from .metrics import MetricAccumulator, MetricReport
from .model import CompletionModel, Variant
from .png_io import list_frames


# -- configs -------------------------------------------------------------------


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    reduction: str = "mean_over_valid"  # or "sum"
    aux_coarse_weight: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.reduction not in ("mean_over_valid", "sum"):
            raise ValueError(f"unknown reduction {self.reduction!r}")


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 1e-5
    epochs: int = 30
    batch_size: int = 2
    schedule: dict = field(default_factory=lambda: {"kind": "cosine"})

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 < b < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {b}")


@dataclass(frozen=True)
class AugmentConfig:
    hflip: bool = True
    color_jitter: bool = True
    crop: tuple[int, int] | None = None


# -- loss ------------------------------------------------------------------------


def masked_loss_tensor(pred: Tensor, gt: DepthMap, cfg: LossConfig) -> Tensor:
    """Graph-level loss of an (H, W) prediction against groundtruth.

    Pixels without valid groundtruth are masked out before both norms, so
    their gradient is exactly zero.
    """
    if pred.data.shape != gt.depth.shape:
        raise ValueError(f"prediction {pred.data.shape} vs groundtruth {gt.depth.shape}")
    n = int(gt.valid.sum())
    if n == 0:
        raise ValueError("loss needs at least one valid groundtruth pixel")
    mask = Tensor(gt.valid.astype(np.float64))
    diff = ad.mul(ad.sub(pred, Tensor(gt.depth)), mask)
    sq = ad.tsum(ad.square(diff))
    ab = ad.tsum(ad.absolute(diff))
    if cfg.reduction == "mean_over_valid":
        sq = ad.mul(sq, 1.0 / n)
        ab = ad.mul(ab, 1.0 / n)
    return ad.add(ad.mul(sq, cfg.alpha), ad.mul(ab, 1.0 - cfg.alpha))


def masked_loss(pred: DepthMap, gt: DepthMap, cfg: LossConfig) -> float:
    return masked_loss_tensor(Tensor(pred.depth), gt, cfg).item()


# -- learning-rate schedules -------------------------------------------------------


@dataclass(frozen=True)
class CosineSchedule:
    lr0: float
    total_epochs: int


@dataclass(frozen=True)
class StaircaseSchedule:
    lr0: float
    milestones: tuple[int, ...]
    factors: tuple[float, ...]
    total_epochs: int

    def __post_init__(self):
        if len(self.milestones) != len(self.factors):
            raise ValueError("milestones and factors must pair up")
        if list(self.milestones) != sorted(self.milestones):
            raise ValueError("milestones must be increasing")


def make_schedule(spec: dict, lr0: float, total_epochs: int):
    kind = spec.get("kind", "cosine")
    if kind == "cosine":
        return CosineSchedule(lr0, total_epochs)
    if kind == "staircase":
        return StaircaseSchedule(
            lr0,
            tuple(spec.get("milestones", (10, 15, 25))),
            tuple(spec.get("factors", (0.5, 0.2, 0.1))),
            total_epochs,
        )
    raise ValueError(f"unknown schedule kind {kind!r}")


def lr_at(schedule, epoch: int) -> float:
    """Learning rate at an integer epoch in [0, total_epochs)."""
    if not 0 <= epoch < schedule.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    if isinstance(schedule, CosineSchedule):
        return schedule.lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / schedule.total_epochs))
    lr = schedule.lr0
    for milestone, factor in zip(schedule.milestones, schedule.factors):
        if epoch >= milestone:
            lr *= factor
    return lr


# -- optimizer ---------------------------------------------------------------------


class Adam:
    """Adam with bias correction; weight decay enters through the gradient."""

    EPS = 1e-8

    def __init__(self, params: dict[str, Tensor], cfg: OptimConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise RuntimeError(f"non-finite gradient in {name!r} at step {self.t}; aborting run")
            if self.cfg.weight_decay:
                g = g + self.cfg.weight_decay * p.data
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            mhat = self.m[name] / (1.0 - b1**self.t)
            vhat = self.v[name] / (1.0 - b2**self.t)
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.EPS)


# -- augmentation -------------------------------------------------------------------


def augment(
    rgb: RgbImage, sparse: DepthMap, gt: DepthMap, seed: int, cfg: AugmentConfig = AugmentConfig()
) -> tuple[RgbImage, DepthMap, DepthMap]:
    """Jointly transform one frame: one crop window and one flip decision
    shared by all three maps; brightness/contrast jitter on the image only."""
    rng = np.random.default_rng(np.random.SeedSequence([0xA3617, seed]))
    img, sp_d, sp_v = rgb.data, sparse.depth, sparse.valid
    gt_d, gt_v = gt.depth, gt.valid
    if cfg.crop is not None:
        ch, cw = cfg.crop
        h, w = sp_d.shape
        if ch > h or cw > w:
            raise ValueError(f"crop {cfg.crop} larger than image {h}x{w}")
        r0 = int(rng.integers(0, h - ch + 1))
        c0 = int(rng.integers(0, w - cw + 1))
        img = img[r0 : r0 + ch, c0 : c0 + cw]
        sp_d, sp_v = sp_d[r0 : r0 + ch, c0 : c0 + cw], sp_v[r0 : r0 + ch, c0 : c0 + cw]
        gt_d, gt_v = gt_d[r0 : r0 + ch, c0 : c0 + cw], gt_v[r0 : r0 + ch, c0 : c0 + cw]
    if cfg.hflip and rng.random() < 0.5:
        img = img[:, ::-1]
        sp_d, sp_v = sp_d[:, ::-1], sp_v[:, ::-1]
        gt_d, gt_v = gt_d[:, ::-1], gt_v[:, ::-1]
    if cfg.color_jitter:
        brightness = rng.uniform(0.75, 1.25)
        contrast = rng.uniform(0.75, 1.25)
        img = np.clip(((img - 0.5) * contrast + 0.5) * brightness, 0.0, 1.0)
    return (
        RgbImage(np.ascontiguousarray(img)),
        DepthMap(np.ascontiguousarray(sp_d), np.ascontiguousarray(sp_v)),
        DepthMap(np.ascontiguousarray(gt_d), np.ascontiguousarray(gt_v)),
    )


# -- experiment config ----------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    """Declarative description of one experiment (the JSON config schema)."""

    variant: Variant
    seed: int
    dataset_root: str
    train_split: str = "train"
    val_split: str = "val"
    kernel_size: int = 3
    weight_head_bias: float = -6.0
    subtract_mean_weights: bool = False
    backbone: BackboneConfig = BackboneConfig()
    optim: OptimConfig = OptimConfig()
    loss: LossConfig = LossConfig()
    augment: AugmentConfig = AugmentConfig()
    seeds: tuple[int, ...] = ()

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "seed" not in d:
            raise ValueError("config must set an explicit seed (no entropy defaults)")
        dataset = d.get("dataset")
        if not dataset or "root" not in dataset:
            raise ValueError("config must set dataset.root")
        backbone_d = dict(d.get("backbone", {}))
        seed = int(d["seed"])
        # unless pinned, weight init follows the run seed so seed sweeps
        # vary both initialization and data order
        backbone_d.setdefault("init_seed", seed)
        optim = OptimConfig(
            learning_rate=d.get("learning_rate", 1e-3),
            beta1=d.get("beta1", 0.9),
            beta2=d.get("beta2", 0.99),
            weight_decay=d.get("weight_decay", 1e-5),
            epochs=d.get("epochs", 30),
            batch_size=d.get("batch_size", 2),
            schedule=d.get("schedule", {"kind": "cosine"}),
        )
        loss_d = d.get("loss", {})
        aug_d = dict(d.get("augment", {}))
        if aug_d.get("crop") is not None:
            aug_d["crop"] = tuple(aug_d["crop"])
        refine_d = d.get("refine", {})
        return ExperimentConfig(
            variant=Variant(d["variant"]),
            seed=seed,
            dataset_root=dataset["root"],
            train_split=dataset.get("train_split", "train"),
            val_split=dataset.get("val_split", "val"),
            kernel_size=d.get("kernel_size", 3),
            weight_head_bias=refine_d.get("weight_head_bias", -6.0),
            subtract_mean_weights=refine_d.get("subtract_mean_weights", False),
            backbone=BackboneConfig.from_dict(backbone_d),
            optim=optim,
            loss=LossConfig(
                alpha=d.get("alpha", 0.5),
                reduction=loss_d.get("reduction", "mean_over_valid"),
                aux_coarse_weight=loss_d.get("aux_coarse_weight", 0.0),
            ),
            augment=AugmentConfig(**aug_d),
            seeds=tuple(d.get("seeds", (seed,))),
        )

    @staticmethod
    def from_json_file(path) -> "ExperimentConfig":
        return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {
            "variant": self.variant.value,
            "seed": self.seed,
            "seeds": list(self.seeds),
            "dataset": {
                "root": self.dataset_root,
                "train_split": self.train_split,
                "val_split": self.val_split,
            },
            "kernel_size": self.kernel_size,
            "alpha": self.loss.alpha,
            "learning_rate": self.optim.learning_rate,
            "beta1": self.optim.beta1,
            "beta2": self.optim.beta2,
            "weight_decay": self.optim.weight_decay,
            "epochs": self.optim.epochs,
            "batch_size": self.optim.batch_size,
            "schedule": self.optim.schedule,
            "backbone": self.backbone.to_dict(),
            "refine": {
                "weight_head_bias": self.weight_head_bias,
                "subtract_mean_weights": self.subtract_mean_weights,
            },
            "loss": {"reduction": self.loss.reduction, "aux_coarse_weight": self.loss.aux_coarse_weight},
            "augment": {
                "hflip": self.augment.hflip,
                "color_jitter": self.augment.color_jitter,
                "crop": list(self.augment.crop) if self.augment.crop else None,
            },
        }


# -- trainer -----------------------------------------------------------------------


FrameData = tuple[RgbImage, DepthMap, DepthMap]


def load_split(root, split: str) -> list[FrameData]:
    return [frame.load() for frame in list_frames(root, split)]


class Trainer:
    """Drives one model over a preloaded dataset, one epoch at a time."""

    def __init__(
        self,
        model: CompletionModel,
        train_data: list[FrameData],
        val_data: list[FrameData],
        optim_cfg: OptimConfig,
        loss_cfg: LossConfig,
        aug_cfg: AugmentConfig,
        seed: int,
    ):
        if not train_data or not val_data:
            raise ValueError("both train and val splits must be non-empty")
        self.model = model
        self.train_data = train_data
        self.val_data = val_data
        self.optim_cfg = optim_cfg
        self.loss_cfg = loss_cfg
        self.aug_cfg = aug_cfg
        self.adam = Adam(model.named_params(), optim_cfg)
        self.schedule = make_schedule(optim_cfg.schedule, optim_cfg.learning_rate, optim_cfg.epochs)
        self.rng = np.random.default_rng(np.random.SeedSequence([0x72A1, seed]))

    def _sample_loss(self, rgb: RgbImage, sparse: DepthMap, gt: DepthMap) -> Tensor:
        result = self.model.forward(rgb, sparse)
        loss = masked_loss_tensor(result.output, gt, self.loss_cfg)
        if self.loss_cfg.aux_coarse_weight > 0 and result.output is not result.coarse:
            aux = masked_loss_tensor(result.coarse, gt, self.loss_cfg)
            loss = ad.add(loss, ad.mul(aux, self.loss_cfg.aux_coarse_weight))
        return loss

    def train_epoch(self, epoch: int) -> float:
        """One pass over the training split; returns the mean step loss."""
        lr = lr_at(self.schedule, epoch)
        order = self.rng.permutation(len(self.train_data))
        bs = self.optim_cfg.batch_size
        step_losses = []
        for start in range(0, len(order), bs):
            batch = order[start : start + bs]
            self.adam.zero_grad()
            batch_loss = 0.0
            for idx in batch:
                rgb, sparse, gt = self.train_data[idx]
                aug_seed = int(self.rng.integers(0, 2**31))
                rgb, sparse, gt = augment(rgb, sparse, gt, aug_seed, self.aug_cfg)
                loss = self._sample_loss(rgb, sparse, gt)
                batch_loss += loss.item()
                ad.mul(loss, 1.0 / len(batch)).backward()
            self.adam.step(lr)
            step_losses.append(batch_loss / len(batch))
        return float(np.mean(step_losses))

    def eval_loss(self, data: list[FrameData]) -> float:
        """Mean un-augmented loss over a split (no parameter updates)."""
        return float(np.mean([self._sample_loss(*frame).item() for frame in data]))

    def evaluate(self) -> MetricReport:
        acc = MetricAccumulator()
        for i, (rgb, sparse, gt) in enumerate(self.val_data):
            acc.add(self.model.infer(rgb, sparse), gt, name=str(i))
        return acc.report()


@dataclass
class RunResult:
    model: CompletionModel
    report: MetricReport
    best_epoch: int
    log: list[dict]


def run_variant(cfg: ExperimentConfig, variant: Variant | None = None, seed: int | None = None) -> RunResult:
    """Train one variant end to end and return the best-validation model.

    ``variant``/``seed`` override the config (used by the variant matrix).
    Deterministic: identical inputs give identical logs and parameters.
    """
    variant = variant or cfg.variant
    seed = cfg.seed if seed is None else seed
    backbone_cfg = (
        replace(cfg.backbone, init_seed=seed) if seed != cfg.seed else cfg.backbone
    )
    model = CompletionModel(
        variant,
        backbone_cfg,
        kernel_size=cfg.kernel_size,
        weight_head_bias=cfg.weight_head_bias,
        subtract_mean_weights=cfg.subtract_mean_weights,
    )
    train_data = load_split(cfg.dataset_root, cfg.train_split)
    val_data = load_split(cfg.dataset_root, cfg.val_split)
    trainer = Trainer(model, train_data, val_data, cfg.optim, cfg.loss, cfg.augment, seed)

    best: tuple[float, int, dict[str, np.ndarray]] | None = None
    log: list[dict] = []
    for epoch in range(cfg.optim.epochs):
        train_loss = trainer.train_epoch(epoch)
        report = trainer.evaluate()
        record = {
            "epoch": epoch,
            "lr": lr_at(trainer.schedule, epoch),
            "train_loss": train_loss,
            "val": _json_metrics(report),
        }
        log.append(record)
        if best is None or report.rmse_mm < best[0]:
            best = (report.rmse_mm, epoch, model.state_arrays())
    model.load_state_arrays(best[2])
    final_report = trainer.evaluate()
    return RunResult(model=model, report=final_report, best_epoch=best[1], log=log)


def run_variant_matrix(
    cfg: ExperimentConfig, variants: list[Variant], seeds: list[int], jobs: int = 1
) -> dict[tuple[str, int], MetricReport]:
    """Train every (variant, seed) pair; optionally across processes."""
    tasks = [(cfg.to_dict(), v.value, s) for v in variants for s in seeds]
    if jobs > 1 and len(tasks) > 1:
        import multiprocessing as mp

        with mp.get_context("spawn").Pool(processes=min(jobs, len(tasks))) as pool:
            rows = pool.map(_matrix_task, tasks)
    else:
        rows = [_matrix_task(t) for t in tasks]
    return {(v, s): report for (v, s, report) in rows}


def _matrix_task(args) -> tuple[str, int, MetricReport]:
    cfg_dict, variant_value, seed = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    result = run_variant(cfg, variant=Variant(variant_value), seed=seed)
    return variant_value, seed, result.report


def _json_metrics(report: MetricReport) -> dict:
    row = {k: (v if math.isfinite(v) else "inf") for k, v in report.as_row().items()}
    row["n_valid_pixels"] = report.n_valid_pixels
    return row
