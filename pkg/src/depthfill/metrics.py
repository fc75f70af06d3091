"""The four standard depth-completion error metrics.

RMSE and MAE are reported in millimeters, iRMSE and iMAE on inverse depth
in 1/km. Only pixels with valid groundtruth contribute, pixels are pooled
across frames (devkit-style aggregation), and a non-positive prediction at
a valid pixel makes both inverse metrics infinite.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .maps import DepthMap

METRIC_COLUMNS = ("rmse_mm", "mae_mm", "irmse_1perkm", "imae_1perkm")


@dataclass
class MetricReport:
    rmse_mm: float
    mae_mm: float
    irmse_per_km: float
    imae_per_km: float
    n_valid_pixels: int
    per_frame: list[dict] = field(default_factory=list)

    def as_row(self) -> dict[str, float]:
        return {
            "rmse_mm": self.rmse_mm,
            "mae_mm": self.mae_mm,
            "irmse_1perkm": self.irmse_per_km,
            "imae_1perkm": self.imae_per_km,
        }


class MetricAccumulator:
    """Pools squared/absolute errors over all valid pixels of many frames."""

    def __init__(self):
        self.n = 0
        self.sq_sum = 0.0
        self.abs_sum = 0.0
        self.inv_sq_sum = 0.0
        self.inv_abs_sum = 0.0
        self.inverse_infinite = False
        self.per_frame: list[dict] = []

    def add(self, pred: DepthMap, gt: DepthMap, name: str | None = None) -> None:
        if pred.depth.shape != gt.depth.shape:
            raise ValueError(f"prediction {pred.depth.shape} and groundtruth {gt.depth.shape} differ in shape")
        mask = gt.valid
        d = pred.depth[mask]
        y = gt.depth[mask]
        n = int(mask.sum())
        frame = {"name": name, "n_valid_pixels": n}
        if n == 0:
            frame.update(dict.fromkeys(METRIC_COLUMNS, 0.0))
            self.per_frame.append(frame)
            return
        err = d - y
        sq = float(np.sum(err * err))
        ab = float(np.sum(np.abs(err)))
        self.n += n
        self.sq_sum += sq
        self.abs_sum += ab
        frame["rmse_mm"] = math.sqrt(sq / n) * 1000.0
        frame["mae_mm"] = ab / n * 1000.0
        if np.any(d <= 0):
            self.inverse_infinite = True
            frame["irmse_1perkm"] = math.inf
            frame["imae_1perkm"] = math.inf
        else:
            ierr = 1.0 / d - 1.0 / y
            isq = float(np.sum(ierr * ierr))
            iab = float(np.sum(np.abs(ierr)))
            self.inv_sq_sum += isq
            self.inv_abs_sum += iab
            frame["irmse_1perkm"] = math.sqrt(isq / n) * 1000.0
            frame["imae_1perkm"] = iab / n * 1000.0
        self.per_frame.append(frame)

    def report(self) -> MetricReport:
        if self.n == 0:
            return MetricReport(0.0, 0.0, 0.0, 0.0, 0, self.per_frame)
        if self.inverse_infinite:
            irmse = imae = math.inf
        else:
            irmse = math.sqrt(self.inv_sq_sum / self.n) * 1000.0
            imae = self.inv_abs_sum / self.n * 1000.0
        return MetricReport(
            rmse_mm=math.sqrt(self.sq_sum / self.n) * 1000.0,
            mae_mm=self.abs_sum / self.n * 1000.0,
            irmse_per_km=irmse,
            imae_per_km=imae,
            n_valid_pixels=self.n,
            per_frame=self.per_frame,
        )


def compute_metrics(pred: DepthMap, gt: DepthMap) -> MetricReport:
    """Single-frame report; see module docstring for conventions."""
    acc = MetricAccumulator()
    acc.add(pred, gt)
    return acc.report()


def write_metric_csv(path, rows: list[tuple[str, MetricReport]], key_column: str = "method") -> None:
    """CSV with header ``<key>,rmse_mm,mae_mm,irmse_1perkm,imae_1perkm``.

    Infinite values serialize as the literal ``inf``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([key_column, *METRIC_COLUMNS])
        for key, report in rows:
            row = report.as_row()
            writer.writerow([key] + [_fmt(row[c]) for c in METRIC_COLUMNS])


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf"
    return f"{v:.6f}"
