"""Scene-completion evaluation: confusion counts, per-class IoU, mIoU, SC IoU.

Scores can be restricted to the voxels whose centroids project inside the
camera image (in-FOV), to the complement (out-FOV), or to the whole scene.
UNKNOWN ground-truth voxels never count anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInput, ShapeError
from .flosp import project_centroids
from .grid import UNKNOWN, CameraModel, SemanticGrid


@dataclass(frozen=True)
class ConfusionMatrix:
    """Square count matrix, rows ground truth, columns prediction."""

    counts: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "counts", np.asarray(self.counts, dtype=np.int64))
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ShapeError("confusion matrix must be square")
        if (self.counts < 0).any():
            raise ValueError("confusion counts must be non-negative")

    @property
    def class_count(self) -> int:
        return self.counts.shape[0]

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def scope_masks(camera: CameraModel, grid: SemanticGrid) -> dict:
    """Boolean voxel masks for the three evaluation scopes."""
    in_fov = project_centroids(camera, grid).valid
    return {
        "in_fov": in_fov,
        "out_fov": ~in_fov,
        "whole": np.ones_like(in_fov),
    }


def accumulate(
    pred: SemanticGrid, gt: SemanticGrid, scope: np.ndarray
) -> ConfusionMatrix:
    """Tally (gt, pred) pairs over in-scope voxels with defined ground truth."""
    if pred.dims != gt.dims or pred.class_count != gt.class_count:
        raise ShapeError("prediction and ground truth grids do not match")
    scope = np.asarray(scope, dtype=bool)
    if scope.shape != gt.labels.shape:
        raise ShapeError("scope mask does not match the grid")
    if (pred.labels == UNKNOWN).any():
        raise ValueError("prediction grid must not contain UNKNOWN voxels")
    take = scope & (gt.labels != UNKNOWN)
    c = gt.class_count
    flat = gt.labels[take].astype(np.int64) * c + pred.labels[take].astype(np.int64)
    counts = np.bincount(flat, minlength=c * c).reshape(c, c)
    return ConfusionMatrix(counts)


def iou_report(cm: ConfusionMatrix) -> dict:
    """Per-class IoU, mean IoU over semantic classes, and binary SC IoU.

    Classes whose union is empty get NaN and are excluded from the mean; the
    mean runs over semantic classes only (class 0 is free space).
    """
    counts = cm.counts
    tp = np.diag(counts).astype(np.float64)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    union = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(union > 0, tp / np.where(union > 0, union, 1), np.nan)
    if not (union > 0).any():
        raise DegenerateInput("empty confusion matrix: no class defined")

    semantic = per_class[1:]
    valid = ~np.isnan(semantic)
    miou = float(semantic[valid].mean()) if valid.any() else float("nan")

    # binary collapse: free (index 0) vs occupied (everything else)
    occ_tp = counts[1:, 1:].sum()
    occ_fp = counts[0, 1:].sum()
    occ_fn = counts[1:, 0].sum()
    occ_union = occ_tp + occ_fp + occ_fn
    sc_iou = float(occ_tp / occ_union) if occ_union > 0 else float("nan")

    return {
        "per_class_iou": [float(v) for v in per_class],
        "miou": miou,
        "sc_iou": sc_iou,
    }
