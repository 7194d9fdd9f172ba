"""Segmentation and field quality metrics: hard Dice, score summaries, inverse consistency."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .volumes import LabelVolume, ScalarVolume
from .warp import DisplacementField, compose_residual

ICE_MARGIN = 2  # voxels excluded from each face for inverse-consistency statistics


def dice_score(pred: LabelVolume, gt: LabelVolume, class_id: int) -> float:
    """Hard Dice overlap 2|A∩B| / (|A|+|B|) for one class.

    Both masks empty counts as 1.0 (perfect agreement on absence);
    exactly one empty counts as 0.0.
    """
    if pred.shape.dims != gt.shape.dims:
        raise ShapeError(f"dice_score: grid {pred.shape.dims} vs {gt.shape.dims}")
    if class_id < 0 or class_id >= max(pred.num_classes, gt.num_classes):
        raise ShapeError(f"class id {class_id} out of range")
    p = pred.data == class_id
    g = gt.data == class_id
    np_, ng = int(p.sum()), int(g.sum())
    if np_ == 0 and ng == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / (np_ + ng)


def foreground_dice(pred: LabelVolume, gt: LabelVolume) -> list[float]:
    """Dice per foreground class (1..K-1)."""
    k = max(pred.num_classes, gt.num_classes)
    return [dice_score(pred, gt, c) for c in range(1, k)]


@dataclass(frozen=True)
class ScoreSummary:
    """Per-case mean Dice statistics over a suite, as fractions in [0, 1]."""

    case_means: tuple[float, ...]
    class_means: tuple[float, ...]
    mean: float
    std: float
    min: float
    max: float

    def percent(self) -> dict[str, float]:
        return {"mean": 100.0 * self.mean, "std": 100.0 * self.std,
                "min": 100.0 * self.min, "max": 100.0 * self.max}


def summarize_scores(table) -> ScoreSummary:
    """Summarize a (cases x classes) Dice table.

    Each case is first reduced to its mean over foreground classes; the
    summary then reports mean, population std, min, and max over cases.
    """
    arr = np.asarray(table, dtype=np.float64)
    if arr.size == 0:
        raise ConfigError("summarize_scores: empty score table")
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ConfigError(f"summarize_scores: expected 2D table, got shape {arr.shape}")
    case_means = arr.mean(axis=1)
    return ScoreSummary(
        case_means=tuple(float(x) for x in case_means),
        class_means=tuple(float(x) for x in arr.mean(axis=0)),
        mean=float(case_means.mean()),
        std=float(case_means.std()),
        min=float(case_means.min()),
        max=float(case_means.max()),
    )


def inverse_consistency_error(f_fwd: DisplacementField,
                              f_bwd: DisplacementField) -> tuple[float, float, ScalarVolume]:
    """Per-voxel norm of the composed round-trip displacement.

    Returns (mean, max, error field). Statistics cover voxels at least
    ICE_MARGIN voxels from every face, because edge clamping pollutes the
    boundary residuals; if the grid is too small for that, they cover all
    voxels.
    """
    if f_fwd.shape.dims != f_bwd.shape.dims:
        raise ShapeError(f"inverse_consistency_error: grid {f_fwd.shape.dims} vs {f_bwd.shape.dims}")
    resid = compose_residual(f_fwd, f_bwd).data
    err = np.sqrt(np.einsum("...c,...c->...", resid, resid))
    m = ICE_MARGIN
    interior = err[m:-m, m:-m, m:-m] if min(err.shape) > 2 * m else err
    return float(interior.mean()), float(interior.max()), ScalarVolume(err)
