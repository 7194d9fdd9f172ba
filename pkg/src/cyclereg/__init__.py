"""Cycle-consistent pair registration and one-shot atlas label transfer.

Given one labelled atlas volume and one unlabelled target volume, the solver
directly optimizes a forward and a backward dense displacement field under a
composite objective (windowed correlation similarity, field smoothness, and
image/transformation/label cycle-consistency penalties), then transfers the
atlas segmentation to the target through the forward field.
"""

from .errors import (ConfigError, CycleRegError, FormatError, NumericsError,
                     PyramidTooCoarse, ShapeError)
from .volumes import (GridShape, LabelVolume, ProbVolume, ScalarVolume,
                      argmax_decode, downsample_box2, one_hot_encode,
                      upsample_field_2x)
from .warp import (DisplacementField, WarpVJP, compose_residual, warp_channels,
                   warp_scalar, warp_vjp)
from .objective import (CharbonnierParams, LossWeights, ObjectiveBreakdown,
                        anatomy_cycle_dice_loss, anatomy_diff_consistency_loss,
                        charbonnier, composite_objective, image_cycle_loss,
                        ncc_loss, smoothness_loss,
                        transformation_consistency_loss, weighted_total)
from .solver import AdamState, SolveConfig, SolveTrace, adam_step, optimize_pair
from .transfer import CycleReport, TransferResult, cycle_report, transfer_labels
from .phantom import (DeformSpec, PhantomSpec, gen_phantom, gen_smooth_field,
                      make_pair, structure_geometry)
from .metrics import (ScoreSummary, dice_score, foreground_dice,
                      inverse_consistency_error, summarize_scores)
from .volio import (VolumeHeader, load_field, load_labels, load_scalar,
                    read_volume, save_field, save_labels, save_scalar,
                    write_volume)
from .config import load_phantom_spec, load_run_config, parse_run_config
from .gradcheck import run_grad_suite, suite_passes

__version__ = "0.1.0"

__all__ = [
    "GridShape", "ScalarVolume", "LabelVolume", "ProbVolume", "DisplacementField",
    "one_hot_encode", "argmax_decode", "downsample_box2", "upsample_field_2x",
    "warp_scalar", "warp_channels", "compose_residual", "warp_vjp", "WarpVJP",
    "ncc_loss", "smoothness_loss", "charbonnier", "transformation_consistency_loss",
    "image_cycle_loss", "anatomy_cycle_dice_loss", "anatomy_diff_consistency_loss",
    "composite_objective", "LossWeights", "CharbonnierParams", "ObjectiveBreakdown",
    "AdamState", "adam_step", "SolveConfig", "SolveTrace", "optimize_pair",
    "transfer_labels", "cycle_report", "TransferResult", "CycleReport",
    "PhantomSpec", "DeformSpec", "gen_phantom", "gen_smooth_field", "make_pair",
    "structure_geometry", "weighted_total",
    "dice_score", "foreground_dice", "summarize_scores", "ScoreSummary",
    "inverse_consistency_error",
    "VolumeHeader", "write_volume", "read_volume", "save_scalar", "load_scalar",
    "save_labels", "load_labels", "save_field", "load_field",
    "load_run_config", "parse_run_config", "load_phantom_spec",
    "run_grad_suite", "suite_passes",
    "CycleRegError", "ShapeError", "ConfigError", "FormatError", "NumericsError",
    "PyramidTooCoarse",
]
