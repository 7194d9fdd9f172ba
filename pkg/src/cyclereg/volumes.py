"""Grid-based volume data model and resolution-pyramid resampling.

All volumes live on a regular 3D voxel grid with unit spacing. In memory,
scalar and label data are indexed ``data[x, y, z]``; multi-channel data
(probability maps, displacement fields) append a trailing channel axis.
Operations here are pure: identical inputs give bit-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import PyramidTooCoarse, ShapeError

PROB_TOL = 1e-6  # slack on [0, 1] channel bounds after interpolation


@dataclass(frozen=True)
class GridShape:
    """Voxel counts along the three axes."""

    nx: int
    ny: int
    nz: int

    def __post_init__(self):
        for name, n in (("nx", self.nx), ("ny", self.ny), ("nz", self.nz)):
            if int(n) != n or n < 2:
                raise ShapeError(f"{name} must be an integer >= 2, got {n!r}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def num_voxels(self) -> int:
        return self.nx * self.ny * self.nz

    @classmethod
    def of(cls, arr: np.ndarray) -> "GridShape":
        return cls(*(int(d) for d in arr.shape[:3]))


def _as_f64(data, expected_ndim: int, what: str) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != expected_ndim:
        raise ShapeError(f"{what} must be {expected_ndim}-dimensional, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class ScalarVolume:
    """One real intensity per voxel, stored as float64."""

    data: np.ndarray
    shape: GridShape = field(init=False)

    def __post_init__(self):
        arr = _as_f64(self.data, 3, "ScalarVolume data")
        if not np.isfinite(arr).all():
            raise ShapeError("ScalarVolume data must be finite")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "shape", GridShape.of(arr))


@dataclass(frozen=True)
class LabelVolume:
    """One integer class id in [0, num_classes) per voxel; class 0 is background."""

    data: np.ndarray
    num_classes: int
    shape: GridShape = field(init=False)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ShapeError(f"LabelVolume data must be 3-dimensional, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            raise ShapeError(f"LabelVolume data must be integer-typed, got {arr.dtype}")
        k = int(self.num_classes)
        if k < 1:
            raise ShapeError(f"num_classes must be >= 1, got {self.num_classes}")
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ShapeError(f"label ids must lie in [0, {k}), got range [{arr.min()}, {arr.max()}]")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "num_classes", k)
        object.__setattr__(self, "shape", GridShape.of(arr))


@dataclass(frozen=True)
class ProbVolume:
    """Per-voxel class probabilities: shape (nx, ny, nz, K), values in [0, 1] up to PROB_TOL."""

    data: np.ndarray
    shape: GridShape = field(init=False)

    def __post_init__(self):
        arr = _as_f64(self.data, 4, "ProbVolume data")
        if arr.shape[3] < 1:
            raise ShapeError("ProbVolume needs at least one channel")
        if not np.isfinite(arr).all():
            raise ShapeError("ProbVolume data must be finite")
        lo, hi = arr.min(), arr.max()
        if lo < -PROB_TOL or hi > 1.0 + PROB_TOL:
            raise ShapeError(f"channel values must lie in [-{PROB_TOL}, 1+{PROB_TOL}], got [{lo}, {hi}]")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "shape", GridShape.of(arr))

    @property
    def num_classes(self) -> int:
        return self.data.shape[3]


def one_hot_encode(labels: LabelVolume) -> ProbVolume:
    """Expand a label volume into K probability channels (exact 0/1)."""
    k = labels.num_classes
    probs = np.zeros(labels.data.shape + (k,), dtype=np.float64)
    # advanced-index scatter: one write per voxel, channel picked by the id
    ix, iy, iz = np.indices(labels.data.shape, sparse=True)
    probs[ix, iy, iz, labels.data] = 1.0
    return ProbVolume(probs)


def argmax_decode(probs: ProbVolume) -> LabelVolume:
    """Pick the per-voxel channel with maximal value; ties go to the lowest index."""
    ids = np.argmax(probs.data, axis=3).astype(np.uint16)
    return LabelVolume(ids, probs.num_classes)


def _pad_to_even(arr: np.ndarray) -> np.ndarray:
    pads = [(0, d % 2) for d in arr.shape[:3]] + [(0, 0)] * (arr.ndim - 3)
    if any(p[1] for p in pads):
        arr = np.pad(arr, pads, mode="edge")
    return arr


def _block_mean2(arr: np.ndarray) -> np.ndarray:
    """Mean over non-overlapping 2x2x2 spatial blocks (spatial dims must be even)."""
    nx, ny, nz = arr.shape[:3]
    rest = arr.shape[3:]
    view = arr.reshape((nx // 2, 2, ny // 2, 2, nz // 2, 2) + rest)
    return view.mean(axis=(1, 3, 5))


def downsample_box2(v):
    """Halve the grid by 2x2x2 box averaging.

    Output dims are ceil(input/2); odd dims are edge-replicated first.
    DisplacementField components are additionally scaled by 0.5 because
    displacements are expressed in voxel units of the new, coarser grid.
    """
    from .warp import DisplacementField  # local import to avoid a cycle

    dims = v.shape.dims
    if min(dims) < 4:
        raise PyramidTooCoarse(f"all dims must be >= 4 to downsample, got {dims}")
    arr = _block_mean2(_pad_to_even(v.data))
    if isinstance(v, ScalarVolume):
        return ScalarVolume(arr)
    if isinstance(v, ProbVolume):
        return ProbVolume(arr)
    if isinstance(v, DisplacementField):
        return DisplacementField(arr * 0.5)
    raise ShapeError(f"cannot downsample a {type(v).__name__}")


def upsample_field_2x(f, target: GridShape):
    """Prolong a displacement field onto a grid of roughly doubled dims.

    Each component is trilinearly interpolated (clamp-to-edge) at box-pyramid
    cell centers, then scaled by 2.0 to convert back to fine-grid voxel units.
    Target dims must lie in [2*dim - 1, 2*dim] per axis.
    """
    from .warp import DisplacementField, sample_at_positions

    src = f.data
    for d_src, d_tgt in zip(src.shape[:3], target.dims):
        if not (2 * d_src - 1 <= d_tgt <= 2 * d_src):
            raise ShapeError(f"target dim {d_tgt} incompatible with source dim {d_src}")
    # cell-centered coordinates: fine voxel j sits at coarse position (j+0.5)/s - 0.5
    axes = []
    for d_src, d_tgt in zip(src.shape[:3], target.dims):
        s = d_tgt / d_src
        axes.append((np.arange(d_tgt, dtype=np.float64) + 0.5) / s - 0.5)
    pos = np.empty(target.dims + (3,), dtype=np.float64)
    pos[..., 0] = axes[0][:, None, None]
    pos[..., 1] = axes[1][None, :, None]
    pos[..., 2] = axes[2][None, None, :]
    out = sample_at_positions(src, pos)
    return DisplacementField(out * 2.0)
