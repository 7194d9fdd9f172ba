"""Synthetic volumes with known labels and known deformations.

Phantoms provide ground truth for the quantitative tests: ellipsoidal
structures with distinct intensities on a quiet background, plus smooth
random displacement fields of controlled magnitude. Everything is
deterministic given the seeds (PCG64 generators).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, ShapeError
from .volumes import GridShape, LabelVolume, ScalarVolume, one_hot_encode, argmax_decode
from .warp import DisplacementField, warp_channels, warp_scalar

BACKGROUND_LEVEL = 0.1
EDGE_SOFTEN_SIGMA = 1.0   # Gaussian blur of the piecewise-constant image
STRUCTURE_MARGIN = 2      # minimum distance of any structure from the grid faces
MIN_SEMI_AXIS = 1.5       # guarantees each ellipsoid contains a lattice point


@dataclass(frozen=True)
class PhantomSpec:
    """Layout of one synthetic atlas: grid, structure count, contrast, noise."""

    shape: GridShape
    num_structures: int = 4
    contrast: tuple[float, ...] | None = None
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.num_structures < 1:
            raise ConfigError(f"num_structures must be >= 1, got {self.num_structures}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.contrast is not None:
            c = tuple(float(v) for v in self.contrast)
            if len(c) != self.num_structures:
                raise ConfigError(f"contrast needs {self.num_structures} entries, got {len(c)}")
            object.__setattr__(self, "contrast", c)


@dataclass(frozen=True)
class DeformSpec:
    """Smooth random deformation: peak magnitude (voxels) and Gaussian scale."""

    max_magnitude: float = 3.0
    smoothness_sigma: float = 6.0
    seed: int = 0

    def __post_init__(self):
        if self.max_magnitude < 0:
            raise ConfigError(f"max_magnitude must be >= 0, got {self.max_magnitude}")
        if not self.smoothness_sigma > 0:
            raise ConfigError(f"smoothness_sigma must be > 0, got {self.smoothness_sigma}")


def _structure_cells(dims: tuple[int, int, int], count: int):
    """Split the grid into cells, one ellipsoid per cell; cell order is fixed."""
    per_axis = max(1, math.ceil(count ** (1.0 / 3.0)))
    while per_axis ** 3 < count:
        per_axis += 1
    cells = list(itertools.product(range(per_axis), repeat=3))
    sizes = tuple(d / per_axis for d in dims)
    return cells, sizes


def _geometry(spec: PhantomSpec, rng: np.random.Generator):
    """Jittered (center, semi-axes) per structure; validates fit and margins."""
    dims = spec.shape.dims
    cells, cell_sizes = _structure_cells(dims, spec.num_structures)
    geometry = []
    for k in range(spec.num_structures):
        cell = cells[k]
        semi = np.array([(s / 2.0 - (STRUCTURE_MARGIN + 0.5)) * rng.uniform(0.55, 0.8)
                         for s in cell_sizes])
        center = np.array([(c + 0.5) * s + rng.uniform(-0.08, 0.08) * s
                           for c, s in zip(cell, cell_sizes)])
        if semi.min() < MIN_SEMI_AXIS:
            raise ConfigError(
                f"structure {k + 1} does not fit: semi-axes {np.round(semi, 2)} fall "
                f"below {MIN_SEMI_AXIS} voxels on grid {dims}")
        for axis in range(3):
            if center[axis] - semi[axis] < STRUCTURE_MARGIN or \
               center[axis] + semi[axis] > dims[axis] - 1 - STRUCTURE_MARGIN:
                raise ConfigError(f"structure {k + 1} does not fit inside grid {dims} "
                                  f"with a {STRUCTURE_MARGIN}-voxel margin")
        geometry.append((center, semi))
    return geometry


def structure_geometry(spec: PhantomSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """The exact (center, semi-axes) list gen_phantom uses for this spec."""
    return _geometry(spec, np.random.Generator(np.random.PCG64(spec.seed)))


def gen_phantom(spec: PhantomSpec) -> tuple[ScalarVolume, LabelVolume]:
    """Build one synthetic atlas image and its exact label map.

    Structures are disjoint ellipsoids (one per grid cell) with jittered
    centers and semi-axes; the image is the softened piecewise-constant
    intensity plus Gaussian noise. Labels mark exact ellipsoid interiors.
    """
    dims = spec.shape.dims
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    levels = spec.contrast or tuple(np.linspace(0.4, 1.0, spec.num_structures))

    coords = np.indices(dims, dtype=np.float64)
    labels = np.zeros(dims, dtype=np.uint16)
    image = np.full(dims, BACKGROUND_LEVEL, dtype=np.float64)
    for k, (center, semi) in enumerate(_geometry(spec, rng)):
        q = sum(((coords[a] - center[a]) / semi[a]) ** 2 for a in range(3))
        inside = q <= 1.0
        labels[inside] = k + 1
        image[inside] = levels[k]

    image = gaussian_filter(image, EDGE_SOFTEN_SIGMA, mode="nearest")
    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, dims)
    return ScalarVolume(image), LabelVolume(labels, spec.num_structures + 1)


def gen_smooth_field(shape: GridShape, spec: DeformSpec) -> DisplacementField:
    """Gaussian-smoothed white noise per component, rescaled to a peak norm.

    The maximum displacement norm equals spec.max_magnitude exactly (up to
    rounding); a zero magnitude gives the zero field.
    """
    dims = shape.dims
    if spec.max_magnitude == 0:
        return DisplacementField.zeros(shape)
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    field = rng.standard_normal(dims + (3,))
    for c in range(3):
        field[..., c] = gaussian_filter(field[..., c], spec.smoothness_sigma, mode="nearest")
    norms = np.sqrt(np.einsum("...c,...c->...", field, field))
    peak = norms.max()
    if peak == 0.0:
        return DisplacementField.zeros(shape)
    return DisplacementField(field * (spec.max_magnitude / peak))


def make_pair(image: ScalarVolume, labels: LabelVolume, field: DisplacementField,
              noise_sigma: float = 0.0, noise_seed: int = 0) -> tuple[ScalarVolume, LabelVolume]:
    """Deform an atlas into a registration target with known ground truth.

    The target is the warped image (optionally with fresh noise); ground-truth
    labels are the argmax-decoded warp of the one-hot labels, i.e. the same
    warp semantics the solver itself uses.
    """
    dims = image.shape.dims
    if labels.shape.dims != dims or field.shape.dims != dims:
        raise ShapeError(f"make_pair: grids {dims}, {labels.shape.dims}, {field.shape.dims} differ")
    target = warp_scalar(image, field).data
    if noise_sigma > 0:
        rng = np.random.Generator(np.random.PCG64(noise_seed))
        target = target + rng.normal(0.0, noise_sigma, dims)
    gt = argmax_decode(warp_channels(one_hot_encode(labels), field))
    return ScalarVolume(target), gt
