"""Differentiable trilinear warping of volumes by dense displacement fields.

Conventions
-----------
A displacement field stores one 3-vector per voxel, in voxel units, and is a
*pull* map: ``out(t) = src(t + field(t))``. Sample positions falling outside
the grid are clamped to the edge, so every sample is a convex combination of
real voxels. Interpolation is evaluated with nested lerps, which makes
constant inputs and exact lattice positions reproduce bit-exactly.

The adjoint (`warp_vjp`) returns the gradient with respect to both the source
volume (a scatter through the interpolation weights) and the field (the
piecewise-trilinear spatial derivative, zeroed where the position was
clamped). Scatters are accumulated with `np.bincount`, which sums in a fixed
order, so repeated runs are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from functools import lru_cache

import numpy as np

from .errors import ShapeError
from .volumes import GridShape, ProbVolume, ScalarVolume


@dataclass(frozen=True)
class DisplacementField:
    """Per-voxel displacement 3-vectors (dx, dy, dz) in voxel units, float64."""

    data: np.ndarray
    shape: GridShape = dc_field(init=False)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 4 or arr.shape[3] != 3:
            raise ShapeError(f"DisplacementField data must have shape (nx, ny, nz, 3), got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ShapeError("DisplacementField data must be finite")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "shape", GridShape.of(arr))

    @classmethod
    def zeros(cls, shape: GridShape) -> "DisplacementField":
        return cls(np.zeros(shape.dims + (3,), dtype=np.float64))


@dataclass(frozen=True)
class WarpVJP:
    """Gradients of a warp: wrt the source volume (array shaped like it) and the field."""

    grad_source: np.ndarray
    grad_field: DisplacementField


@lru_cache(maxsize=64)
def _base_grid(dims: tuple[int, int, int]) -> np.ndarray:
    """Voxel coordinates (x, y, z) per voxel, cached per grid shape. Read-only."""
    g = np.empty(dims + (3,), dtype=np.float64)
    g[..., 0] = np.arange(dims[0], dtype=np.float64)[:, None, None]
    g[..., 1] = np.arange(dims[1], dtype=np.float64)[None, :, None]
    g[..., 2] = np.arange(dims[2], dtype=np.float64)[None, None, :]
    g.setflags(write=False)
    return g


class TrilinearPlan:
    """Precomputed interpolation cells for a fixed set of sample positions.

    One plan can sample several sources on the same grid (the forward pass)
    and run their adjoints (the backward pass), reusing the index arithmetic.
    """

    __slots__ = ("src_dims", "out_dims", "_corners", "_fx", "_fy", "_fz", "_mask")

    def __init__(self, src_dims: tuple[int, int, int], positions: np.ndarray):
        nx, ny, nz = src_dims
        self.src_dims = (nx, ny, nz)
        self.out_dims = positions.shape[:-1]
        pos = positions.reshape(-1, 3)
        mask = np.empty_like(pos)
        i0s, i1s, fs = [], [], []
        for axis, n in enumerate((nx, ny, nz)):
            p = pos[:, axis]
            mask[:, axis] = (p >= 0.0) & (p <= n - 1.0)
            pc = np.clip(p, 0.0, float(n - 1))
            i0 = np.floor(pc).astype(np.intp)
            fs.append(pc - i0)
            i0s.append(i0)
            i1s.append(np.minimum(i0 + 1, n - 1))
        x0 = i0s[0] * (ny * nz)
        x1 = i1s[0] * (ny * nz)
        y0 = i0s[1] * nz
        y1 = i1s[1] * nz
        z0, z1 = i0s[2], i1s[2]
        self._corners = (
            x0 + y0 + z0, x1 + y0 + z0, x0 + y1 + z0, x1 + y1 + z0,
            x0 + y0 + z1, x1 + y0 + z1, x0 + y1 + z1, x1 + y1 + z1,
        )
        self._fx, self._fy, self._fz = fs
        self._mask = mask

    def _gather_corners(self, src: np.ndarray) -> tuple[np.ndarray, ...]:
        srcf = np.ascontiguousarray(src).reshape(-1, src.shape[3])
        return tuple(srcf[c] for c in self._corners)

    def gather(self, src: np.ndarray, return_corners: bool = False):
        """Sample a (nx, ny, nz, K) source at every plan position; returns (*out_dims, K).

        With `return_corners`, also returns the gathered corner values so a
        later `vjp` on the same source can skip re-gathering them.
        """
        s = self._gather_corners(src)
        out = self._interp(s).reshape(self.out_dims + (src.shape[3],))
        return (out, s) if return_corners else out

    def _interp(self, s) -> np.ndarray:
        s000, s100, s010, s110, s001, s101, s011, s111 = s
        fx = self._fx[:, None]
        fy = self._fy[:, None]
        fz = self._fz[:, None]
        c00 = s000 + fx * (s100 - s000)
        c10 = s010 + fx * (s110 - s010)
        c01 = s001 + fx * (s101 - s001)
        c11 = s011 + fx * (s111 - s011)
        c0 = c00 + fy * (c10 - c00)
        c1 = c01 + fy * (c11 - c01)
        return c0 + fz * (c1 - c0)

    def vjp(self, src: np.ndarray, upstream: np.ndarray, corners=None,
            src_grad_range: tuple[int, int] | None = None) -> tuple[np.ndarray | None, np.ndarray]:
        """Adjoint of `gather`: (grad_src, grad_pos of shape (*out_dims, 3)).

        `corners` may pass the tuple returned by `gather(..., return_corners=True)`.
        `src_grad_range=(a, b)` restricts the source-gradient scatter to channels
        [a, b) (the position gradient always covers all channels); (a, a) skips
        the scatter and returns None for grad_src.
        """
        k = src.shape[3]
        s = corners if corners is not None else self._gather_corners(src)
        s000, s100, s010, s110, s001, s101, s011, s111 = s
        up = upstream.reshape(-1, k)
        fx = self._fx[:, None]
        fy = self._fy[:, None]
        fz = self._fz[:, None]

        # spatial derivative of the sample, per channel, then contracted with upstream
        dx00 = s100 - s000
        dx10 = s110 - s010
        dx01 = s101 - s001
        dx11 = s111 - s011
        e0 = dx00 + fy * (dx10 - dx00)
        e1 = dx01 + fy * (dx11 - dx01)
        gx = e0 + fz * (e1 - e0)

        c00 = s000 + fx * dx00
        c10 = s010 + fx * dx10
        c01 = s001 + fx * dx01
        c11 = s011 + fx * dx11
        dy0 = c10 - c00
        dy1 = c11 - c01
        gy = dy0 + fz * (dy1 - dy0)

        c0 = c00 + fy * dy0
        c1 = c01 + fy * dy1
        gz = c1 - c0

        grad_pos = np.empty(self._mask.shape, dtype=np.float64)
        grad_pos[:, 0] = np.einsum("nk,nk->n", up, gx)
        grad_pos[:, 1] = np.einsum("nk,nk->n", up, gy)
        grad_pos[:, 2] = np.einsum("nk,nk->n", up, gz)
        grad_pos *= self._mask  # clamped positions have zero spatial derivative

        # scatter upstream through the 8 corner weights
        a, b = (0, k) if src_grad_range is None else src_grad_range
        grad_pos = grad_pos.reshape(self.out_dims + (3,))
        if a == b:
            return None, grad_pos
        wx0, wx1 = 1.0 - fx, fx
        wy0, wy1 = 1.0 - fy, fy
        wz0, wz1 = 1.0 - fz, fz
        weights = (
            wx0 * wy0 * wz0, wx1 * wy0 * wz0, wx0 * wy1 * wz0, wx1 * wy1 * wz0,
            wx0 * wy0 * wz1, wx1 * wy0 * wz1, wx0 * wy1 * wz1, wx1 * wy1 * wz1,
        )
        n_src = src.shape[0] * src.shape[1] * src.shape[2]
        up_sel = up[:, a:b]
        grad_src = np.zeros((b - a, n_src), dtype=np.float64)
        for corner, w in zip(self._corners, weights):
            uw = up_sel * w
            for c in range(b - a):
                grad_src[c] += np.bincount(corner, weights=uw[:, c], minlength=n_src)
        grad_src = np.moveaxis(grad_src.reshape((b - a,) + src.shape[:3]), 0, -1)
        return grad_src, grad_pos


def plan_for_field(field: DisplacementField) -> TrilinearPlan:
    """Plan sampling at t + field(t) on the field's own grid."""
    dims = field.shape.dims
    return TrilinearPlan(dims, _base_grid(dims) + field.data)


def sample_at_positions(src: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Trilinear clamp-to-edge sampling of `src` at absolute voxel positions."""
    squeeze = src.ndim == 3
    s = src[..., None] if squeeze else src
    out = TrilinearPlan(s.shape[:3], positions).gather(s)
    return out[..., 0] if squeeze else out


def _check_same_dims(a: GridShape, b: GridShape, what: str):
    if a.dims != b.dims:
        raise ShapeError(f"{what}: grid {a.dims} vs {b.dims}")


def warp_scalar(src: ScalarVolume, field: DisplacementField) -> ScalarVolume:
    """Resample a scalar volume through a displacement field: out(t) = src(t + field(t))."""
    _check_same_dims(src.shape, field.shape, "warp_scalar")
    out = plan_for_field(field).gather(src.data[..., None])[..., 0]
    return ScalarVolume(out)


def warp_channels(src: ProbVolume, field: DisplacementField) -> ProbVolume:
    """Warp every probability channel independently; channels are not renormalized."""
    _check_same_dims(src.shape, field.shape, "warp_channels")
    return ProbVolume(plan_for_field(field).gather(src.data))


def compose_residual(f_fwd: DisplacementField, f_bwd: DisplacementField) -> DisplacementField:
    """Round-trip displacement r(t) = f_fwd(t) + f_bwd(t + f_fwd(t)); zero for exact inverses."""
    _check_same_dims(f_fwd.shape, f_bwd.shape, "compose_residual")
    bwd_at = plan_for_field(f_fwd).gather(f_bwd.data)
    return DisplacementField(f_fwd.data + bwd_at)


def warp_vjp(src, field: DisplacementField, upstream: np.ndarray) -> WarpVJP:
    """Gradients of warp_scalar/warp_channels wrt source and field.

    `upstream` is dLoss/d(output) as a plain array shaped like the warp
    output's data (gradients are not probability maps, so no volume type).
    """
    if not isinstance(src, (ScalarVolume, ProbVolume)):
        raise ShapeError(f"warp_vjp src must be ScalarVolume or ProbVolume, got {type(src).__name__}")
    _check_same_dims(src.shape, field.shape, "warp_vjp")
    scalar = isinstance(src, ScalarVolume)
    src_arr = src.data[..., None] if scalar else src.data
    up = np.asarray(upstream, dtype=np.float64)
    if scalar and up.shape == src.data.shape:
        up = up[..., None]
    if up.shape != src_arr.shape:
        raise ShapeError(f"upstream shape {np.asarray(upstream).shape} does not match output")
    grad_src, grad_pos = plan_for_field(field).vjp(src_arr, up)
    if scalar:
        grad_src = grad_src[..., 0]
    return WarpVJP(grad_source=grad_src, grad_field=DisplacementField(grad_pos))
