"""Loss terms for cycle-consistent pair registration, with analytic gradients.

Terms
-----
sim          negative local normalized cross-correlation of target vs warped atlas
smooth_f/b   first-order smoothness of each displacement field
cyc          L1 consistency of the reconstructed atlas with the original
trans        robust penalty on the forward/backward composed residual
anatomy_cyc  soft Dice dissimilarity of the round-tripped label map
diff_cyc     robust penalty on the mismatch of label differences along the cycle

The composite weights them as
``sim + lambda1*cyc + lambda2*(anatomy_cyc + smooth_f + smooth_b + trans + diff_cyc)``
with the optional terms (trans, anatomy_cyc, diff_cyc, cyc) controlled by toggles.
All sums reduce in a fixed order so repeated evaluations are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericsError, ShapeError
from .volumes import ProbVolume, ScalarVolume
from .warp import DisplacementField, TrilinearPlan, _base_grid

NCC_STABILIZER = 1e-5     # added to the NCC denominator on flat windows
SMOOTH_FLOOR = 1e-12      # added under the sqrt so the norm is differentiable at 0
DICE_STABILIZER = 1e-7    # added to the soft-Dice denominator for empty classes

TERM_NAMES = ("sim", "smooth_f", "smooth_b", "cyc", "trans", "anatomy_cyc", "diff_cyc")


@dataclass(frozen=True)
class LossWeights:
    """Term weights and ablation toggles of the composite objective.

    `lambda1` scales the image cycle loss; `lambda2` is shared by the
    anatomy-cycle, smoothness, transformation-consistency, and
    anatomy-difference losses. The similarity and smoothness terms are always
    active; the four toggles switch the optional cycle terms.
    """

    lambda1: float = 10.0
    lambda2: float = 3.0
    trans: bool = True
    anatomy_cyc: bool = True
    diff_cyc: bool = True
    cyc: bool = True

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclass(frozen=True)
class CharbonnierParams:
    """Parameters of the robust penalty rho(x) = (x^2 + epsilon^2)^gamma."""

    epsilon: float = 0.001
    gamma: float = 0.45

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if not 0 < self.gamma < 1:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")


def _rho(x: np.ndarray, cp: CharbonnierParams) -> np.ndarray:
    return (x * x + cp.epsilon * cp.epsilon) ** cp.gamma


def _rho_prime(x: np.ndarray, cp: CharbonnierParams) -> np.ndarray:
    return 2.0 * cp.gamma * x * (x * x + cp.epsilon * cp.epsilon) ** (cp.gamma - 1.0)


def charbonnier(x: float, params: CharbonnierParams = CharbonnierParams()) -> float:
    """Robust penalty (x^2 + epsilon^2)^gamma; even, smooth, sub-quadratic."""
    return float(_rho(np.float64(x), params))


# ---------------------------------------------------------------------------
# windowed sums (clipped at the volume boundary, no padding)
# ---------------------------------------------------------------------------

def _box_sum_axis(a: np.ndarray, r: int, axis: int) -> np.ndarray:
    n = a.shape[axis]
    zshape = list(a.shape)
    zshape[axis] = 1
    c = np.concatenate([np.zeros(zshape, dtype=np.float64), np.cumsum(a, axis=axis)], axis=axis)
    hi = np.minimum(np.arange(n) + r + 1, n)
    lo = np.maximum(np.arange(n) - r, 0)
    return np.take(c, hi, axis=axis) - np.take(c, lo, axis=axis)


def _box_sum(a: np.ndarray, r: int) -> np.ndarray:
    """Sum of `a` over the (2r+1)^3 cube around each voxel, clipped to the grid."""
    out = a
    for axis in range(3):
        out = _box_sum_axis(out, r, axis)
    return out


def _ncc_arrays(u: np.ndarray, w: np.ndarray, window: int) -> tuple[float, np.ndarray]:
    """value = -sum_t cc(t) with cc the squared windowed correlation; grad wrt w."""
    r = window // 2
    cnt = _box_sum(np.ones_like(u), r)
    su = _box_sum(u, r)
    sw = _box_sum(w, r)
    mu = su / cnt
    mw = sw / cnt
    cross = _box_sum(u * w, r) - su * mw
    var_u = _box_sum(u * u, r) - su * mu
    var_w = _box_sum(w * w, r) - sw * mw
    denom = var_u * var_w + NCC_STABILIZER
    cc = cross * cross / denom
    value = -float(np.sum(cc))
    # d cc(t)/d w(s) = a(t)(u(s)-mu(t)) + b(t)(w(s)-mw(t)) for every window t containing s
    a = 2.0 * cross / denom
    b = -2.0 * cc * var_u / denom
    grad = -(u * _box_sum(a, r) - _box_sum(a * mu, r) + w * _box_sum(b, r) - _box_sum(b * mw, r))
    return value, grad


def ncc_loss(u: ScalarVolume, ubar: ScalarVolume, window: int = 9) -> tuple[float, np.ndarray]:
    """Similarity loss between the target and the warped atlas.

    Windows are (window)^3 cubes clipped at the volume boundary; the squared
    correlation per window is stabilized by adding NCC_STABILIZER to the
    variance product. Returns (value, gradient wrt ubar).
    """
    if u.shape.dims != ubar.shape.dims:
        raise ShapeError(f"ncc_loss: grid {u.shape.dims} vs {ubar.shape.dims}")
    if window % 2 == 0 or window < 1:
        raise ConfigError(f"ncc window must be a positive odd integer, got {window}")
    return _ncc_arrays(u.data, ubar.data, window)


def _smoothness_arrays(f: np.ndarray) -> tuple[float, np.ndarray]:
    value = 0.0
    grad = np.zeros_like(f)
    for axis in range(3):
        d = np.diff(f, axis=axis)
        s = np.sqrt(np.einsum("...c,...c->...", d, d) + SMOOTH_FLOOR)
        value += float(np.sum(s)) / 3.0
        g = d / (3.0 * s[..., None])
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        grad[tuple(hi)] += g
        grad[tuple(lo)] -= g
    return value, grad


def smoothness_loss(f: DisplacementField) -> tuple[float, np.ndarray]:
    """First-order smoothness: directionally averaged norms of forward differences.

    Each voxel contributes (1/3) * sum over x,y,z of the Euclidean norm of the
    forward-difference 3-vector in that direction; voxels on the far face of a
    direction contribute 0 for it. Norms carry a SMOOTH_FLOOR under the sqrt.
    Returns (value, gradient wrt f).
    """
    return _smoothness_arrays(f.data)


def _compose_arrays(fF: np.ndarray, fB: np.ndarray, plan: TrilinearPlan) -> np.ndarray:
    return fF + plan.gather(fB)


def transformation_consistency_loss(
    f_fwd: DisplacementField, f_bwd: DisplacementField, params: CharbonnierParams = CharbonnierParams()
) -> tuple[float, np.ndarray, np.ndarray]:
    """Robust penalty on the per-voxel composed residual, summed componentwise.

    Returns (value, grad wrt f_fwd, grad wrt f_bwd); the forward gradient
    includes both the additive residual term and the dependence through the
    sampling position of the backward field.
    """
    if f_fwd.shape.dims != f_bwd.shape.dims:
        raise ShapeError(f"transformation_consistency_loss: grid {f_fwd.shape.dims} vs {f_bwd.shape.dims}")
    plan = TrilinearPlan(f_fwd.shape.dims, _base_grid(f_fwd.shape.dims) + f_fwd.data)
    resid = _compose_arrays(f_fwd.data, f_bwd.data, plan)
    value = float(np.sum(_rho(resid, params)))
    up = _rho_prime(resid, params)
    grad_src, grad_pos = plan.vjp(f_bwd.data, up)
    return value, up + grad_pos, grad_src


def image_cycle_loss(l: ScalarVolume, lbar: ScalarVolume) -> tuple[float, np.ndarray]:
    """Mean absolute error between the atlas and its reconstruction; grad wrt lbar."""
    if l.shape.dims != lbar.shape.dims:
        raise ShapeError(f"image_cycle_loss: grid {l.shape.dims} vs {lbar.shape.dims}")
    diff = lbar.data - l.data
    value = float(np.mean(np.abs(diff)))
    return value, np.sign(diff) / diff.size


def _soft_dice_arrays(ls: np.ndarray, lsbar: np.ndarray) -> tuple[float, np.ndarray]:
    k = ls.shape[3]
    grad = np.zeros_like(lsbar)
    if k < 2:
        return 0.0, grad
    a = ls[..., 1:]
    b = lsbar[..., 1:]
    inter = np.einsum("xyzk,xyzk->k", a, b)
    den = np.einsum("xyzk,xyzk->k", a, a) + np.einsum("xyzk,xyzk->k", b, b) + DICE_STABILIZER
    value = float(np.mean(1.0 - 2.0 * inter / den))
    grad[..., 1:] = (-2.0 * a / den + 4.0 * inter / (den * den) * b) / (k - 1)
    return value, grad


def anatomy_cycle_dice_loss(ls: ProbVolume, lsbar: ProbVolume) -> tuple[float, np.ndarray]:
    """Soft Dice dissimilarity of the round-tripped label map, background excluded.

    Per foreground class: 1 - 2*sum(ls*lsbar) / (sum(ls^2) + sum(lsbar^2) + eps),
    averaged over classes. Returns (value, gradient wrt lsbar).
    """
    if ls.shape.dims != lsbar.shape.dims or ls.num_classes != lsbar.num_classes:
        raise ShapeError("anatomy_cycle_dice_loss: shape or class-count mismatch")
    return _soft_dice_arrays(ls.data, lsbar.data)


def _diff_consistency_arrays(
    ls: np.ndarray, usbar: np.ndarray, lsbar: np.ndarray, cp: CharbonnierParams
) -> tuple[float, np.ndarray, np.ndarray]:
    d1 = ls - usbar
    d2 = usbar - lsbar
    arg = np.abs(d1) - np.abs(d2)
    value = float(np.sum(_rho(arg, cp)))
    up = _rho_prime(arg, cp)
    s2 = np.sign(d2)
    return value, up * (-np.sign(d1) - s2), up * s2


def anatomy_diff_consistency_loss(
    ls: ProbVolume, usbar: ProbVolume, lsbar: ProbVolume, params: CharbonnierParams = CharbonnierParams()
) -> tuple[float, np.ndarray, np.ndarray]:
    """Robust penalty on | |ls - usbar| - |usbar - lsbar| | per voxel and channel.

    Enforces that the label difference accumulated on the forward leg matches
    the one on the backward leg. Returns (value, grad wrt usbar, grad wrt lsbar).
    """
    if not (ls.shape.dims == usbar.shape.dims == lsbar.shape.dims):
        raise ShapeError("anatomy_diff_consistency_loss: grid mismatch")
    if not (ls.num_classes == usbar.num_classes == lsbar.num_classes):
        raise ShapeError("anatomy_diff_consistency_loss: class-count mismatch")
    return _diff_consistency_arrays(ls.data, usbar.data, lsbar.data, params)


# ---------------------------------------------------------------------------
# composite objective
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ObjectiveBreakdown:
    """Values of every term, the weighted total, and gradients wrt both fields."""

    sim: float
    smooth_f: float
    smooth_b: float
    cyc: float
    trans: float
    anatomy_cyc: float
    diff_cyc: float
    total: float
    grad_fF: DisplacementField
    grad_fB: DisplacementField

    def term(self, name: str) -> float:
        if name not in TERM_NAMES:
            raise KeyError(name)
        return getattr(self, name)


def _check_term(name: str, value: float):
    if not np.isfinite(value):
        raise NumericsError(f"non-finite value in term '{name}'")


def weighted_total(terms: dict[str, float], weights: LossWeights) -> float:
    """Assemble the composite total from per-term values, honoring the toggles."""
    total = terms["sim"]
    if weights.cyc:
        total += weights.lambda1 * terms["cyc"]
    group = terms["smooth_f"] + terms["smooth_b"]
    if weights.anatomy_cyc:
        group += terms["anatomy_cyc"]
    if weights.trans:
        group += terms["trans"]
    if weights.diff_cyc:
        group += terms["diff_cyc"]
    return total + weights.lambda2 * group


def _composite_eval(
    l: np.ndarray,
    u: np.ndarray,
    ls: np.ndarray | None,
    fF: np.ndarray,
    fB: np.ndarray,
    weights: LossWeights,
    cp: CharbonnierParams,
    window: int,
    need_grads: bool = True,
    compute_all: bool = False,
) -> dict:
    """Array-level evaluation of the composite objective.

    The forward pass warps the atlas image (and, when label terms are active,
    its soft label map and the backward field) through a single interpolation
    plan per direction, then chains every term's gradient back through the
    warp adjoints. `compute_all` forces evaluation of disabled terms (their
    values are reported but excluded from total and gradients), which is what
    diagnostic reports use.
    """
    dims = l.shape
    lam1, lam2 = weights.lambda1, weights.lambda2
    use_label = (weights.anatomy_cyc or weights.diff_cyc or compute_all) and ls is not None
    use_cyc = weights.cyc or compute_all
    use_trans = weights.trans or compute_all
    use_back = use_cyc or use_label
    k = ls.shape[3] if use_label else 0

    plan_f = TrilinearPlan(dims, _base_grid(dims) + fF)

    # forward-warped channels: [atlas image | soft labels | backward field]
    parts = [l[..., None]]
    if use_label:
        parts.append(ls)
    if use_trans:
        parts.append(fB)
    src_f = parts[0] if len(parts) == 1 else np.concatenate(parts, axis=3)
    out_f, corners_f = plan_f.gather(src_f, return_corners=True)
    ubar = out_f[..., 0]
    usbar = out_f[..., 1:1 + k] if use_label else None
    fb_at = out_f[..., 1 + k:1 + k + 3] if use_trans else None

    terms = dict.fromkeys(TERM_NAMES, 0.0)
    terms["sim"], g_ubar = _ncc_arrays(u, ubar, window)
    terms["smooth_f"], g_ff_smooth = _smoothness_arrays(fF)
    terms["smooth_b"], g_fb_smooth = _smoothness_arrays(fB)

    up_resid = None
    if use_trans:
        resid = fF + fb_at
        terms["trans"] = float(np.sum(_rho(resid, cp)))
        if need_grads and weights.trans:
            up_resid = lam2 * _rho_prime(resid, cp)

    lbar = lsbar = None
    g_lbar = g_lsbar = g_usbar_diff = None
    plan_b = None
    src_b = None
    if use_back:
        plan_b = TrilinearPlan(dims, _base_grid(dims) + fB)
        back_parts = [ubar[..., None]]
        if use_label:
            back_parts.append(usbar)
        src_b = back_parts[0] if len(back_parts) == 1 else np.concatenate(back_parts, axis=3)
        out_b, corners_b = plan_b.gather(src_b, return_corners=True)
        lbar = out_b[..., 0]
        lsbar = out_b[..., 1:1 + k] if use_label else None
        if use_cyc:
            diff = lbar - l
            terms["cyc"] = float(np.mean(np.abs(diff)))
            if need_grads and weights.cyc:
                g_lbar = lam1 * np.sign(diff) / diff.size
        if use_label and (weights.anatomy_cyc or compute_all):
            terms["anatomy_cyc"], g_an = _soft_dice_arrays(ls, lsbar)
            if need_grads and weights.anatomy_cyc:
                g_lsbar = lam2 * g_an
        if use_label and (weights.diff_cyc or compute_all):
            terms["diff_cyc"], g_us, g_ls = _diff_consistency_arrays(ls, usbar, lsbar, cp)
            if need_grads and weights.diff_cyc:
                g_usbar_diff = lam2 * g_us
                if g_lsbar is None:
                    g_lsbar = lam2 * g_ls
                else:
                    g_lsbar = g_lsbar + lam2 * g_ls

    for name in TERM_NAMES:
        _check_term(name, terms[name])
    total = weighted_total(terms, weights)
    _check_term("total", total)

    result = {**terms, "total": total, "ubar": ubar, "lbar": lbar, "usbar": usbar,
              "lsbar": lsbar, "grad_fF": None, "grad_fB": None}
    if not need_grads:
        return result

    grad_ff = lam2 * g_ff_smooth
    grad_fb = lam2 * g_fb_smooth

    # backward through the reconstruction warp (atlas + labels by fB)
    g_ubar_total = g_ubar
    g_usbar_total = g_usbar_diff
    if use_back and (g_lbar is not None or g_lsbar is not None):
        nb = src_b.shape[3]
        up_b = np.zeros(dims + (nb,), dtype=np.float64)
        if g_lbar is not None:
            up_b[..., 0] = g_lbar
        if g_lsbar is not None:
            up_b[..., 1:1 + k] = g_lsbar
        g_src_b, g_pos_b = plan_b.vjp(src_b, up_b, corners=corners_b)
        grad_fb = grad_fb + g_pos_b
        g_ubar_total = g_ubar_total + g_src_b[..., 0]
        if use_label:
            back = g_src_b[..., 1:1 + k]
            g_usbar_total = back if g_usbar_total is None else g_usbar_total + back

    # backward through the forward warp (atlas, labels, and sampled fB by fF)
    nf = src_f.shape[3]
    up_f = np.zeros(dims + (nf,), dtype=np.float64)
    up_f[..., 0] = g_ubar_total
    if use_label and g_usbar_total is not None:
        up_f[..., 1:1 + k] = g_usbar_total
    if up_resid is not None:
        up_f[..., 1 + k:1 + k + 3] = up_resid
        grad_ff = grad_ff + up_resid  # additive part of the residual
    # source gradients are only needed for the sampled backward field; the
    # atlas image and labels are fixed inputs
    fb_range = (1 + k, 1 + k + 3) if up_resid is not None else (0, 0)
    g_src_f, g_pos_f = plan_f.vjp(src_f, up_f, corners=corners_f, src_grad_range=fb_range)
    grad_ff = grad_ff + g_pos_f
    if up_resid is not None:
        grad_fb = grad_fb + g_src_f

    if not (np.isfinite(grad_ff).all() and np.isfinite(grad_fb).all()):
        raise NumericsError("non-finite value in term 'gradient'")
    result["grad_fF"] = grad_ff
    result["grad_fB"] = grad_fb
    return result


def composite_objective(
    l: ScalarVolume,
    u: ScalarVolume,
    ls: ProbVolume,
    f_fwd: DisplacementField,
    f_bwd: DisplacementField,
    weights: LossWeights = LossWeights(),
    charbonnier_params: CharbonnierParams = CharbonnierParams(),
    window: int = 9,
) -> ObjectiveBreakdown:
    """Evaluate every enabled term and the full gradients wrt both fields.

    The forward pass materializes the synthetic target, the reconstructed
    atlas, and both warped label maps; gradients chain through every warp,
    including the dependence of the reconstructions on the forward field.
    Disabled terms report 0.0 and contribute nothing to total or gradients.
    """
    dims = l.shape.dims
    for name, other in (("u", u.shape.dims), ("ls", ls.shape.dims),
                        ("f_fwd", f_fwd.shape.dims), ("f_bwd", f_bwd.shape.dims)):
        if other != dims:
            raise ShapeError(f"composite_objective: {name} grid {other} vs {dims}")
    if window % 2 == 0 or window < 1:
        raise ConfigError(f"ncc window must be a positive odd integer, got {window}")
    res = _composite_eval(l.data, u.data, ls.data, f_fwd.data, f_bwd.data,
                          weights, charbonnier_params, window)
    return ObjectiveBreakdown(
        sim=res["sim"], smooth_f=res["smooth_f"], smooth_b=res["smooth_b"],
        cyc=res["cyc"], trans=res["trans"], anatomy_cyc=res["anatomy_cyc"],
        diff_cyc=res["diff_cyc"], total=res["total"],
        grad_fF=DisplacementField(res["grad_fF"]), grad_fB=DisplacementField(res["grad_fB"]),
    )
