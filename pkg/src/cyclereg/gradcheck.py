"""Central finite-difference verification of every analytic gradient.

Each check evaluates a loss twice per sampled coordinate (x ± h) and compares
the central difference against the analytic partial derivative. Sample
coordinates are drawn away from non-smooth loci: fields are nudged off
lattice points, absolute-value arguments must clear a margin, and
coordinates with negligible analytic gradient (clamped or irrelevant) are
skipped. Instances are built from seeded generators, so a given (size, seed)
yields a reproducible suite.
"""

from __future__ import annotations

import numpy as np

from .objective import (CharbonnierParams, LossWeights, _composite_eval,
                        _diff_consistency_arrays, _ncc_arrays, _smoothness_arrays,
                        _soft_dice_arrays)
from .warp import _base_grid

DEFAULT_STEP = 1e-5
GRAD_TOL = 1e-4
_MAGNITUDE_CUT = 1e-3   # skip coordinates whose analytic partial is this small vs the max
_KINK_MARGIN = 50       # in units of the FD step, for absolute-value arguments

CHECK_NAMES = (
    "ncc", "smoothness_fwd", "smoothness_bwd", "image_cycle",
    "trans_fwd", "trans_bwd", "anatomy_cycle", "diff_cyc_synth", "diff_cyc_recon",
    "composite_fwd", "composite_bwd",
)


def _off_lattice_field(dims, rng, amplitude=1.2):
    """Random field whose sample positions keep a safe distance from lattice planes."""
    f = rng.uniform(-amplitude, amplitude, dims + (3,))
    pos = _base_grid(dims) + f
    frac = pos - np.floor(pos)
    return f + np.where(frac < 0.06, 0.07, np.where(frac > 0.94, -0.07, 0.0))


def _soft_maps(dims, k, rng, temperature=1.5):
    """Random per-voxel probabilities strictly inside (0, 1)."""
    logits = rng.normal(0.0, temperature, dims + (k,))
    e = np.exp(logits - logits.max(axis=3, keepdims=True))
    return e / e.sum(axis=3, keepdims=True)


def _max_rel_err(value_fn, arr, grad, rng, coords, step, select=None) -> float:
    """Max relative error of `grad` vs central differences of `value_fn` at `arr`."""
    flat_grad = grad.reshape(-1)
    gmax = np.max(np.abs(flat_grad))
    if gmax == 0:
        raise RuntimeError("degenerate check: analytic gradient is identically zero")
    worst = 0.0
    found = 0
    for _ in range(coords * 1000):
        if found >= coords:
            break
        i = int(rng.integers(flat_grad.size))
        if abs(flat_grad[i]) < _MAGNITUDE_CUT * gmax:
            continue
        if select is not None and not select(i):
            continue
        a = arr.copy()
        a.reshape(-1)[i] += step
        fp = value_fn(a)
        a = arr.copy()
        a.reshape(-1)[i] -= step
        fm = value_fn(a)
        fd = (fp - fm) / (2.0 * step)
        worst = max(worst, abs(flat_grad[i] - fd) / max(abs(fd), abs(flat_grad[i])))
        found += 1
    if found < coords:
        raise RuntimeError(f"could not find {coords} admissible coordinates")
    return worst


def run_grad_suite(size: int = 6, seed: int = 0, coords: int = 30,
                   step: float = DEFAULT_STEP) -> dict[str, float]:
    """Run every gradient check on one random instance; max relative error per check."""
    dims = (size,) * 3
    rng = np.random.Generator(np.random.PCG64(seed))
    crng = np.random.Generator(np.random.PCG64(seed + 1))  # coordinate sampling

    l = rng.uniform(0.0, 1.0, dims)
    u = rng.uniform(0.0, 1.0, dims)
    k = 3
    ls = _soft_maps(dims, k, rng)
    usbar = _soft_maps(dims, k, rng)
    lsbar = _soft_maps(dims, k, rng)
    f_fwd = _off_lattice_field(dims, rng)
    f_bwd = _off_lattice_field(dims, rng)
    lbar = rng.uniform(0.0, 1.0, dims)
    cp = CharbonnierParams()
    weights = LossWeights()
    window = 3

    results: dict[str, float] = {}

    grad = _ncc_arrays(u, l, window)[1]
    results["ncc"] = _max_rel_err(lambda a: _ncc_arrays(u, a, window)[0],
                                  l, grad, crng, coords, step)

    for name, f in (("smoothness_fwd", f_fwd), ("smoothness_bwd", f_bwd)):
        grad = _smoothness_arrays(f)[1]
        results[name] = _max_rel_err(lambda a: _smoothness_arrays(a)[0],
                                     f, grad, crng, coords, step)

    diff = lbar - l
    grad = np.sign(diff) / diff.size
    margin = _KINK_MARGIN * step

    def l1_select(i):
        return abs(diff.reshape(-1)[i]) > margin

    results["image_cycle"] = _max_rel_err(lambda a: float(np.mean(np.abs(a - l))),
                                          lbar, grad, crng, coords, step, select=l1_select)

    def trans_value(ff, fb):
        res = _composite_eval(l, u, None, ff, fb,
                              LossWeights(lambda1=0, lambda2=1, anatomy_cyc=False,
                                          diff_cyc=False, cyc=False),
                              cp, window, need_grads=False)
        return res["trans"]

    from .objective import _rho_prime
    from .warp import TrilinearPlan
    plan = TrilinearPlan(dims, _base_grid(dims) + f_fwd)
    resid = f_fwd + plan.gather(f_bwd)
    up = _rho_prime(resid, cp)
    g_src, g_pos = plan.vjp(f_bwd, up)
    results["trans_fwd"] = _max_rel_err(lambda a: trans_value(a, f_bwd),
                                        f_fwd, up + g_pos, crng, coords, step)
    results["trans_bwd"] = _max_rel_err(lambda a: trans_value(f_fwd, a),
                                        f_bwd, g_src, crng, coords, step)

    grad = _soft_dice_arrays(ls, lsbar)[1]
    results["anatomy_cycle"] = _max_rel_err(lambda a: _soft_dice_arrays(ls, a)[0],
                                            lsbar, grad, crng, coords, step)

    d1 = (ls - usbar).reshape(-1)
    d2 = (usbar - lsbar).reshape(-1)

    def diff_select(i):
        return abs(d1[i]) > margin and abs(d2[i]) > margin

    _, g_us, g_ls = _diff_consistency_arrays(ls, usbar, lsbar, cp)
    results["diff_cyc_synth"] = _max_rel_err(
        lambda a: _diff_consistency_arrays(ls, a, lsbar, cp)[0],
        usbar, g_us, crng, coords, step, select=diff_select)
    results["diff_cyc_recon"] = _max_rel_err(
        lambda a: _diff_consistency_arrays(ls, usbar, a, cp)[0],
        lsbar, g_ls, crng, coords, step, select=diff_select)

    res = _composite_eval(l, u, ls, f_fwd, f_bwd, weights, cp, window)

    def composite_total(ff, fb):
        return _composite_eval(l, u, ls, ff, fb, weights, cp, window,
                               need_grads=False)["total"]

    results["composite_fwd"] = _max_rel_err(lambda a: composite_total(a, f_bwd),
                                            f_fwd, res["grad_fF"], crng, coords, step)
    results["composite_bwd"] = _max_rel_err(lambda a: composite_total(f_fwd, a),
                                            f_bwd, res["grad_fB"], crng, coords, step)
    return results


def suite_passes(results: dict[str, float], tol: float = GRAD_TOL) -> bool:
    return all(v <= tol for v in results.values())
