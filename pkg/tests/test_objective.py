"""Composite objective: assembly arithmetic, toggles, identity behavior, FD."""

import numpy as np
import pytest

from cyclereg import (CharbonnierParams, DisplacementField, LabelVolume,
                      LossWeights, NumericsError, ScalarVolume, ShapeError,
                      composite_objective, one_hot_encode, weighted_total)
from cyclereg.objective import TERM_NAMES, _composite_eval

from conftest import max_fd_rel_err, off_lattice_field


def build_instance(rng, n=6, k=2):
    dims = (n, n, n)
    l = ScalarVolume(rng.uniform(0, 1, dims))
    u = ScalarVolume(rng.uniform(0, 1, dims))
    ls = one_hot_encode(LabelVolume(rng.integers(0, k, dims, dtype=np.uint16), k))
    ff = DisplacementField(off_lattice_field(dims, rng))
    fb = DisplacementField(off_lattice_field(dims, rng))
    return l, u, ls, ff, fb


def test_weighted_assembly_with_unit_terms():
    unit = dict.fromkeys(TERM_NAMES, 1.0)
    assert weighted_total(unit, LossWeights()) == 26.0
    assert weighted_total(unit, LossWeights(cyc=False)) == 16.0
    assert weighted_total(unit, LossWeights(trans=False, anatomy_cyc=False,
                                            diff_cyc=False, cyc=False)) == 7.0


def test_identity_pair_near_stationary(rng):
    dims = (8, 8, 8)
    l = ScalarVolume(rng.uniform(0, 1, dims))
    ls = one_hot_encode(LabelVolume(rng.integers(0, 2, dims, dtype=np.uint16), 2))
    zero = DisplacementField(np.zeros(dims + (3,)))
    res = composite_objective(l, l, ls, zero, zero, window=3)
    assert res.cyc == 0.0
    assert res.smooth_f < 1e-5 * 8 ** 3
    assert res.anatomy_cyc < 1e-6
    n_vox = 8 ** 3
    assert np.sqrt(np.sum(res.grad_fF.data ** 2)) < 1e-3 * n_vox
    assert np.sqrt(np.sum(res.grad_fB.data ** 2)) < 1e-3 * n_vox


def test_breakdown_total_is_weighted_sum(rng):
    l, u, ls, ff, fb = build_instance(rng)
    w = LossWeights()
    res = composite_objective(l, u, ls, ff, fb, w, window=3)
    terms = {name: res.term(name) for name in TERM_NAMES}
    assert res.total == weighted_total(terms, w)


def test_toggles_remove_exact_contribution(rng):
    l, u, ls, ff, fb = build_instance(rng)
    full = composite_objective(l, u, ls, ff, fb, LossWeights(), window=3)
    for toggle in ("trans", "anatomy_cyc", "diff_cyc", "cyc"):
        w_off = LossWeights(**{toggle: False})
        off = composite_objective(l, u, ls, ff, fb, w_off, window=3)
        weight = w_off.lambda1 if toggle == "cyc" else w_off.lambda2
        expected = full.total - weight * full.term(toggle)
        assert abs(off.total - expected) < 1e-9 * max(1.0, abs(expected))
        assert off.term(toggle) == 0.0
        # the other enabled term values are untouched
        for name in TERM_NAMES:
            if name not in (toggle,):
                assert off.term(name) == full.term(name)


def test_toggled_gradients_match_fd(rng):
    l, u, ls, ff, fb = build_instance(rng, n=5)
    w = LossWeights(trans=False, diff_cyc=False)
    res = composite_objective(l, u, ls, ff, fb, w, window=3)

    def total_fn(a):
        return _composite_eval(l.data, u.data, ls.data, a, fb.data, w,
                               CharbonnierParams(), 3, need_grads=False)["total"]

    assert max_fd_rel_err(total_fn, ff.data, res.grad_fF.data, rng, coords=15) < 1e-4


def test_full_composite_gradients_match_fd(rng):
    l, u, ls, ff, fb = build_instance(rng)
    w = LossWeights()
    res = composite_objective(l, u, ls, ff, fb, w, window=3)

    def wrt_ff(a):
        return _composite_eval(l.data, u.data, ls.data, a, fb.data, w,
                               CharbonnierParams(), 3, need_grads=False)["total"]

    def wrt_fb(a):
        return _composite_eval(l.data, u.data, ls.data, ff.data, a, w,
                               CharbonnierParams(), 3, need_grads=False)["total"]

    assert max_fd_rel_err(wrt_ff, ff.data, res.grad_fF.data, rng, coords=30) < 1e-4
    assert max_fd_rel_err(wrt_fb, fb.data, res.grad_fB.data, rng, coords=30) < 1e-4


def test_numerics_error_names_offending_term(rng):
    l, u, ls, ff, fb = build_instance(rng, n=5)
    bad = l.data.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(NumericsError, match="sim"):
        _composite_eval(bad, u.data, ls.data, ff.data, fb.data,
                        LossWeights(), CharbonnierParams(), 3)


def test_composite_shape_checks(rng):
    l, u, ls, ff, fb = build_instance(rng, n=5)
    wrong = DisplacementField(np.zeros((6, 5, 5, 3)))
    with pytest.raises(ShapeError):
        composite_objective(l, u, ls, wrong, fb, window=3)


def test_composite_deterministic(rng):
    l, u, ls, ff, fb = build_instance(rng)
    a = composite_objective(l, u, ls, ff, fb, window=3)
    b = composite_objective(l, u, ls, ff, fb, window=3)
    assert a.total == b.total
    assert np.array_equal(a.grad_fF.data, b.grad_fF.data)
    assert np.array_equal(a.grad_fB.data, b.grad_fB.data)
