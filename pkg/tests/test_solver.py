"""Adam updates and the coarse-to-fine pair solver."""

import numpy as np
import pytest

from cyclereg import (AdamState, DisplacementField, GridShape, LabelVolume,
                      LossWeights, PyramidTooCoarse, ScalarVolume, ShapeError,
                      SolveConfig, adam_step, optimize_pair)
from cyclereg.phantom import PhantomSpec, gen_phantom
from cyclereg.solver import _default_iters, _default_windows


def zero_field(dims):
    return DisplacementField(np.zeros(dims + (3,)))


def test_adam_zero_gradient_is_identity(rng):
    dims = (4, 4, 4)
    params = DisplacementField(rng.uniform(-1, 1, dims + (3,)))
    state = AdamState.fresh(params.data)
    new_params, new_state = adam_step(params, zero_field(dims), state)
    assert np.array_equal(new_params.data, params.data)
    assert (new_state.m == 0.0).all()
    assert (new_state.v == 0.0).all()
    assert new_state.step == 1


def test_adam_first_step_closed_form():
    dims = (3, 3, 3)
    g = 0.7
    params = zero_field(dims)
    grad = DisplacementField(np.full(dims + (3,), g))
    state = AdamState.fresh(params.data, lr=0.001)
    new_params, _ = adam_step(params, grad, state)
    expected = -0.001 * g / (g + 1e-8)
    assert np.abs(new_params.data - expected).max() < 1e-15


def test_adam_matches_scalar_reference_trace():
    # f(x) = x^2 from x = 1; hand-rolled reference
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    x_ref, m, v = 1.0, 0.0, 0.0
    ref_trace = []
    for t in range(1, 4):
        g = 2.0 * x_ref
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x_ref -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        ref_trace.append(x_ref)

    dims = (2, 2, 2)
    params = DisplacementField(np.ones(dims + (3,)))
    state = AdamState.fresh(params.data, lr=lr)
    for t in range(3):
        grad = DisplacementField(2.0 * params.data)
        params, state = adam_step(params, grad, state)
        assert np.abs(params.data - ref_trace[t]).max() < 1e-12


def test_adam_shape_checks(rng):
    params = zero_field((4, 4, 4))
    with pytest.raises(ShapeError):
        adam_step(params, zero_field((5, 4, 4)), AdamState.fresh(params.data))
    with pytest.raises(ShapeError):
        adam_step(params, zero_field((4, 4, 4)),
                  AdamState.fresh(np.zeros((5, 4, 4, 3))))


def test_default_schedules():
    assert _default_iters(3) == (300, 200, 100)
    assert _default_iters(1) == (100,)
    assert _default_iters(5) == (300, 300, 300, 200, 100)
    assert _default_windows(3) == (5, 5, 9)
    assert _default_windows(1) == (9,)


def test_solve_config_validation():
    with pytest.raises(Exception):
        SolveConfig(pyramid_levels=0)
    with pytest.raises(Exception):
        SolveConfig(iters_per_level=(10, 10))  # wrong length for 3 levels
    with pytest.raises(Exception):
        SolveConfig(ncc_window_per_level=(4, 5, 9))  # even window
    cfg = SolveConfig(pyramid_levels=2)
    assert cfg.iters_per_level == (200, 100)
    assert cfg.ncc_window_per_level == (5, 9)


def small_phantom(seed=3, n=24, structures=1):
    spec = PhantomSpec(shape=GridShape(n, n, n), num_structures=structures,
                       noise_sigma=0.01, seed=seed)
    return gen_phantom(spec)


FAST_CFG = dict(pyramid_levels=2, iters_per_level=(120, 60), lr=0.05,
                ncc_window_per_level=(5, 9))


def test_identity_pair_converges_to_zero_fields():
    img, lab = small_phantom()
    cfg = SolveConfig(**FAST_CFG)
    f_fwd, f_bwd, trace = optimize_pair(img, lab, img, cfg)
    mean_disp = np.mean(np.sqrt((f_fwd.data ** 2).sum(-1)))
    assert mean_disp < 0.1
    assert trace.rows[-1].cyc < 1e-3
    # stagnation cuts the identity solve well short of the caps
    assert len(trace.rows) < 120 + 60


def test_translation_phantom_recovers_shift():
    img, lab = small_phantom()
    dims = img.shape.dims
    shift = np.tile(np.array([2.0, 0.0, 0.0]), dims + (1,))
    from cyclereg.phantom import make_pair
    target, _ = make_pair(img, lab, DisplacementField(shift))
    cfg = SolveConfig(**FAST_CFG)
    f_fwd, f_bwd, trace = optimize_pair(img, lab, target, cfg)
    interior = f_fwd.data[4:-4, 4:-4, 4:-4]
    mean_vec = interior.reshape(-1, 3).mean(axis=0)
    assert np.abs(mean_vec - np.array([2.0, 0.0, 0.0])).max() < 0.25
    from cyclereg import compose_residual
    resid = compose_residual(f_fwd, f_bwd).data[4:-4, 4:-4, 4:-4]
    assert np.mean(np.sqrt((resid ** 2).sum(-1))) < 0.3


def test_baseline_configuration_decreases_objective():
    img, lab = small_phantom()
    dims = img.shape.dims
    shift = np.tile(np.array([2.0, 0.0, 0.0]), dims + (1,))
    from cyclereg.phantom import make_pair
    target, _ = make_pair(img, lab, DisplacementField(shift))
    weights = LossWeights(trans=False, anatomy_cyc=False, diff_cyc=False, cyc=False)
    cfg = SolveConfig(pyramid_levels=1, iters_per_level=(120,), lr=0.05,
                      ncc_window_per_level=(9,), weights=weights)
    _, _, trace = optimize_pair(img, lab, target, cfg)
    totals = [r.total for r in trace.rows]
    lag = 50
    for i in range(len(totals) - lag):
        assert totals[i + lag] < totals[i] + 1e-9 * abs(totals[i])


def test_prolongation_consistency():
    img, lab = small_phantom()
    dims = img.shape.dims
    shift = np.tile(np.array([1.5, 0.0, 0.0]), dims + (1,))
    from cyclereg.phantom import make_pair
    target, _ = make_pair(img, lab, DisplacementField(shift))
    cfg = SolveConfig(**FAST_CFG)
    _, _, trace = optimize_pair(img, lab, target, cfg)
    last_coarse = trace.level_rows(0)[-1]
    first_fine = trace.level_rows(1)[0]
    assert np.isfinite(first_fine.total)
    rescaled = last_coarse.total * 8.0
    ratio = first_fine.total / rescaled
    assert 0.1 < ratio < 10.0


def test_solver_determinism():
    img, lab = small_phantom(seed=5, n=16)
    cfg = SolveConfig(pyramid_levels=2, iters_per_level=(30, 15), lr=0.05,
                      ncc_window_per_level=(5, 5))
    a_f, a_b, tr_a = optimize_pair(img, lab, img, cfg)
    b_f, b_b, tr_b = optimize_pair(img, lab, img, cfg)
    assert np.array_equal(a_f.data, b_f.data)
    assert np.array_equal(a_b.data, b_b.data)
    assert [r.total for r in tr_a.rows] == [r.total for r in tr_b.rows]


def test_pyramid_too_coarse():
    img, lab = small_phantom(seed=5, n=16)
    with pytest.raises(PyramidTooCoarse):
        optimize_pair(img, lab, img, SolveConfig(pyramid_levels=4,
                                                 iters_per_level=(5, 5, 5, 5),
                                                 ncc_window_per_level=(5, 5, 5, 5)))


def test_optimize_pair_shape_and_class_checks():
    img, lab = small_phantom(seed=5, n=16)
    other = ScalarVolume(np.zeros((8, 16, 16)))
    with pytest.raises(ShapeError):
        optimize_pair(img, lab, other, SolveConfig(pyramid_levels=1, iters_per_level=(5,)))
    single = LabelVolume(np.zeros((16, 16, 16), dtype=np.uint16), 1)
    with pytest.raises(ShapeError):
        optimize_pair(img, single, img, SolveConfig(pyramid_levels=1, iters_per_level=(5,)))
