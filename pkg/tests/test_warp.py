"""Trilinear warping, field composition, and the warp adjoint."""

import numpy as np
import pytest

from cyclereg import (DisplacementField, LabelVolume, ProbVolume, ScalarVolume,
                      ShapeError, compose_residual, one_hot_encode, warp_channels,
                      warp_scalar, warp_vjp)

from conftest import fd_gradient, off_lattice_field, oracle_compose, oracle_trilinear


def constant_field(dims, vec):
    return DisplacementField(np.tile(np.asarray(vec, dtype=float), tuple(dims) + (1,)))


def ramp_volume(dims, axis=0):
    arr = np.zeros(dims)
    idx = [None, None, None]
    idx[axis] = slice(None)
    arr += np.arange(dims[axis], dtype=float)[tuple(idx)]
    return ScalarVolume(arr)


def test_zero_field_is_exact_identity(rng):
    src = ScalarVolume(rng.uniform(0, 1, (5, 6, 7)))
    out = warp_scalar(src, constant_field((5, 6, 7), (0, 0, 0)))
    assert np.array_equal(out.data, src.data)


def test_ramp_integer_shift_with_clamp():
    dims = (6, 5, 4)
    src = ramp_volume(dims)
    out = warp_scalar(src, constant_field(dims, (1, 0, 0)))
    expected = np.minimum(np.arange(6, dtype=float) + 1, 5.0)[:, None, None] * np.ones(dims)
    assert np.array_equal(out.data, expected)


def test_warp_scalar_matches_oracle(rng):
    for _ in range(5):
        src = rng.uniform(0, 1, (6, 6, 6))
        field = rng.uniform(-1.5, 1.5, (6, 6, 6, 3))
        got = warp_scalar(ScalarVolume(src), DisplacementField(field)).data
        want = oracle_trilinear(src, field)
        assert np.abs(got - want).max() < 1e-12


def test_warp_is_convex_combination(rng):
    src = rng.uniform(-3, 5, (6, 6, 6))
    field = rng.uniform(-2, 2, (6, 6, 6, 3))
    out = warp_scalar(ScalarVolume(src), DisplacementField(field)).data
    assert out.min() >= src.min() - 1e-12
    assert out.max() <= src.max() + 1e-12


def test_exact_lattice_sampling(rng):
    src = rng.uniform(0, 1, (6, 6, 6))
    field = np.zeros((6, 6, 6, 3))
    field[2, 3, 1] = [1.0, -2.0, 3.0]  # integer displacement, in range
    out = warp_scalar(ScalarVolume(src), DisplacementField(field)).data
    assert out[2, 3, 1] == src[3, 1, 4]


def test_warp_channels_identity_and_translation(rng):
    labels = LabelVolume(rng.integers(0, 3, (6, 6, 6), dtype=np.uint16), 3)
    probs = one_hot_encode(labels)
    out = warp_channels(probs, constant_field((6, 6, 6), (0, 0, 0)))
    assert np.array_equal(out.data, probs.data)
    shifted = warp_channels(probs, constant_field((6, 6, 6), (2, 0, 0))).data
    assert np.array_equal(shifted[:4], probs.data[2:])


def test_warp_channels_preserves_unit_sums(rng):
    labels = LabelVolume(rng.integers(0, 4, (6, 6, 6), dtype=np.uint16), 4)
    probs = one_hot_encode(labels)
    field = DisplacementField(rng.uniform(-1.5, 1.5, (6, 6, 6, 3)))
    sums = warp_channels(probs, field).data.sum(axis=3)
    assert np.abs(sums - 1.0).max() < 1e-12


def test_compose_residual_zero_cases(rng):
    fb = DisplacementField(rng.uniform(-1, 1, (5, 5, 5, 3)))
    zero = constant_field((5, 5, 5), (0, 0, 0))
    assert np.array_equal(compose_residual(zero, fb).data, fb.data)
    ff = DisplacementField(rng.uniform(-1, 1, (5, 5, 5, 3)))
    out = compose_residual(ff, zero)
    assert np.array_equal(out.data, ff.data)


def test_compose_residual_translation_inverse():
    ff = constant_field((6, 6, 6), (1.25, 0, 0))
    fb = constant_field((6, 6, 6), (-1.25, 0, 0))
    assert np.abs(compose_residual(ff, fb).data).max() == 0.0


def test_compose_residual_matches_oracle(rng):
    for _ in range(5):
        ff = rng.uniform(-1.5, 1.5, (6, 6, 6, 3))
        fb = rng.uniform(-1.5, 1.5, (6, 6, 6, 3))
        got = compose_residual(DisplacementField(ff), DisplacementField(fb)).data
        assert np.abs(got - oracle_compose(ff, fb)).max() < 1e-12


def test_vjp_zero_upstream(rng):
    src = ScalarVolume(rng.uniform(0, 1, (5, 5, 5)))
    field = DisplacementField(rng.uniform(-1, 1, (5, 5, 5, 3)))
    vjp = warp_vjp(src, field, np.zeros((5, 5, 5)))
    assert (vjp.grad_source == 0.0).all()
    assert (vjp.grad_field.data == 0.0).all()


def test_vjp_ramp_slope():
    dims = (6, 6, 6)
    src = ramp_volume(dims)
    vjp = warp_vjp(src, constant_field(dims, (0, 0, 0)), np.ones(dims))
    gx = vjp.grad_field.data[..., 0]
    assert np.allclose(gx[:-1], 1.0)   # slope of the ramp
    assert np.allclose(gx[-1], 0.0)    # clamped cell on the far face
    assert np.allclose(vjp.grad_field.data[..., 1:], 0.0)


def test_vjp_scatter_adjoint_identity(rng):
    """<upstream, warp(src)> == <grad_source, src> for linear warps."""
    src = rng.uniform(0, 1, (6, 6, 6))
    field = DisplacementField(rng.uniform(-1.5, 1.5, (6, 6, 6, 3)))
    upstream = rng.normal(size=(6, 6, 6))
    out = warp_scalar(ScalarVolume(src), field).data
    vjp = warp_vjp(ScalarVolume(src), field, upstream)
    lhs = float(np.sum(upstream * out))
    rhs = float(np.sum(vjp.grad_source * src))
    assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))


def test_vjp_matches_finite_differences(rng):
    dims = (6, 6, 6)
    src = rng.uniform(0, 1, dims)
    field = off_lattice_field(dims, rng)
    upstream = rng.normal(size=dims)

    def loss_wrt_field(f):
        return float(np.sum(upstream * oracle_trilinear(src, f)))

    vjp = warp_vjp(ScalarVolume(src), DisplacementField(field), upstream)
    flat = vjp.grad_field.data.reshape(-1)
    gmax = np.abs(flat).max()
    checked = 0
    for _ in range(400):
        if checked >= 20:
            break
        i = int(rng.integers(flat.size))
        if abs(flat[i]) < 1e-3 * gmax:
            continue
        fd = fd_gradient(loss_wrt_field, field, i)
        assert abs(flat[i] - fd) / max(abs(fd), abs(flat[i])) < 1e-5
        checked += 1
    assert checked == 20

    def loss_wrt_src(s):
        return float(np.sum(upstream * oracle_trilinear(s, field)))

    flat_src = vjp.grad_source.reshape(-1)
    smax = np.abs(flat_src).max()
    checked = 0
    for _ in range(400):
        if checked >= 20:
            break
        i = int(rng.integers(flat_src.size))
        if abs(flat_src[i]) < 1e-3 * smax:
            continue
        fd = fd_gradient(loss_wrt_src, src, i)
        assert abs(flat_src[i] - fd) / max(abs(fd), abs(flat_src[i])) < 1e-5
        checked += 1
    assert checked == 20


def test_vjp_channels(rng):
    labels = LabelVolume(rng.integers(0, 3, (5, 5, 5), dtype=np.uint16), 3)
    probs = one_hot_encode(labels)
    field = DisplacementField(rng.uniform(-1, 1, (5, 5, 5, 3)))
    upstream = rng.normal(size=(5, 5, 5, 3))
    vjp = warp_vjp(probs, field, upstream)
    assert vjp.grad_source.shape == probs.data.shape
    out = warp_channels(probs, field).data
    lhs = float(np.sum(upstream * out))
    rhs = float(np.sum(vjp.grad_source * probs.data))
    assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))


def test_shape_mismatch_errors(rng):
    src = ScalarVolume(np.zeros((4, 4, 4)))
    field = DisplacementField(np.zeros((5, 4, 4, 3)))
    with pytest.raises(ShapeError):
        warp_scalar(src, field)
    with pytest.raises(ShapeError):
        compose_residual(field, DisplacementField(np.zeros((4, 4, 4, 3))))
    with pytest.raises(ShapeError):
        warp_vjp(src, DisplacementField(np.zeros((4, 4, 4, 3))), np.zeros((5, 5, 5)))


def test_warp_determinism(rng):
    src = ProbVolume(rng.uniform(0, 1, (6, 6, 6, 4)).clip(0, 1))
    field = DisplacementField(rng.uniform(-1.5, 1.5, (6, 6, 6, 3)))
    a = warp_channels(src, field).data
    b = warp_channels(src, field).data
    assert np.array_equal(a, b)
