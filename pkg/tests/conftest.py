"""Shared test helpers: independent brute-force oracles and instance builders.

The oracles here deliberately re-derive every quantity from its definition
(per-voxel Python loops, explicit 8-corner weights, explicit window scans)
so they share no code path with the implementations they check.
"""

import math

import numpy as np
import pytest


def oracle_trilinear(src: np.ndarray, field: np.ndarray) -> np.ndarray:
    """Per-voxel 8-corner trilinear sampling with clamp-to-edge, looped."""
    nx, ny, nz = src.shape[:3]
    channels = src.shape[3] if src.ndim == 4 else 1
    s = src if src.ndim == 4 else src[..., None]
    out = np.zeros((nx, ny, nz, channels))
    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                p = np.array([x, y, z], dtype=float) + field[x, y, z]
                p = np.minimum(np.maximum(p, 0.0), np.array([nx - 1, ny - 1, nz - 1], dtype=float))
                i0 = np.floor(p).astype(int)
                i0 = np.minimum(i0, np.array([nx - 2, ny - 2, nz - 2]))
                i0 = np.maximum(i0, 0)
                f = p - i0
                acc = np.zeros(channels)
                for dx in (0, 1):
                    for dy in (0, 1):
                        for dz in (0, 1):
                            w = ((f[0] if dx else 1 - f[0]) *
                                 (f[1] if dy else 1 - f[1]) *
                                 (f[2] if dz else 1 - f[2]))
                            acc += w * s[i0[0] + dx, i0[1] + dy, i0[2] + dz]
                out[x, y, z] = acc
    return out if src.ndim == 4 else out[..., 0]


def oracle_compose(f_fwd: np.ndarray, f_bwd: np.ndarray) -> np.ndarray:
    """Componentwise interpolation of the backward field at the forward targets."""
    return f_fwd + oracle_trilinear(f_bwd, f_fwd)


def oracle_ncc(u: np.ndarray, w: np.ndarray, window: int, eta: float = 1e-5) -> float:
    """Double-loop windowed squared correlation, clipped windows, summed."""
    nx, ny, nz = u.shape
    r = window // 2
    total = 0.0
    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                sl = (slice(max(0, x - r), min(nx, x + r + 1)),
                      slice(max(0, y - r), min(ny, y + r + 1)),
                      slice(max(0, z - r), min(nz, z + r + 1)))
                a = u[sl].ravel()
                b = w[sl].ravel()
                da = a - a.mean()
                db = b - b.mean()
                cross = float(np.dot(da, db))
                total += cross * cross / (float(np.dot(da, da)) * float(np.dot(db, db)) + eta)
    return -total


def oracle_smoothness(f: np.ndarray, floor: float = 1e-12) -> float:
    """Per-voxel forward-difference norms, averaged over the three directions."""
    nx, ny, nz = f.shape[:3]
    total = 0.0
    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                for axis, (dx, dy, dz) in enumerate(((1, 0, 0), (0, 1, 0), (0, 0, 1))):
                    xn, yn, zn = x + dx, y + dy, z + dz
                    if xn >= nx or yn >= ny or zn >= nz:
                        continue
                    d = f[xn, yn, zn] - f[x, y, z]
                    total += math.sqrt(float(np.dot(d, d)) + floor) / 3.0
    return total


def off_lattice_field(dims, rng, amplitude=1.2):
    """Random field whose sample positions avoid lattice planes by >= 0.06."""
    f = rng.uniform(-amplitude, amplitude, tuple(dims) + (3,))
    base = np.stack(np.meshgrid(*(np.arange(d, dtype=float) for d in dims),
                                indexing="ij"), axis=-1)
    frac = (base + f) - np.floor(base + f)
    return f + np.where(frac < 0.06, 0.07, np.where(frac > 0.94, -0.07, 0.0))


def smooth_random_field(dims, rng, magnitude=1.0, sigma=2.0):
    from scipy.ndimage import gaussian_filter
    f = rng.standard_normal(tuple(dims) + (3,))
    for c in range(3):
        f[..., c] = gaussian_filter(f[..., c], sigma, mode="nearest")
    peak = np.sqrt((f ** 2).sum(-1)).max()
    return f * (magnitude / peak)


def fd_gradient(value_fn, arr: np.ndarray, flat_index: int, h: float = 1e-5) -> float:
    a = arr.copy()
    a.reshape(-1)[flat_index] += h
    fp = value_fn(a)
    a = arr.copy()
    a.reshape(-1)[flat_index] -= h
    fm = value_fn(a)
    return (fp - fm) / (2.0 * h)


def max_fd_rel_err(value_fn, arr, grad, rng, coords=30, h=1e-5, select=None) -> float:
    """Worst relative error of `grad` against central differences of `value_fn`."""
    flat = np.asarray(grad).reshape(-1)
    gmax = np.abs(flat).max()
    worst, found = 0.0, 0
    for _ in range(coords * 500):
        if found >= coords:
            break
        i = int(rng.integers(flat.size))
        if abs(flat[i]) < 1e-3 * gmax:
            continue
        if select is not None and not select(i):
            continue
        fd = fd_gradient(value_fn, arr, i, h)
        worst = max(worst, abs(flat[i] - fd) / max(abs(fd), abs(flat[i])))
        found += 1
    assert found >= coords, "could not find enough admissible FD coordinates"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
