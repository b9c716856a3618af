"""Shared helpers and fixtures for the occulift test suite."""

import numpy as np
import pytest

from occulift.fields import VoxelGrid
from occulift.geometry import Camera, look_at_rotation


def rel_error(analytic, numeric, floor=1e-8):
    """Relative error with an absolute floor so near-zero gradients compare."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(analytic), np.maximum(np.abs(numeric), floor))
    return float(np.max(np.abs(analytic - numeric) / denom))


def central_diff(fn, x, h=1e-6):
    """Central finite-difference gradient of scalar fn over array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def small_grid(rng, resolution=(5, 5, 5), channels=1, scale=1.0):
    g = VoxelGrid(resolution, (-1.0, -1.0, -1.0), (1.0, 1.0, 1.0),
                  channels=channels)
    g.values[...] = rng.standard_normal(g.values.shape) * scale
    return g


def interior_points(rng, grid, count):
    """Strictly interior sample positions (away from the outer cell ring)."""
    lo = grid.bounds_min + 1.5 * grid.h
    hi = grid.bounds_max - 1.5 * grid.h
    return lo + rng.random((count, 3)) * (hi - lo)


def axis_camera(distance=4.0, width=10, height=10, fx=25.0, fy=25.0):
    """Camera on the -z axis looking at the origin, +z forward."""
    return Camera(fx=fx, fy=fy, cx=width / 2 - 0.5, cy=height / 2 - 0.5,
                  rotation=np.eye(3), translation=(0.0, 0.0, -distance),
                  width=width, height=height)


def ring_camera(azimuth, radius=2.8, elevation=0.35, width=64, height=48,
                focal=None):
    c = np.array([radius * np.cos(azimuth) * np.cos(elevation),
                  radius * np.sin(elevation),
                  radius * np.sin(azimuth) * np.cos(elevation)])
    R = look_at_rotation(c, np.zeros(3))
    f = focal if focal is not None else 0.9 * max(width, height)
    return Camera(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0, rotation=R,
                  translation=c, width=width, height=height)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
