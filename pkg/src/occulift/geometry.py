"""Pinhole cameras, rays, and stratified sampling along rays.

All functions are pure and operate either on single rays (dataclasses below)
or on vectorized pixel batches (the ``*_batch`` variants used by training
loops). World units are arbitrary; pixel centers sit at (px+0.5, py+0.5).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NoIntersection(Exception):
    """Raised when a ray misses the scene bounding box entirely."""


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with world-from-camera pose.

    ``rotation`` maps camera-frame vectors into world frame; ``translation``
    is the camera center in world coordinates.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # (3,3) world-from-camera
    translation: np.ndarray  # (3,) camera center in world
    width: int
    height: int

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise ValueError("rotation is not orthonormal")
        if np.linalg.det(R) < 0:
            raise ValueError("improper-rotation")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")

    def project(self, points: np.ndarray) -> np.ndarray:
        """World points (N,3) -> pixel coordinates (N,2), pixel-index convention."""
        p = np.atleast_2d(points) - self.translation
        cam = p @ self.rotation  # R^T @ p, row-vector form
        z = cam[:, 2]
        px = self.fx * cam[:, 0] / z + self.cx - 0.5
        py = self.fy * cam[:, 1] / z + self.cy - 0.5
        return np.stack([px, py], axis=-1)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray  # (3,)
    direction: np.ndarray  # (3,), unit
    t_near: float
    t_far: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("direction must be unit length")
        if self.t_near < 0 or self.t_near >= self.t_far:
            raise ValueError("need 0 <= t_near < t_far")


@dataclass(frozen=True)
class RaySamples:
    positions: np.ndarray  # (n,3)
    t_values: np.ndarray  # (n,) ascending
    deltas: np.ndarray  # (n,)


def ray_aabb(origin, direction, bounds_min, bounds_max):
    """Slab-test intersection; returns (t_near, t_far) clipped to t >= 0.

    Raises NoIntersection when the ray misses the box or the box is entirely
    behind the origin.
    """
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / direction
        t0 = (np.asarray(bounds_min) - origin) * inv
        t1 = (np.asarray(bounds_max) - origin) * inv
    # Parallel-axis rays: inside the slab -> (-inf, inf), outside -> miss.
    par = direction == 0.0
    if np.any(par):
        o = origin[par]
        if np.any(o < np.asarray(bounds_min)[par]) or np.any(o > np.asarray(bounds_max)[par]):
            raise NoIntersection()
        t0 = t0[~par]
        t1 = t1[~par]
    lo = np.minimum(t0, t1)
    hi = np.maximum(t0, t1)
    t_near = max(lo.max(initial=-np.inf), 0.0)
    t_far = hi.min(initial=np.inf)
    if t_far <= t_near:
        raise NoIntersection()
    return float(t_near), float(t_far)


def generate_ray(camera: Camera, px: int, py: int, bounds_min, bounds_max) -> Ray:
    """Backproject pixel (px, py) through its center, AABB-clipped.

    Raises NoIntersection if the ray misses the scene box (caller skips the
    pixel).
    """
    if not (0 <= px < camera.width and 0 <= py < camera.height):
        raise ValueError("pixel outside image")
    d_cam = np.array(
        [
            (px + 0.5 - camera.cx) / camera.fx,
            (py + 0.5 - camera.cy) / camera.fy,
            1.0,
        ]
    )
    d = camera.rotation @ d_cam
    d /= np.linalg.norm(d)
    t_near, t_far = ray_aabb(camera.translation, d, bounds_min, bounds_max)
    return Ray(origin=camera.translation.copy(), direction=d, t_near=t_near, t_far=t_far)


def generate_rays_batch(camera: Camera, px: np.ndarray, py: np.ndarray, bounds_min, bounds_max):
    """Vectorized ray generation for integer pixel arrays.

    Returns (origins (N,3), directions (N,3), t_near (N,), t_far (N,),
    valid (N,) bool). Invalid entries (AABB miss) have t_near=t_far=0.
    """
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    d_cam = np.stack(
        [
            (px + 0.5 - camera.cx) / camera.fx,
            (py + 0.5 - camera.cy) / camera.fy,
            np.ones_like(px),
        ],
        axis=-1,
    )
    d = d_cam @ camera.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(camera.translation, d.shape)

    bmin = np.asarray(bounds_min, dtype=np.float64)
    bmax = np.asarray(bounds_max, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (bmin - o) * inv
        t1 = (bmax - o) * inv
    lo = np.minimum(t0, t1)
    hi = np.maximum(t0, t1)
    # direction-parallel axes give nan when origin is on the slab border;
    # for ring cameras outside the box this does not occur, but guard anyway
    lo = np.where(np.isnan(lo), -np.inf, lo)
    hi = np.where(np.isnan(hi), np.inf, hi)
    t_near = np.maximum(lo.max(axis=-1), 0.0)
    t_far = hi.min(axis=-1)
    valid = t_far > t_near
    t_near = np.where(valid, t_near, 0.0)
    t_far = np.where(valid, t_far, 0.0)
    return np.ascontiguousarray(o), d, t_near, t_far, valid


def sample_stratified(ray: Ray, n: int, rng_seed: int, jitter: bool = True,
                      far_padding: float | None = None) -> RaySamples:
    """One jittered sample per equal sub-interval of [t_near, t_far]."""
    if n < 1:
        raise ValueError("n >= 1 required")
    t, deltas = sample_stratified_batch(
        np.array([ray.t_near]), np.array([ray.t_far]), n,
        np.random.default_rng(rng_seed), jitter=jitter, far_padding=far_padding,
    )
    t = t[0]
    positions = ray.origin + t[:, None] * ray.direction
    return RaySamples(positions=positions, t_values=t, deltas=deltas[0])


def sample_stratified_batch(t_near, t_far, n, rng, jitter=True, far_padding=None):
    """Stratified t-samples for R rays at once; returns (t (R,n), deltas (R,n))."""
    t_near = np.asarray(t_near, dtype=np.float64)[:, None]
    t_far = np.asarray(t_far, dtype=np.float64)[:, None]
    span = t_far - t_near
    edges = np.linspace(0.0, 1.0, n + 1)
    if jitter:
        u = rng.random((t_near.shape[0], n))
    else:
        u = np.full((t_near.shape[0], n), 0.5)
    frac = edges[:-1] + u / n
    t = t_near + frac * span
    if far_padding is None:
        pad = span / n  # one bin width
    else:
        pad = np.full_like(span, far_padding)
    deltas = np.concatenate([np.diff(t, axis=-1), pad], axis=-1)
    return t, deltas


def look_at_rotation(center: np.ndarray, target: np.ndarray, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-from-camera rotation for a camera at ``center`` looking at ``target``.

    Camera convention: +z forward, +x right, +y down (image y grows downward).
    """
    fwd = np.asarray(target, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    fwd = fwd / np.linalg.norm(fwd)
    upv = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, upv)
    nr = np.linalg.norm(right)
    if nr < 1e-12:  # looking straight along up; pick an arbitrary right
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
        nr = np.linalg.norm(right)
    right /= nr
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=-1)
