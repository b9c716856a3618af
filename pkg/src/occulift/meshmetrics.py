"""Surface extraction and evaluation metrics (IoU, PSNR, SSIM, chamfer).

Marching cubes runs on the SDF grid (optionally restricted to occupied cells
for target-object extraction); chamfer is the symmetric mean L2 between point
sets in scene units.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from skimage import measure

from .fields import VoxelGrid
from .masks import Mask, mask_iou  # re-exported: mask_iou is part of this suite
from .render import sigmoid

__all__ = [
    "TriangleMesh", "MetricReport", "marching_cubes", "chamfer", "mask_iou",
    "psnr", "ssim", "sample_mesh_points", "save_obj",
]


class EmptyPointSet(Exception):
    pass


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V,3)
    triangles: np.ndarray  # (T,3) int

    @property
    def is_empty(self):
        return len(self.triangles) == 0

    def triangle_areas(self):
        v = self.vertices
        t = self.triangles
        cross = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        return 0.5 * np.linalg.norm(cross, axis=-1)


def marching_cubes(sdf_grid: VoxelGrid, iso: float = 0.0,
                   mask_grid: VoxelGrid | None = None) -> TriangleMesh:
    """Zero-set triangulation of ``sdf - iso``.

    With ``mask_grid``, grid cells whose occupancy probability is below 0.5
    at all 8 corners are dropped (target-object extraction). No zero
    crossing yields an empty mesh, not an error.
    """
    if sdf_grid.channels != 1:
        raise ValueError("marching_cubes needs a scalar grid")
    vol = sdf_grid.values[..., 0].astype(np.float64)
    if vol.min() > iso or vol.max() < iso:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts, faces, _, _ = measure.marching_cubes(vol, level=iso,
                                                spacing=tuple(sdf_grid.h))
    verts = verts + sdf_grid.bounds_min

    # drop degenerate (zero-area) triangles
    mesh = TriangleMesh(vertices=verts, triangles=faces.astype(np.int64))
    keep = mesh.triangle_areas() > 1e-12
    mesh.triangles = mesh.triangles[keep]

    if mask_grid is not None and not mesh.is_empty:
        centroids = mesh.vertices[mesh.triangles].mean(axis=1)
        cell = np.floor((centroids - sdf_grid.bounds_min) / sdf_grid.h).astype(int)
        cell = np.clip(cell, 0, np.array(sdf_grid.resolution) - 2)
        occupied = np.zeros(len(cell), dtype=bool)
        offsets = np.array([[a, b, c] for a in (0, 1) for b in (0, 1) for c in (0, 1)])
        for off in offsets:
            corners = sdf_grid.bounds_min + (cell + off) * sdf_grid.h
            prob = sigmoid(mask_grid.sample(corners)[:, 0])
            occupied |= prob >= 0.5
        mesh.triangles = mesh.triangles[occupied]

    return _drop_unreferenced(mesh)


def _drop_unreferenced(mesh: TriangleMesh) -> TriangleMesh:
    if mesh.is_empty:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    used = np.unique(mesh.triangles)
    remap = np.full(len(mesh.vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriangleMesh(vertices=mesh.vertices[used],
                        triangles=remap[mesh.triangles])


def sample_mesh_points(mesh: TriangleMesh, count: int, seed: int = 0) -> np.ndarray:
    """Uniform area-weighted surface samples (count, 3)."""
    if mesh.is_empty:
        raise EmptyPointSet("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.triangle_areas()
    tri = rng.choice(len(areas), size=count, p=areas / areas.sum())
    u, v = rng.random(count), rng.random(count)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    a, b, c = (mesh.vertices[mesh.triangles[tri, k]] for k in range(3))
    return a + u[:, None] * (b - a) + v[:, None] * (c - a)


def save_obj(mesh: TriangleMesh, path):
    """ASCII OBJ with v/f records only (1-based face indices)."""
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]:.8g} {v[1]:.8g} {v[2]:.8g}\n")
        for t in mesh.triangles:
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def chamfer(points_a, points_b) -> float:
    """Symmetric mean nearest-neighbor L2 distance (not squared)."""
    a = np.atleast_2d(np.asarray(points_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(points_b, dtype=np.float64))
    if len(a) == 0 or len(b) == 0:
        raise EmptyPointSet("chamfer needs two non-empty point sets")
    d_ab = cKDTree(b).query(a)[0]
    d_ba = cKDTree(a).query(b)[0]
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


# -- image metrics --------------------------------------------------------------


def psnr(pred, target, valid: Mask) -> float:
    """10 log10(1 / MSE) over valid pixels; identical inputs -> inf."""
    v = valid.binary
    if not v.any():
        raise ValueError("empty valid mask")
    p = np.asarray(pred, dtype=np.float64)[v]
    t = np.asarray(target, dtype=np.float64)[v]
    mse = float(np.mean((p - t) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


_LUMA = np.array([0.299, 0.587, 0.114])


def _gaussian_kernel(size=11, sigma=1.5):
    r = np.arange(size) - size // 2
    k = np.exp(-(r * r) / (2 * sigma * sigma))
    k2 = np.outer(k, k)
    return k2 / k2.sum()


def ssim(pred, target, valid: Mask, window=11, sigma=1.5,
         c1=0.01**2, c2=0.03**2) -> float:
    """Standard SSIM (Gaussian 11x11, sigma 1.5) averaged over windows whose
    center pixel is valid; color inputs are converted by luma weights."""
    v = valid.binary
    if not v.any():
        raise ValueError("empty valid mask")
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.ndim == 3:
        p = p @ _LUMA
    if t.ndim == 3:
        t = t @ _LUMA
    k = _gaussian_kernel(window, sigma)

    def filt(img):
        return ndimage.convolve(img, k, mode="reflect")

    mu_p, mu_t = filt(p), filt(t)
    var_p = filt(p * p) - mu_p**2
    var_t = filt(t * t) - mu_t**2
    cov = filt(p * t) - mu_p * mu_t
    num = (2 * mu_p * mu_t + c1) * (2 * cov + c2)
    den = (mu_p**2 + mu_t**2 + c1) * (var_p + var_t + c2)
    return float(np.mean((num / den)[v]))


@dataclass
class MetricReport:
    iou: float | None = None
    psnr_db: float | None = None
    ssim: float | None = None
    chamfer: float | None = None
    feature_l1: float | None = None
    per_view: dict = field(default_factory=dict)

    def to_dict(self):
        def clean(x):
            if x is None:
                return None
            return "inf" if np.isinf(x) else float(x)

        return {
            "iou": clean(self.iou),
            "psnr_db": clean(self.psnr_db),
            "ssim": clean(self.ssim),
            "chamfer": clean(self.chamfer),
            "feature_l1": clean(self.feature_l1),
            "per_view": {str(k): {m: clean(val) for m, val in d.items()}
                         for k, d in sorted(self.per_view.items())},
        }

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)
