"""Dense differentiable voxel grids and analytic SDF primitives.

A :class:`VoxelGrid` stores C channels on a node-centered lattice over an
axis-aligned box and supports trilinear sampling with hand-written backward
passes (gradients accumulate into ``grad``). Grids are plain numpy arrays;
there is no autodiff framework underneath, every consumer calls the explicit
``backprop_*`` methods.

:class:`AnalyticScene` provides exact sphere/box SDF unions used as synthetic
ground truth by the renderer, the oracle segmenter, and the test suite.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np


class BoundaryGradient(Exception):
    """Position too close to the grid boundary for a spatial gradient."""


class VoxelGrid:
    """C-channel dense grid with trilinear interpolation.

    ``values`` has shape (Nx, Ny, Nz, C); nodes sit at
    ``bounds_min + i * h`` with ``h = (bounds_max - bounds_min) / (N - 1)``.
    Out-of-bounds sample positions clamp to the boundary.
    """

    def __init__(self, resolution, bounds_min, bounds_max, channels=1, fill=0.0,
                 dtype=np.float32):
        self.resolution = tuple(int(r) for r in resolution)
        if min(self.resolution) < 2:
            raise ValueError("resolution must be >= 2 per axis")
        self.bounds_min = np.asarray(bounds_min, dtype=np.float64)
        self.bounds_max = np.asarray(bounds_max, dtype=np.float64)
        if np.any(self.bounds_max <= self.bounds_min):
            raise ValueError("degenerate bounds")
        self.channels = int(channels)
        shape = (*self.resolution, self.channels)
        self.values = np.full(shape, fill, dtype=dtype)
        self.grad = np.zeros(shape, dtype=dtype)
        self.h = (self.bounds_max - self.bounds_min) / (np.array(self.resolution) - 1)
        self._corner_offsets = None

    # -- interpolation machinery ------------------------------------------

    def _context(self, positions):
        """Clamped cell indices, fractions and the 8 corner weights.

        Returns (vid (N,8) flat node ids, w (N,8) weights, frac (N,3),
        i0 (N,3)). Corner order: bit 0 -> z, bit 1 -> y, bit 2 -> x.
        """
        p = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        u = (p - self.bounds_min) / self.h
        res = np.array(self.resolution)
        u = np.clip(u, 0.0, res - 1)
        i0 = np.minimum(np.floor(u).astype(np.int64), res - 2)
        frac = u - i0

        fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
        gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
        w = np.empty((len(p), 8), dtype=np.float64)
        c00, c01, c10, c11 = gx * gy, gx * fy, fx * gy, fx * fy
        w[:, 0] = c00 * gz
        w[:, 1] = c00 * fz
        w[:, 2] = c01 * gz
        w[:, 3] = c01 * fz
        w[:, 4] = c10 * gz
        w[:, 5] = c10 * fz
        w[:, 6] = c11 * gz
        w[:, 7] = c11 * fz

        nx, ny, nz = self.resolution
        if self._corner_offsets is None:
            dx = np.array([0, 0, 0, 0, 1, 1, 1, 1], dtype=np.int64)
            dy = np.array([0, 0, 1, 1, 0, 0, 1, 1], dtype=np.int64)
            dz = np.array([0, 1, 0, 1, 0, 1, 0, 1], dtype=np.int64)
            self._corner_offsets = (dx * ny + dy) * nz + dz
        base = (i0[:, 0] * ny + i0[:, 1]) * nz + i0[:, 2]
        vid = base[:, None] + self._corner_offsets
        return vid, w, frac, i0

    def _chunk_size(self) -> int:
        # keep the (N, 8, C) gather buffers cache-resident (~2 MB)
        return max(1024, 262_144 // (8 * max(1, self.channels)))

    def _scatter_chunk_size(self) -> int:
        # scatter pays a full-grid bincount per chunk; amortize with big chunks
        return max(65_536, 4_000_000 // max(1, self.channels))

    def sample(self, positions):
        """Trilinear interpolation; positions (N,3) -> (N,C)."""
        p = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        flat = self.values.reshape(-1, self.channels)
        out = np.empty((len(p), self.channels), dtype=np.float64)
        step = self._chunk_size()
        for lo in range(0, len(p), step):
            vid, w, _, _ = self._context(p[lo:lo + step])
            out[lo:lo + step] = np.einsum("nk,nkc->nc", w, flat[vid])
        return out

    def backprop(self, positions, upstream, with_position_grad=True):
        """Accumulate dL/dvalues for dL/dsample = ``upstream`` (N,C).

        Returns the position gradient dL/dposition (N,3) (chain through the
        trilinear weights), or None when ``with_position_grad`` is off.
        """
        p = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        upstream = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
        flat = self.values.reshape(-1, self.channels)
        pos_grad = np.empty((len(p), 3), dtype=np.float64) if with_position_grad else None
        step = self._scatter_chunk_size()
        sub = self._chunk_size()
        for lo in range(0, len(p), step):
            n = min(step, len(p) - lo)
            vid_buf = np.empty((n, 8), dtype=np.int64)
            contrib = np.empty((n, 8, self.channels), dtype=np.float64)
            for so in range(0, n, sub):
                sl = slice(lo + so, lo + min(so + sub, n))
                vid, w, frac, _ = self._context(p[sl])
                up = upstream[sl]
                out = slice(so, so + len(vid))
                vid_buf[out] = vid
                contrib[out] = w[:, :, None] * up[:, None, :]
                if with_position_grad:
                    dw = self._weight_position_jacobian(frac)  # (N,8,3)
                    corner_vals = flat[vid]  # (N,8,C)
                    # dL/dp_a = sum_k sum_c upstream_c * v_kc * dw_k/dp_a
                    proj = np.einsum("nkc,nc->nk", corner_vals, up)
                    pos_grad[sl] = np.einsum("nk,nka->na", proj, dw)
            self._scatter(vid_buf, contrib)
        return pos_grad

    def position_gradient(self, positions, check_interior=True):
        """Analytic spatial gradient of the interpolant; C must be 1.

        Raw (not normalized); the Eikonal loss needs the magnitude. Raises
        :class:`BoundaryGradient` when any position is within one voxel of
        the boundary and ``check_interior`` is set.
        """
        if self.channels != 1:
            raise ValueError("position_gradient requires a scalar grid")
        p = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        if check_interior and not np.all(self.interior_mask(p)):
            raise BoundaryGradient()
        vid, _, frac, _ = self._context(p)
        dw = self._weight_position_jacobian(frac)
        corner_vals = self.values.reshape(-1)[vid]  # (N,8)
        return np.einsum("nk,nka->na", corner_vals, dw)

    def backprop_position_gradient(self, positions, upstream):
        """Accumulate dL/dvalues for dL/d(position_gradient) = upstream (N,3)."""
        vid, _, frac, _ = self._context(positions)
        dw = self._weight_position_jacobian(frac)  # (N,8,3)
        upstream = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
        contrib = np.einsum("nka,na->nk", dw, upstream)[:, :, None]
        self._scatter(vid, contrib)

    def interior_mask(self, positions):
        """True where a position is strictly inside bounds by one voxel."""
        p = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        lo = self.bounds_min + self.h
        hi = self.bounds_max - self.h
        return np.all((p > lo) & (p < hi), axis=-1)

    def _weight_position_jacobian(self, frac):
        """d(weights)/d(position) for the 8 corners: (N,8,3)."""
        fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
        gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
        hx, hy, hz = self.h
        dw = np.empty((len(frac), 8, 3), dtype=np.float64)
        # derivative w.r.t. the axis fraction, chained by 1/h; the sign flips
        # with the corner bit of that axis (corner order: bit 0 z, 1 y, 2 x)
        yz00, yz01, yz10, yz11 = gy * gz, gy * fz, fy * gz, fy * fz
        dw[:, 0, 0] = -yz00 / hx
        dw[:, 1, 0] = -yz01 / hx
        dw[:, 2, 0] = -yz10 / hx
        dw[:, 3, 0] = -yz11 / hx
        dw[:, 4, 0] = yz00 / hx
        dw[:, 5, 0] = yz01 / hx
        dw[:, 6, 0] = yz10 / hx
        dw[:, 7, 0] = yz11 / hx
        xz00, xz01, xz10, xz11 = gx * gz, gx * fz, fx * gz, fx * fz
        dw[:, 0, 1] = -xz00 / hy
        dw[:, 1, 1] = -xz01 / hy
        dw[:, 2, 1] = xz00 / hy
        dw[:, 3, 1] = xz01 / hy
        dw[:, 4, 1] = -xz10 / hy
        dw[:, 5, 1] = -xz11 / hy
        dw[:, 6, 1] = xz10 / hy
        dw[:, 7, 1] = xz11 / hy
        xy00, xy01, xy10, xy11 = gx * gy, gx * fy, fx * gy, fx * fy
        dw[:, 0, 2] = -xy00 / hz
        dw[:, 1, 2] = xy00 / hz
        dw[:, 2, 2] = -xy01 / hz
        dw[:, 3, 2] = xy01 / hz
        dw[:, 4, 2] = -xy10 / hz
        dw[:, 5, 2] = xy10 / hz
        dw[:, 6, 2] = -xy11 / hz
        dw[:, 7, 2] = xy11 / hz
        return dw

    def _scatter(self, vid, contrib):
        """grad[vid[n,k], c] += contrib[n,k,c] via a single bincount."""
        C = self.channels
        if C == 1:
            idx = vid.ravel()
        else:
            idx = (vid[:, :, None] * C + np.arange(C)).ravel()
        acc = np.bincount(idx, weights=contrib.ravel(), minlength=self.grad.size)
        self.grad += acc.reshape(self.grad.shape).astype(self.grad.dtype)

    def zero_grad(self):
        self.grad.fill(0.0)

    def copy(self):
        g = VoxelGrid(self.resolution, self.bounds_min, self.bounds_max,
                      self.channels, dtype=self.values.dtype)
        g.values[...] = self.values
        return g

    # -- snapshot format ---------------------------------------------------

    MAGIC = b"OLGRID1"

    def save(self, path):
        """Write the OLGRID1 snapshot: header then float32 values, x-fastest.

        Layout: magic, 4 little-endian uint32 (Nx, Ny, Nz, C), 6 little-endian
        float64 bounds (min then max), then values as float32 with x varying
        fastest across nodes and the C channels contiguous per node.
        """
        nx, ny, nz = self.resolution
        with open(path, "wb") as f:
            f.write(self.MAGIC)
            f.write(struct.pack("<4I", nx, ny, nz, self.channels))
            f.write(struct.pack("<6d", *self.bounds_min, *self.bounds_max))
            out = np.transpose(self.values, (2, 1, 0, 3)).astype("<f4")
            f.write(np.ascontiguousarray(out).tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            magic = f.read(len(cls.MAGIC))
            if magic != cls.MAGIC:
                raise ValueError(f"bad grid magic {magic!r}")
            nx, ny, nz, c = struct.unpack("<4I", f.read(16))
            bounds = struct.unpack("<6d", f.read(48))
            data = np.frombuffer(f.read(nx * ny * nz * c * 4), dtype="<f4")
        grid = cls((nx, ny, nz), bounds[:3], bounds[3:], channels=c)
        grid.values[...] = np.transpose(data.reshape(nz, ny, nx, c), (2, 1, 0, 3))
        return grid


def make_sphere_sdf_grid(resolution, bounds_min, bounds_max, center=None, radius=None):
    """SDF grid initialized to a sphere distance field (standard SDF init)."""
    bounds_min = np.asarray(bounds_min, dtype=np.float64)
    bounds_max = np.asarray(bounds_max, dtype=np.float64)
    if center is None:
        center = 0.5 * (bounds_min + bounds_max)
    if radius is None:
        radius = 0.4 * float(np.min(bounds_max - bounds_min)) / 2.0
    grid = VoxelGrid(resolution, bounds_min, bounds_max, channels=1)
    axes = [np.linspace(bounds_min[a], bounds_max[a], grid.resolution[a]) for a in range(3)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    d = np.sqrt((X - center[0]) ** 2 + (Y - center[1]) ** 2 + (Z - center[2]) ** 2) - radius
    grid.values[..., 0] = d.astype(np.float32)
    return grid


def fill_grid_from_function(grid: VoxelGrid, fn):
    """Evaluate ``fn(points (N,3)) -> (N,C)`` at every node."""
    axes = [np.linspace(grid.bounds_min[a], grid.bounds_max[a], grid.resolution[a])
            for a in range(3)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=-1)
    vals = np.asarray(fn(pts))
    grid.values[...] = vals.reshape(*grid.resolution, grid.channels).astype(grid.values.dtype)
    return grid


# -- analytic scenes -------------------------------------------------------


@dataclass(frozen=True)
class Primitive:
    shape: str  # "sphere" | "box"
    center: tuple
    size: object  # radius (sphere) or half-extents (box)
    color: tuple
    object_id: int

    def sdf(self, positions):
        p = np.atleast_2d(np.asarray(positions, dtype=np.float64)) - np.asarray(self.center)
        if self.shape == "sphere":
            return np.linalg.norm(p, axis=-1) - float(self.size)
        if self.shape == "box":
            q = np.abs(p) - np.asarray(self.size, dtype=np.float64)
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            inside = np.minimum(q.max(axis=-1), 0.0)
            return outside + inside
        raise ValueError(f"unknown primitive shape {self.shape!r}")


@dataclass
class AnalyticScene:
    """CSG union of colored primitives; the synthetic ground truth."""

    primitives: list
    bounds_min: np.ndarray = field(default_factory=lambda: np.array([-1.0, -1.0, -1.0]))
    bounds_max: np.ndarray = field(default_factory=lambda: np.array([1.0, 1.0, 1.0]))

    def sdf(self, positions):
        """Min-union SDF only; positions (N,3) -> (N,)."""
        return self.sdf_full(positions)[0]

    def sdf_full(self, positions):
        """(sdf (N,), object_id (N,), color (N,3)); argmin primitive wins ties
        by lower index.

        The albedo carries a smooth world-space modulation on top of each
        primitive's base color: without surface texture, a spurious surface
        floating in free space can imitate whatever lies behind it from every
        view at once, and multi-view photometric fitting cannot carve it away.
        """
        p = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        all_sdf = np.stack([prim.sdf(p) for prim in self.primitives], axis=0)
        k = np.argmin(all_sdf, axis=0)
        sdf = np.take_along_axis(all_sdf, k[None], axis=0)[0]
        obj = np.array([prim.object_id for prim in self.primitives])[k]
        col = np.array([prim.color for prim in self.primitives])[k]
        tex = 0.75 + 0.25 * (np.sin(9.0 * p[:, 0] + 1.0)
                             * np.sin(9.0 * p[:, 1] + 2.0)
                             * np.sin(9.0 * p[:, 2] + 3.0))
        return sdf, obj, col * tex[:, None]

    def normal(self, positions, eps=1e-5):
        """Central-difference unit normal of the union SDF."""
        p = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        g = np.zeros_like(p)
        for a in range(3):
            d = np.zeros(3)
            d[a] = eps
            g[:, a] = (self.sdf(p + d) - self.sdf(p - d)) / (2 * eps)
        n = np.linalg.norm(g, axis=-1, keepdims=True)
        return g / np.maximum(n, 1e-12)


def analytic_sdf(scene: AnalyticScene, position):
    """Single-point convenience wrapper: (sdf, object_id, color)."""
    sdf, obj, col = scene.sdf_full(np.asarray(position)[None])
    return float(sdf[0]), int(obj[0]), col[0]
