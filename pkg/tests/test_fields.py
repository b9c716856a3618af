import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from occulift.fields import (
    AnalyticScene,
    BoundaryGradient,
    Primitive,
    VoxelGrid,
    analytic_sdf,
    fill_grid_from_function,
    make_sphere_sdf_grid,
)

from conftest import central_diff, interior_points, rel_error, small_grid


def brute_force_sample(grid, positions):
    """Independent 8-corner trilinear interpolation, one point at a time."""
    out = np.zeros((len(positions), grid.channels))
    res = np.array(grid.resolution)
    for n, p in enumerate(np.atleast_2d(positions)):
        u = np.clip((p - grid.bounds_min) / grid.h, 0, res - 1)
        i0 = np.minimum(np.floor(u).astype(int), res - 2)
        f = u - i0
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    w = ((f[0] if dx else 1 - f[0])
                         * (f[1] if dy else 1 - f[1])
                         * (f[2] if dz else 1 - f[2]))
                    out[n] += w * grid.values[i0[0] + dx, i0[1] + dy, i0[2] + dz]
    return out


class TestSample:
    def test_node_values_exact(self, rng):
        g = small_grid(rng)
        idx = np.stack(np.meshgrid(*[np.arange(r) for r in g.resolution],
                                   indexing="ij"), axis=-1).reshape(-1, 3)
        pos = g.bounds_min + idx * g.h
        assert np.allclose(g.sample(pos)[:, 0],
                           g.values.reshape(-1), atol=1e-6)

    def test_affine_exactness(self, rng):
        a = np.array([0.3, -1.2, 0.7])
        b = 0.25
        g = VoxelGrid((6, 7, 8), (-1, -1, -1), (1, 1, 1), dtype=np.float64)
        fill_grid_from_function(g, lambda p: (p @ a + b)[:, None])
        pts = rng.uniform(-1, 1, (1000, 3))
        assert np.allclose(g.sample(pts)[:, 0], pts @ a + b, atol=1e-12)

    def test_matches_brute_force(self, rng):
        g = small_grid(rng, channels=3)
        pts = rng.uniform(-1.2, 1.2, (200, 3))  # includes clamped points
        assert np.allclose(g.sample(pts), brute_force_sample(g, pts), atol=1e-6)

    def test_out_of_bounds_clamps(self, rng):
        g = small_grid(rng)
        far = np.array([[10.0, 10.0, 10.0]])
        corner = np.array([[1.0, 1.0, 1.0]])
        assert np.allclose(g.sample(far), g.sample(corner))

    @given(st.integers(0, 1000))
    @settings(max_examples=30, deadline=None)
    def test_convex_combination_bounds(self, seed):
        rng = np.random.default_rng(seed)
        g = small_grid(rng)
        pts = rng.uniform(-1, 1, (50, 3))
        v = g.sample(pts)[:, 0]
        assert np.all(v >= g.values.min() - 1e-9)
        assert np.all(v <= g.values.max() + 1e-9)


class TestBackprop:
    def test_value_gradient_matches_brute_force(self, rng):
        g = small_grid(rng, channels=2)
        pts = rng.uniform(-0.9, 0.9, (40, 3))
        up = rng.standard_normal((40, 2))
        g.zero_grad()
        g.backprop(pts, up, with_position_grad=False)
        # independently scatter through the brute-force weights
        ref = np.zeros(g.values.shape)
        res = np.array(g.resolution)
        for n, p in enumerate(pts):
            u = np.clip((p - g.bounds_min) / g.h, 0, res - 1)
            i0 = np.minimum(np.floor(u).astype(int), res - 2)
            f = u - i0
            for dx in (0, 1):
                for dy in (0, 1):
                    for dz in (0, 1):
                        w = ((f[0] if dx else 1 - f[0])
                             * (f[1] if dy else 1 - f[1])
                             * (f[2] if dz else 1 - f[2]))
                        ref[i0[0] + dx, i0[1] + dy, i0[2] + dz] += w * up[n]
        assert np.allclose(g.grad, ref, atol=1e-5)

    def test_value_gradient_matches_finite_differences(self, rng):
        g = VoxelGrid((4, 4, 4), (-1, -1, -1), (1, 1, 1), dtype=np.float64)
        g.values[...] = rng.standard_normal(g.values.shape)
        pts = rng.uniform(-0.9, 0.9, (10, 3))
        up = rng.standard_normal((10, 1))
        g.zero_grad()
        g.backprop(pts, up, with_position_grad=False)

        def loss(vals):
            g2 = g.copy()
            g2.values[...] = vals
            return float(np.sum(g2.sample(pts) * up))

        fd = central_diff(loss, g.values.copy())
        assert rel_error(g.grad, fd) < 1e-6

    def test_position_gradient_matches_finite_differences(self, rng):
        g = small_grid(rng)
        pts = interior_points(rng, g, 20)
        up = rng.standard_normal((20, 1))
        g.zero_grad()
        dpos = g.backprop(pts, up)
        for i in range(5):
            def loss(p):
                q = pts.copy()
                q[i] = p
                return float(np.sum(g.sample(q) * up))
            fd = central_diff(loss, pts[i].copy())
            assert rel_error(dpos[i], fd, floor=1e-6) < 1e-4


class TestPositionGradient:
    def test_matches_finite_differences(self, rng):
        g = small_grid(rng)
        pts = interior_points(rng, g, 15)
        grad = g.position_gradient(pts)
        for i in range(5):
            def value(p):
                q = pts.copy()
                q[i] = p
                return float(g.sample(q)[i, 0])
            fd = central_diff(value, pts[i].copy())
            assert rel_error(grad[i], fd, floor=1e-6) < 1e-4

    def test_affine_grid_has_constant_gradient(self, rng):
        a = np.array([0.5, -0.25, 1.5])
        g = VoxelGrid((6, 6, 6), (-1, -1, -1), (1, 1, 1), dtype=np.float64)
        fill_grid_from_function(g, lambda p: (p @ a)[:, None])
        pts = interior_points(rng, g, 64)
        grad = g.position_gradient(pts)
        assert np.allclose(grad, a, atol=1e-9)

    def test_boundary_point_raises(self, rng):
        g = small_grid(rng)
        with pytest.raises(BoundaryGradient):
            g.position_gradient(np.array([[0.99, 0.0, 0.0]]))


class TestSnapshotFormat:
    def test_roundtrip_bit_exact(self, rng, tmp_path):
        g = small_grid(rng, resolution=(4, 5, 6), channels=3)
        path = tmp_path / "grid.olgrid"
        g.save(path)
        g2 = VoxelGrid.load(path)
        assert g2.resolution == g.resolution
        assert np.array_equal(g2.values, g.values)
        assert np.array_equal(g2.bounds_min, g.bounds_min)
        assert np.array_equal(g2.bounds_max, g.bounds_max)

    def test_header_layout(self, rng, tmp_path):
        g = small_grid(rng, resolution=(4, 5, 6), channels=2)
        path = tmp_path / "grid.olgrid"
        g.save(path)
        raw = path.read_bytes()
        assert raw[:7] == b"OLGRID1"
        assert np.frombuffer(raw[7:23], dtype="<u4").tolist() == [4, 5, 6, 2]
        assert len(raw) == 7 + 16 + 48 + 4 * 5 * 6 * 2 * 4

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bogus.olgrid"
        path.write_bytes(b"NOTGRID" + b"\x00" * 64)
        with pytest.raises(ValueError):
            VoxelGrid.load(path)


class TestConstruction:
    def test_too_small_resolution_rejected(self):
        with pytest.raises(ValueError):
            VoxelGrid((1, 4, 4), (-1, -1, -1), (1, 1, 1))

    def test_degenerate_bounds_rejected(self):
        with pytest.raises(ValueError):
            VoxelGrid((4, 4, 4), (1, -1, -1), (1, 1, 1))

    def test_sphere_init_matches_analytic_distance(self, rng):
        g = make_sphere_sdf_grid((32, 32, 32), (-1, -1, -1), (1, 1, 1))
        pts = rng.uniform(-0.9, 0.9, (500, 3))
        d = np.linalg.norm(pts, axis=-1) - 0.4
        assert np.allclose(g.sample(pts)[:, 0], d, atol=2e-2)


class TestAnalyticScene:
    def _scene(self):
        return AnalyticScene(primitives=[
            Primitive(shape="sphere", center=(0.3, 0.0, 0.0), size=0.25,
                      color=(1, 0, 0), object_id=1),
            Primitive(shape="sphere", center=(-0.4, 0.0, 0.0), size=0.2,
                      color=(0, 1, 0), object_id=2),
        ], bounds_min=np.array([-1.0, -1, -1]), bounds_max=np.array([1.0, 1, 1]))

    def test_scene_sdf_is_min_of_parts(self, rng):
        scene = self._scene()
        pts = rng.uniform(-1, 1, (100, 3))
        d1 = np.linalg.norm(pts - [0.3, 0, 0], axis=-1) - 0.25
        d2 = np.linalg.norm(pts - [-0.4, 0, 0], axis=-1) - 0.2
        assert np.allclose(scene.sdf(pts), np.minimum(d1, d2))

    def test_analytic_sdf_single_point(self):
        scene = self._scene()
        assert analytic_sdf(scene, (0.3, 0.0, 0.0))[0] == pytest.approx(-0.25)

    def test_normals_unit_length(self, rng):
        scene = self._scene()
        pts = rng.uniform(-1, 1, (50, 3))
        n = scene.normal(pts)
        assert np.allclose(np.linalg.norm(n, axis=-1), 1.0, atol=1e-4)
