import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from occulift.geometry import (
    Camera,
    NoIntersection,
    Ray,
    generate_ray,
    generate_rays_batch,
    look_at_rotation,
    ray_aabb,
    sample_stratified,
)

from conftest import axis_camera, ring_camera

UNIT_BOX = ((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))


class TestRayAABB:
    def test_axis_ray_through_unit_box(self):
        t_near, t_far = ray_aabb((0, 0, -4), (0, 0, 1), *UNIT_BOX)
        assert t_near == pytest.approx(3.5, abs=1e-12)
        assert t_far == pytest.approx(4.5, abs=1e-12)

    def test_miss_raises(self):
        with pytest.raises(NoIntersection):
            ray_aabb((0, 0, -4), (0, 1, 0), *UNIT_BOX)

    def test_box_behind_origin_raises(self):
        with pytest.raises(NoIntersection):
            ray_aabb((0, 0, 4), (0, 0, 1), *UNIT_BOX)

    def test_origin_inside_clips_near_to_zero(self):
        t_near, t_far = ray_aabb((0, 0, 0), (0, 0, 1), *UNIT_BOX)
        assert t_near == 0.0
        assert t_far == pytest.approx(0.5)

    def test_parallel_axis_ray_inside_slab(self):
        t_near, t_far = ray_aabb((0.25, 0.25, -4), (0, 0, 1), *UNIT_BOX)
        assert (t_near, t_far) == (pytest.approx(3.5), pytest.approx(4.5))

    def test_parallel_axis_ray_outside_slab(self):
        with pytest.raises(NoIntersection):
            ray_aabb((0.75, 0, -4), (0, 0, 1), *UNIT_BOX)

    @given(st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_entry_exit_points_on_box_surface(self, seed):
        rng = np.random.default_rng(seed)
        o = rng.uniform(-4, 4, 3)
        d = rng.standard_normal(3)
        d /= np.linalg.norm(d)
        if np.all(np.abs(o) <= 0.5):
            o[2] = -4.0
        try:
            t_near, t_far = ray_aabb(o, d, *UNIT_BOX)
        except NoIntersection:
            return
        for t in (t_near, t_far):
            p = o + t * d
            assert np.all(np.abs(p) <= 0.5 + 1e-9)
            if t > 0:
                assert np.max(np.abs(p)) == pytest.approx(0.5, abs=1e-9)


class TestGenerateRay:
    def test_central_pixel_on_axis(self):
        cam = axis_camera(distance=4.0)
        ray = generate_ray(cam, 4, 4, *UNIT_BOX)
        assert np.allclose(ray.direction, [0, 0, 1])
        assert ray.t_near == pytest.approx(3.5)
        assert ray.t_far == pytest.approx(4.5)

    def test_pixel_outside_image_rejected(self):
        cam = axis_camera()
        with pytest.raises(ValueError):
            generate_ray(cam, 10, 0, *UNIT_BOX)

    def test_project_roundtrip(self):
        cam = ring_camera(azimuth=0.7)
        for px, py in [(20, 15), (32, 24), (45, 30)]:
            ray = generate_ray(cam, px, py, (-1, -1, -1), (1, 1, 1))
            point = ray.origin + 0.5 * (ray.t_near + ray.t_far) * ray.direction
            back = cam.project(point)[0]
            assert back[0] == pytest.approx(px, abs=1e-9)
            assert back[1] == pytest.approx(py, abs=1e-9)

    def test_batch_matches_single(self):
        cam = ring_camera(azimuth=2.1)
        px = np.array([18, 25, 31, 44])
        py = np.array([14, 19, 24, 31])
        o, d, t_near, t_far, valid = generate_rays_batch(
            cam, px, py, (-1, -1, -1), (1, 1, 1))
        for i in range(len(px)):
            ray = generate_ray(cam, int(px[i]), int(py[i]), (-1, -1, -1), (1, 1, 1))
            assert valid[i]
            assert np.allclose(d[i], ray.direction)
            assert t_near[i] == pytest.approx(ray.t_near)
            assert t_far[i] == pytest.approx(ray.t_far)


class TestRayValidation:
    def test_non_unit_direction_rejected(self):
        with pytest.raises(ValueError):
            Ray(origin=np.zeros(3), direction=np.array([0, 0, 2.0]),
                t_near=1.0, t_far=2.0)

    def test_inverted_interval_rejected(self):
        with pytest.raises(ValueError):
            Ray(origin=np.zeros(3), direction=np.array([0, 0, 1.0]),
                t_near=2.0, t_far=1.0)


class TestStratifiedSampling:
    def _ray(self):
        return Ray(origin=np.zeros(3), direction=np.array([0, 0, 1.0]),
                   t_near=1.0, t_far=3.0)

    def test_midpoints_without_jitter(self):
        samples = sample_stratified(self._ray(), 4, rng_seed=0, jitter=False)
        expected = 1.0 + 2.0 * np.array([0.125, 0.375, 0.625, 0.875])
        assert np.allclose(samples.t_values, expected)

    def test_positions_lie_on_ray(self):
        samples = sample_stratified(self._ray(), 8, rng_seed=3)
        assert np.allclose(samples.positions[:, :2], 0.0)
        assert np.allclose(samples.positions[:, 2], samples.t_values)

    @given(st.integers(0, 1000), st.integers(1, 32))
    @settings(max_examples=60, deadline=None)
    def test_one_sample_per_bin_ascending(self, seed, n):
        samples = sample_stratified(self._ray(), n, rng_seed=seed)
        t = samples.t_values
        edges = np.linspace(1.0, 3.0, n + 1)
        assert np.all(np.diff(t) >= 0)
        assert np.all(t >= edges[:-1]) and np.all(t <= edges[1:])

    def test_deltas_are_forward_differences_with_bin_pad(self):
        samples = sample_stratified(self._ray(), 5, rng_seed=1)
        t = samples.t_values
        assert np.allclose(samples.deltas[:-1], np.diff(t))
        assert samples.deltas[-1] == pytest.approx(2.0 / 5)


class TestCameraValidation:
    def test_improper_rotation_rejected(self):
        R = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError, match="improper-rotation"):
            Camera(fx=10, fy=10, cx=5, cy=5, rotation=R,
                   translation=(0, 0, -4), width=10, height=10)

    def test_non_orthonormal_rejected(self):
        with pytest.raises(ValueError):
            Camera(fx=10, fy=10, cx=5, cy=5, rotation=np.eye(3) * 2.0,
                   translation=(0, 0, -4), width=10, height=10)


class TestLookAt:
    @given(st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_forward_axis_passes_through_target(self, seed):
        rng = np.random.default_rng(seed)
        center = rng.uniform(-3, 3, 3)
        target = rng.uniform(-1, 1, 3)
        if np.linalg.norm(target - center) < 1e-3:
            return
        R = look_at_rotation(center, target)
        assert np.allclose(R @ R.T, np.eye(3), atol=1e-9)
        fwd = R[:, 2]
        to_target = target - center
        cross = np.cross(fwd, to_target)
        assert np.linalg.norm(cross) < 1e-9 * max(1.0, np.linalg.norm(to_target))
        assert fwd @ to_target > 0
