"""Analytic scene rendering, dataset round-trips, and camera rings."""

import json
import os

import numpy as np
import pytest

from occulift.fields import AnalyticScene, Primitive
from occulift.geometry import Camera, look_at_rotation
from occulift.scenes import (DatasetError, generate_camera_ring,
                             generate_synthetic_dataset, load_dataset,
                             make_duo_scene, render_ground_truth,
                             sample_primitive_surface, sphere_trace)

from conftest import axis_camera


def single_sphere_scene(radius=0.4):
    prim = Primitive(shape="sphere", center=(0.0, 0.0, 0.0), size=radius,
                     color=(1.0, 0.0, 0.0), object_id=1)
    return AnalyticScene(primitives=[prim],
                         bounds_min=np.array([-1.0, -1.0, -1.0]),
                         bounds_max=np.array([1.0, 1.0, 1.0]))


class TestGroundTruthRender:
    def test_center_ray_depth(self):
        scene = single_sphere_scene(radius=0.4)
        base = axis_camera(distance=4.0, width=21, height=21, fx=40.0, fy=40.0)
        # put pixel (10, 10)'s center exactly on the optical axis
        cam = Camera(fx=40.0, fy=40.0, cx=10.5, cy=10.5,
                     rotation=base.rotation, translation=base.translation,
                     width=21, height=21)
        _, _, depth, objmap = render_ground_truth(scene, cam, supersample=1)
        # center pixel looks straight at the sphere: depth = distance - radius
        assert objmap[10, 10] == 1
        assert depth[10, 10] == pytest.approx(3.6, abs=1e-3)

    def test_projected_silhouette_radius(self):
        r, d, f = 0.4, 4.0, 120.0
        scene = single_sphere_scene(radius=r)
        cam = axis_camera(distance=d, width=101, height=101, fx=f, fy=f)
        _, sil, _, _ = render_ground_truth(scene, cam, supersample=2)
        mask = sil[1]
        ys, xs = np.nonzero(mask)
        measured = 0.5 * (xs.max() - xs.min() + 1)
        # silhouette of a sphere: apparent radius f * r / sqrt(d^2 - r^2)
        expected = f * r / np.sqrt(d * d - r * r)
        assert abs(measured - expected) <= 1.0
        # and it is vertically symmetric too
        measured_y = 0.5 * (ys.max() - ys.min() + 1)
        assert abs(measured_y - expected) <= 1.0

    def test_background_pixels_unlit(self):
        scene = single_sphere_scene(radius=0.2)
        cam = axis_camera(distance=4.0, width=31, height=31, fx=30.0)
        img, _, depth, objmap = render_ground_truth(scene, cam, supersample=1)
        bg = objmap == -1
        assert bg.any()
        assert np.all(img[bg] == 0.0)
        assert np.all(depth[bg] == 0.0)

    def test_duo_scene_silhouettes_disjoint(self):
        scene = make_duo_scene()
        cam = axis_camera(distance=4.0, width=64, height=48, fx=60.0)
        cam = cam.__class__(fx=60.0, fy=60.0, cx=31.5, cy=23.5,
                            rotation=cam.rotation, translation=cam.translation,
                            width=64, height=48)
        _, sil, _, _ = render_ground_truth(scene, cam, supersample=1)
        assert set(sil) == {1, 2, 3}
        total = sum(s.astype(int) for s in sil.values())
        assert total.max() <= 1  # per-object silhouettes never overlap

    def test_sphere_trace_miss_reports_t_far(self):
        scene = single_sphere_scene(radius=0.1)
        o = np.array([[0.9, 0.9, -2.0]])
        dvec = np.array([[0.0, 0.0, 1.0]])
        hit, t, obj, _ = sphere_trace(scene, o, dvec,
                                      np.array([0.0]), np.array([4.0]))
        assert not hit[0]
        assert obj[0] == -1
        assert t[0] == 4.0


class TestCameraRing:
    def test_ring_positions_and_aim(self):
        look = np.array([0.1, 0.0, -0.2])
        cams = generate_camera_ring(4, radius=3.0, elevation=0.3, look_at=look)
        assert len(cams) == 4
        for cam in cams:
            assert np.linalg.norm(cam.translation - look) == pytest.approx(3.0)
            R = look_at_rotation(cam.translation, look)
            np.testing.assert_allclose(cam.rotation, R, atol=1e-12)
        # consecutive cameras are 90 degrees apart in azimuth
        rel = [c.translation - look for c in cams]
        for a, b in zip(rel, rel[1:]):
            xz_a = np.array([a[0], a[2]])
            xz_b = np.array([b[0], b[2]])
            cos = xz_a @ xz_b / (np.linalg.norm(xz_a) * np.linalg.norm(xz_b))
            assert cos == pytest.approx(0.0, abs=1e-12)

    def test_invalid_count(self):
        with pytest.raises(ValueError):
            generate_camera_ring(0, 3.0, 0.3, (0, 0, 0))


class TestDatasetRoundtrip:
    def test_roundtrip_preserves_cameras_and_views(self, tmp_path):
        out = str(tmp_path / "ds")
        ds = generate_synthetic_dataset("duo", out, views=4, width=32,
                                        height=24, supersample=1,
                                        feature_channels=4)
        loaded = load_dataset(out)
        assert len(loaded.views) == 4
        assert loaded.target_object_id == ds.target_object_id
        np.testing.assert_allclose(loaded.bounds_min, ds.bounds_min)
        np.testing.assert_allclose(loaded.bounds_max, ds.bounds_max)
        for a, b in zip(ds.views, loaded.views):
            assert a.view_id == b.view_id
            np.testing.assert_allclose(a.camera.rotation, b.camera.rotation)
            np.testing.assert_allclose(a.camera.translation, b.camera.translation)
            assert (a.camera.fx, a.camera.fy) == (b.camera.fx, b.camera.fy)

    def test_generation_deterministic(self, tmp_path):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        for out in (a, b):
            generate_synthetic_dataset("duo", out, views=3, width=32,
                                       height=24, supersample=1,
                                       feature_channels=4)
        for rel in ("images/0000.png", "images/0002.png", "masks/0001.png",
                    "features/0000.olfeat"):
            with open(os.path.join(a, rel), "rb") as fa, \
                    open(os.path.join(b, rel), "rb") as fb:
                assert fa.read() == fb.read()

    def test_mask_files_match_silhouettes(self, tmp_path):
        out = str(tmp_path / "ds")
        ds = generate_synthetic_dataset("duo", out, views=2, width=32,
                                        height=24, supersample=1,
                                        feature_channels=4)
        scene = make_duo_scene()
        for v in ds.views:
            _, sil, _, _ = render_ground_truth(scene, v.camera, supersample=1)
            assert np.array_equal(ds.load_mask(v), sil[ds.target_object_id])

    def test_missing_image_names_view(self, tmp_path):
        out = str(tmp_path / "ds")
        generate_synthetic_dataset("duo", out, views=3, width=16, height=12,
                                   supersample=1, with_features=False)
        os.remove(os.path.join(out, "images", "0001.png"))
        with pytest.raises(DatasetError, match="view 1"):
            load_dataset(out)

    def test_improper_rotation_rejected(self, tmp_path):
        out = str(tmp_path / "ds")
        generate_synthetic_dataset("duo", out, views=2, width=16, height=12,
                                   supersample=1, with_features=False)
        meta_path = os.path.join(out, "cameras.json")
        with open(meta_path) as f:
            meta = json.load(f)
        R = np.array(meta["views"][0]["rotation"]).reshape(3, 3)
        R[0] = -R[0]  # flip one axis: determinant becomes -1
        meta["views"][0]["rotation"] = R.ravel().tolist()
        with open(meta_path, "w") as f:
            json.dump(meta, f)
        with pytest.raises(DatasetError, match="improper-rotation"):
            load_dataset(out)

    def test_unknown_preset(self, tmp_path):
        with pytest.raises(DatasetError):
            generate_synthetic_dataset("nope", str(tmp_path / "x"))


class TestSurfaceSampling:
    def test_sphere_samples_on_surface(self):
        prim = Primitive(shape="sphere", center=(0.2, -0.1, 0.0), size=0.35,
                         color=(1, 0, 0), object_id=1)
        pts = sample_primitive_surface(prim, 500, seed=0)
        r = np.linalg.norm(pts - np.array([0.2, -0.1, 0.0]), axis=-1)
        np.testing.assert_allclose(r, 0.35, atol=1e-9)

    def test_box_samples_on_faces(self):
        prim = Primitive(shape="box", center=(0.0, 0.0, 0.0),
                         size=(0.2, 0.3, 0.4), color=(0, 0, 1), object_id=2)
        pts = sample_primitive_surface(prim, 500, seed=1)
        half = np.array([0.2, 0.3, 0.4])
        inside = np.all(np.abs(pts) <= half + 1e-9, axis=-1)
        on_face = np.any(np.isclose(np.abs(pts), half, atol=1e-9), axis=-1)
        assert inside.all() and on_face.all()

    def test_deterministic(self):
        prim = Primitive(shape="sphere", center=(0, 0, 0), size=0.5,
                         color=(1, 0, 0), object_id=1)
        a = sample_primitive_surface(prim, 100, seed=4)
        b = sample_primitive_surface(prim, 100, seed=4)
        assert np.array_equal(a, b)
