"""Feature map files, bilinear lookup, and the oracle target generator."""

import numpy as np
import pytest

from occulift.features import (FEATURE_MAP_SIZE, MAGIC, FeatureMap,
                               load_feature_map, save_feature_map)
from occulift.scenes import make_duo_scene, oracle_feature_map

from conftest import ring_camera


class TestFeatureMap:
    def test_rejects_non_3d(self):
        with pytest.raises(ValueError):
            FeatureMap(values=np.zeros((4, 4)))

    def test_lookup_at_map_resolution_is_exact(self, rng):
        vals = rng.random((8, 8, 3)).astype(np.float32)
        fmap = FeatureMap(values=vals)
        xs, ys = np.meshgrid(np.arange(8), np.arange(8))
        got = fmap.lookup(xs.ravel(), ys.ravel(), 8, 8)
        np.testing.assert_allclose(
            got, vals.reshape(-1, 3)[ys.ravel() * 8 + xs.ravel()], atol=1e-7)

    def test_lookup_bilinear_midpoint(self):
        vals = np.zeros((2, 2, 1), dtype=np.float32)
        vals[0, 0, 0], vals[0, 1, 0] = 1.0, 3.0
        vals[1, 0, 0], vals[1, 1, 0] = 5.0, 7.0
        fmap = FeatureMap(values=vals)
        # image = map resolution; the point equidistant from all 4 texels
        got = fmap.lookup(np.array([0.5]), np.array([0.5]), 2, 2)
        assert got[0, 0] == pytest.approx(4.0)

    def test_lookup_maps_pixel_centers_proportionally(self, rng):
        vals = rng.random((16, 16, 2)).astype(np.float32)
        fmap = FeatureMap(values=vals)
        px, py, W, H = 7, 9, 32, 24
        u = (px + 0.5) / W * 16 - 0.5
        v = (py + 0.5) / H * 16 - 0.5
        x0, y0 = int(np.floor(u)), int(np.floor(v))
        fx, fy = u - x0, v - y0
        expected = ((vals[y0, x0] * (1 - fx) + vals[y0, x0 + 1] * fx) * (1 - fy)
                    + (vals[y0 + 1, x0] * (1 - fx)
                       + vals[y0 + 1, x0 + 1] * fx) * fy)
        got = fmap.lookup(np.array([px]), np.array([py]), W, H)
        np.testing.assert_allclose(got[0], expected, atol=1e-6)

    def test_lookup_clamps_at_border(self, rng):
        vals = rng.random((4, 4, 1)).astype(np.float32)
        fmap = FeatureMap(values=vals)
        got = fmap.lookup(np.array([0, 99]), np.array([0, 99]), 100, 100)
        assert np.isfinite(got).all()


class TestFeatureFiles:
    def test_roundtrip_bit_exact(self, tmp_path, rng):
        vals = rng.standard_normal((12, 9, 5)).astype(np.float32)
        path = tmp_path / "f.olfeat"
        save_feature_map(FeatureMap(values=vals), path)
        loaded = load_feature_map(path)
        assert loaded.values.dtype == np.float32
        assert np.array_equal(loaded.values, vals)

    def test_header_layout(self, tmp_path):
        vals = np.zeros((3, 7, 2), dtype=np.float32)
        path = tmp_path / "f.olfeat"
        save_feature_map(FeatureMap(values=vals), path)
        raw = path.read_bytes()
        assert raw[:len(MAGIC)] == MAGIC
        import struct
        w, h, c = struct.unpack("<3I", raw[len(MAGIC):len(MAGIC) + 12])
        assert (w, h, c) == (7, 3, 2)
        assert len(raw) == len(MAGIC) + 12 + 3 * 7 * 2 * 4

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.olfeat"
        path.write_bytes(b"NOTFEAT" + b"\x00" * 32)
        with pytest.raises(ValueError):
            load_feature_map(path)


class TestOracleFeatureMap:
    def test_fixed_resolution_regardless_of_camera(self):
        scene = make_duo_scene()
        for w, h in ((64, 48), (100, 80)):
            cam = ring_camera(0.7, width=w, height=h)
            fmap = oracle_feature_map(scene, cam, channels=6)
            assert (fmap.height, fmap.width) == (FEATURE_MAP_SIZE,
                                                 FEATURE_MAP_SIZE)
            assert fmap.channels == 6

    def test_deterministic_given_seed(self):
        scene = make_duo_scene()
        cam = ring_camera(1.3, width=48, height=36)
        a = oracle_feature_map(scene, cam, channels=4, seed=9)
        b = oracle_feature_map(scene, cam, channels=4, seed=9)
        assert np.array_equal(a.values, b.values)

    def test_object_regions_have_distinct_features(self):
        scene = make_duo_scene()
        cam = ring_camera(1.5, width=64, height=48)
        fmap = oracle_feature_map(scene, cam, channels=8, seed=0)
        from occulift.scenes import render_ground_truth, resize_camera
        cam256 = resize_camera(cam, FEATURE_MAP_SIZE, FEATURE_MAP_SIZE)
        _, _, _, obj = render_ground_truth(scene, cam256, supersample=1)
        means = {k: fmap.values[obj == k].mean(axis=0)
                 for k in (1, 2) if (obj == k).any()}
        assert len(means) == 2
        assert np.linalg.norm(means[1] - means[2]) > 0.1
