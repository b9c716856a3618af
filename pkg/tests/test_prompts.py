import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from occulift.masks import EmptyMask, Mask, mask_iou
from occulift.prompts import (
    PromptSet,
    kmeans_centers,
    kmeans_objective,
    largest_component,
    make_prompts,
    min_bounding_rect,
)


def mask_from(binary):
    return Mask.from_binary(np.asarray(binary, dtype=bool))


def blob(h, w, cy, cx, r):
    yy, xx = np.mgrid[:h, :w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def brute_force_optimal_objective(pts, k):
    """Optimal k-clustering objective by exhaustive assignment enumeration."""
    n = len(pts)
    best = np.inf
    for assign in itertools.product(range(k), repeat=n):
        cost = 0.0
        for j in range(k):
            members = pts[np.array(assign) == j]
            if len(members):
                cost += (((members - members.mean(0)) ** 2).sum())
        best = min(best, cost)
    return best


class TestMaskIoU:
    def test_identical_masks(self):
        m = mask_from(blob(20, 20, 10, 10, 5))
        assert mask_iou(m, m) == 1.0

    def test_disjoint_masks(self):
        a = np.zeros((10, 10), bool)
        b = np.zeros((10, 10), bool)
        a[:3] = True
        b[7:] = True
        assert mask_iou(mask_from(a), mask_from(b)) == 0.0

    def test_half_overlapping_rectangles(self):
        a = np.zeros((10, 20), bool)
        b = np.zeros((10, 20), bool)
        a[:, 0:10] = True
        b[:, 5:15] = True
        assert mask_iou(mask_from(a), mask_from(b)) == pytest.approx(1 / 3)

    def test_both_empty_is_one(self):
        z = mask_from(np.zeros((5, 5), bool))
        assert mask_iou(z, z) == 1.0

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError):
            mask_iou(mask_from(np.zeros((5, 5), bool)),
                     mask_from(np.zeros((5, 6), bool)))

    def test_monotone_under_growing_intersection(self):
        base = np.zeros((10, 10), bool)
        base[2:8, 2:8] = True
        prev = 0.0
        for width in range(1, 7):
            other = np.zeros((10, 10), bool)
            other[2:8, 2:2 + width] = True
            v = mask_iou(mask_from(base), mask_from(other))
            assert v >= prev
            prev = v


class TestMaskType:
    def test_values_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            Mask(values=np.full((4, 4), 1.5))

    def test_binary_thresholding(self):
        m = Mask(values=np.array([[0.2, 0.5], [0.7, 0.49]]))
        assert np.array_equal(m.binary, [[False, True], [True, False]])


class TestMinBoundingRect:
    def test_single_pixel(self):
        a = np.zeros((10, 10), bool)
        a[7, 3] = True  # (x=3, y=7)
        assert min_bounding_rect(mask_from(a)) == (3, 7, 3, 7)

    def test_full_frame(self):
        assert min_bounding_rect(mask_from(np.ones((15, 20), bool))) == (0, 0, 19, 14)

    def test_empty_mask_raises(self):
        with pytest.raises(EmptyMask):
            min_bounding_rect(mask_from(np.zeros((5, 5), bool)))

    @given(arrays(bool, (12, 17), elements=st.booleans()))
    @settings(max_examples=80, deadline=None)
    def test_matches_exhaustive_scan(self, binary):
        if not binary.any():
            return
        # brute-force scan over every pixel
        x0 = y0 = 10**9
        x1 = y1 = -1
        for y in range(binary.shape[0]):
            for x in range(binary.shape[1]):
                if binary[y, x]:
                    x0, y0 = min(x0, x), min(y0, y)
                    x1, y1 = max(x1, x), max(y1, y)
        assert min_bounding_rect(mask_from(binary)) == (x0, y0, x1, y1)


class TestKMeans:
    def test_k1_is_snapped_centroid(self):
        a = blob(30, 30, 14, 16, 6)
        pts = kmeans_centers(mask_from(a), k=1, seed=0)
        assert len(pts) == 1
        x, y = pts[0]
        assert a[y, x]
        ys, xs = np.nonzero(a)
        assert abs(x - xs.mean()) <= 1 and abs(y - ys.mean()) <= 1

    def test_two_separated_blobs(self):
        a = blob(40, 80, 20, 15, 5) | blob(40, 80, 20, 62, 5)
        pts = kmeans_centers(mask_from(a), k=2, seed=1)
        xs = sorted(p[0] for p in pts)
        assert xs[0] < 40 < xs[1]
        for x, y in pts:
            assert a[y, x]

    def test_k_equals_foreground_returns_all(self):
        a = np.zeros((8, 8), bool)
        a[[1, 3, 6], [2, 5, 1]] = True
        pts = kmeans_centers(mask_from(a), k=3, seed=0)
        assert sorted(pts) == [(1, 6), (2, 1), (5, 3)]

    def test_fewer_pixels_than_k_returns_all(self):
        a = np.zeros((8, 8), bool)
        a[2, 3] = a[5, 5] = True
        pts = kmeans_centers(mask_from(a), k=5, seed=0)
        assert len(pts) == 2

    def test_empty_mask_raises(self):
        with pytest.raises(EmptyMask):
            kmeans_centers(mask_from(np.zeros((4, 4), bool)), k=2, seed=0)

    def test_deterministic_given_seed(self):
        a = blob(30, 40, 15, 20, 9)
        m = mask_from(a)
        assert kmeans_centers(m, 3, seed=7) == kmeans_centers(m, 3, seed=7)

    @given(st.integers(0, 500))
    @settings(max_examples=40, deadline=None)
    def test_points_always_on_foreground(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.random((16, 16)) < 0.3
        if not a.any():
            return
        pts = kmeans_centers(mask_from(a), k=3, seed=seed)
        for x, y in pts:
            assert a[y, x]

    @given(st.integers(0, 100))
    @settings(max_examples=25, deadline=None)
    def test_matches_brute_force_optimum_on_tiny_instances(self, seed):
        # <= 12 foreground pixels, k=2: Lloyd must reach the global optimum
        rng = np.random.default_rng(seed)
        n = int(rng.integers(5, 13))
        a = np.zeros((20, 20), bool)
        flat = rng.choice(400, size=n, replace=False)
        a[np.unravel_index(flat, a.shape)] = True
        ys, xs = np.nonzero(a)
        pts = np.stack([xs, ys], -1).astype(float)

        c = np.asarray(kmeans_centers(mask_from(a), k=2, seed=seed, snap=False))
        achieved = kmeans_objective(pts, c)
        optimal = brute_force_optimal_objective(pts, 2)
        assert achieved == pytest.approx(optimal, rel=1e-9, abs=1e-9)


class TestLargestComponent:
    def test_keeps_biggest_island(self):
        a = np.zeros((10, 10), bool)
        a[1:3, 1:3] = True  # 4 px
        a[6:9, 6:9] = True  # 9 px
        kept = largest_component(a)
        assert kept.sum() == 9
        assert kept[7, 7] and not kept[1, 1]

    def test_diagonal_pixels_are_separate(self):
        a = np.zeros((5, 5), bool)
        a[1, 1] = a[2, 2] = True
        assert largest_component(a).sum() == 1

    def test_empty_stays_empty(self):
        assert not largest_component(np.zeros((4, 4), bool)).any()


class TestMakePrompts:
    def test_single_blob_prompt(self):
        a = blob(40, 40, 20, 20, 8)
        p = make_prompts(mask_from(a), k=3, seed=0, view_id=2)
        assert p.view_id == 2
        assert len(p.points) == 3
        for x, y in p.points:
            assert a[y, x]
        assert p.box == min_bounding_rect(mask_from(a))

    def test_degenerate_two_pixel_mask(self):
        a = np.zeros((10, 10), bool)
        a[4, 4] = a[4, 5] = True
        p = make_prompts(mask_from(a), k=3, seed=0, view_id=0)
        assert len(p.points) == 2
        assert p.box == (4, 4, 5, 4)

    def test_empty_mask_propagates(self):
        with pytest.raises(EmptyMask):
            make_prompts(mask_from(np.zeros((6, 6), bool)), k=3, seed=0, view_id=0)

    def test_stray_islands_filtered_before_prompting(self):
        a = blob(40, 40, 20, 13, 7)
        a[2, 35] = True  # stray false positive far from the blob
        p = make_prompts(mask_from(a), k=3, seed=0, view_id=0)
        assert p.box[2] < 30  # box ignores the stray pixel

    def test_point_outside_box_rejected(self):
        with pytest.raises(ValueError):
            PromptSet(points=((9, 9),), box=(0, 0, 5, 5), view_id=0)
