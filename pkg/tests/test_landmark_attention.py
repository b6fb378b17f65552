"""Interest points, thresholding, heatmaps, downsampling and feature gating."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oadn.autodiff import Tensor, global_avg_pool
from oadn.autodiff.tensor import ShapeError
from oadn.landmarks import (
    NUM_LANDMARKS,
    NUM_POINTS,
    AttentionStack,
    InterestPointSet,
    LandmarkSet,
    MappingError,
    PointMappingSpec,
    attention_for,
    build_attention_stack,
    compute_interest_points,
    default_mapping,
    default_sigma,
    downsample_map,
    flip_interest_points,
    format_landmarks,
    modulate,
    parse_landmarks,
    parse_point_mapping,
    render_heatmap,
    threshold_points,
)
from oadn.synth import FLIP_PERMUTATION, make_record


def random_landmarks(rng, size=(64, 64), conf=None):
    pts = np.empty((NUM_LANDMARKS, 3))
    pts[:, 0] = rng.uniform(0, size[1] - 1, NUM_LANDMARKS)
    pts[:, 1] = rng.uniform(0, size[0] - 1, NUM_LANDMARKS)
    pts[:, 2] = rng.uniform(0, 1, NUM_LANDMARKS) if conf is None else conf
    return LandmarkSet(pts, size)


def bilinear_sample(img, y, x):
    """Scalar bilinear lookup with edge clamping."""
    h, w = img.shape
    y = min(max(y, 0.0), h - 1.0)
    x = min(max(x, 0.0), w - 1.0)
    y0, x0 = int(math.floor(y)), int(math.floor(x))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    fy, fx = y - y0, x - x0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


class TestLandmarkSet:
    def test_shape_checked(self):
        with pytest.raises(ValueError):
            LandmarkSet(np.zeros((67, 3)), (64, 64))

    @pytest.mark.parametrize("c", [-0.01, 1.01])
    def test_conf_range(self, c):
        pts = np.zeros((NUM_LANDMARKS, 3))
        pts[5, 2] = c
        with pytest.raises(ValueError):
            LandmarkSet(pts, (64, 64))

    def test_coordinates_outside_image_allowed(self):
        pts = np.zeros((NUM_LANDMARKS, 3))
        pts[0, :2] = (-5.0, 80.0)
        LandmarkSet(pts, (64, 64))

    def test_text_round_trip(self):
        rng = np.random.default_rng(0)
        recs = [random_landmarks(rng).points for _ in range(3)]
        text = format_landmarks(recs)
        assert text.count("\n\n") == 2
        assert len([ln for ln in text.splitlines() if ln]) == 3 * NUM_LANDMARKS
        np.testing.assert_array_equal(parse_landmarks(text), np.stack(recs))

    def test_text_bad_row_count(self):
        with pytest.raises(ValueError):
            parse_landmarks("1 2 0.5\n" * 67)


class TestPointMapping:
    def test_default_layout(self):
        m = default_mapping()
        kinds = [k for k, _ in m.rows]
        assert len(m.rows) == NUM_POINTS
        assert kinds.count("select") == 16 and kinds.count("recompute") == 8

    def test_flip_table_is_involution(self):
        flip = default_mapping().flip
        assert all(flip[flip[i]] == i for i in range(NUM_POINTS))

    def test_flip_table_agrees_with_landmark_mirror(self):
        # mirroring the 68 landmarks and recomputing must equal mirroring the 24 points
        rng = np.random.default_rng(1)
        for _ in range(10):
            lms = random_landmarks(rng)
            mirrored = lms.points[FLIP_PERMUTATION].copy()
            mirrored[:, 0] = 63 - mirrored[:, 0]
            direct = compute_interest_points(LandmarkSet(mirrored, (64, 64)))
            via_table = flip_interest_points(compute_interest_points(lms), 64)
            np.testing.assert_allclose(direct.points, via_table.points, atol=1e-12)

    def test_index_out_of_range(self):
        with pytest.raises(MappingError):
            parse_point_mapping("select 68\n")

    def test_unknown_kind(self):
        with pytest.raises(MappingError):
            PointMappingSpec((("average", (1, 2)),))

    def test_select_needs_one_index(self):
        with pytest.raises(MappingError):
            parse_point_mapping("select 1 2\n")

    def test_comments_ignored(self):
        m = parse_point_mapping("# header\nselect 3  # note\n\nrecompute 1 2\n")
        assert m.rows == (("select", (3,)), ("recompute", (1, 2)))


class TestComputeInterestPoints:
    def test_selected_point_copies_source(self):
        lms = random_landmarks(np.random.default_rng(2))
        pts = compute_interest_points(lms)
        for i, (kind, idx) in enumerate(default_mapping().rows):
            if kind == "select":
                np.testing.assert_array_equal(pts.points[i], lms.points[idx[0]])

    def test_recompute_min_conf_and_mean(self):
        pts = np.zeros((NUM_LANDMARKS, 3))
        pts[1] = (0.0, 0.0, 0.9)
        pts[2] = (10.0, 20.0, 0.4)
        mapping = parse_point_mapping("recompute 1 2\n")
        out = compute_interest_points(LandmarkSet(pts, (64, 64)), mapping)
        np.testing.assert_array_equal(out.points[0], [5.0, 10.0, 0.4])

    def test_all_visible_before_threshold(self):
        pts = compute_interest_points(random_landmarks(np.random.default_rng(3)))
        assert pts.visible.all() and len(pts) == NUM_POINTS


class TestThreshold:
    def _one(self, conf):
        return InterestPointSet(np.array([[1.0, 1.0, conf]]), np.array([True]))

    @pytest.mark.parametrize("conf, visible", [(0.7, True), (0.59, False), (0.6, True)])
    def test_examples(self, conf, visible):
        assert bool(threshold_points(self._one(conf), 0.6).visible[0]) is visible

    def test_coordinates_retained(self):
        out = threshold_points(self._one(0.1), 0.6)
        np.testing.assert_array_equal(out.points, [[1.0, 1.0, 0.1]])
        assert out.threshold == 0.6

    @pytest.mark.parametrize("T", [-0.1, 1.5])
    def test_range(self, T):
        with pytest.raises(ValueError):
            threshold_points(self._one(0.5), T)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.floats(0, 1), st.floats(0, 1))
    def test_monotone_and_inclusive(self, confs, t1, t2):
        lo, hi = min(t1, t2), max(t1, t2)
        pts = InterestPointSet(np.column_stack([np.zeros((len(confs), 2)), confs]), np.ones(len(confs), bool))
        v_lo = threshold_points(pts, lo).visible
        v_hi = threshold_points(pts, hi).visible
        assert not np.any(v_hi & ~v_lo)
        np.testing.assert_array_equal(v_lo, np.array(confs) >= lo)
        on_boundary = InterestPointSet(np.array([[0.0, 0.0, lo]]), np.array([True]))
        assert threshold_points(on_boundary, lo).visible[0]


class TestRenderHeatmap:
    def test_center_and_sigma_distance(self):
        m = render_heatmap((10, 12), (32, 32), 3.0)
        assert m[12, 10] == 1.0
        assert m[12, 13] == pytest.approx(math.exp(-0.5), abs=1e-15)
        assert m[12, 13] == pytest.approx(0.60653, abs=1e-5)

    def test_radial_symmetry(self):
        m = render_heatmap((16, 16), (33, 33), 4.0)
        np.testing.assert_array_equal(m, m[::-1, :])
        np.testing.assert_array_equal(m, m.T)
        assert m[16, 20] == m[20, 16] == m[12, 16]

    def test_matches_formula(self):
        x, y, s = 7.3, 4.8, 2.5
        m = render_heatmap((x, y), (12, 15), s)
        r, c = np.mgrid[0:12, 0:15]
        np.testing.assert_allclose(m, np.exp(-((c - x) ** 2 + (r - y) ** 2) / (2 * s**2)), rtol=1e-14)

    def test_outside_point_is_tail(self):
        m = render_heatmap((-40, -40), (16, 16), 2.0)
        assert m.max() < 1e-50

    def test_bounds(self):
        m = render_heatmap((3.5, 9.25), (20, 20), 2.0)
        assert np.all(m > 0) and np.all(m <= 1)

    def test_sigma_must_be_positive(self):
        with pytest.raises(ValueError):
            render_heatmap((1, 1), (4, 4), 0.0)

    def test_default_sigma_scales_with_size(self):
        assert default_sigma((224, 224)) == 7.0
        assert default_sigma((64, 64)) == pytest.approx(2.0)

    def test_default_sigma_follows_stride(self):
        assert default_sigma((224, 224), (14, 14)) == 7.0
        assert default_sigma((64, 64), (8, 8)) == 3.5
        assert default_sigma((32, 32), (4, 4)) == 3.5

    def test_stack_uses_stride_default(self):
        pts = threshold_points(compute_interest_points(make_record(0, 1).landmarks), 0.6)
        assert build_attention_stack(pts, (64, 64), (8, 8)).sigma == 3.5


class TestDownsample:
    def test_constant(self):
        np.testing.assert_allclose(downsample_map(np.full((64, 64), 0.3), (8, 8)), 0.3, rtol=0, atol=1e-15)

    def test_zero(self):
        assert np.all(downsample_map(np.zeros((64, 48)), (8, 6)) == 0)

    def test_4x4_to_2x2_oracle(self):
        img = np.arange(16.0).reshape(4, 4) ** 1.5
        out = downsample_map(img, (2, 2))
        for i in range(2):
            for j in range(2):
                y = (i + 0.5) * 2 - 0.5
                x = (j + 0.5) * 2 - 0.5
                assert out[i, j] == pytest.approx(bilinear_sample(img, y, x), abs=1e-12)

    def test_non_integer_ratio_oracle(self):
        img = np.random.default_rng(4).uniform(size=(10, 7))
        out = downsample_map(img, (4, 3))
        for i in range(4):
            for j in range(3):
                y = (i + 0.5) * 10 / 4 - 0.5
                x = (j + 0.5) * 7 / 3 - 0.5
                assert out[i, j] == pytest.approx(bilinear_sample(img, y, x), abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 20), st.integers(1, 20), st.integers(0, 2**31))
    def test_bounded_by_input_max(self, th, tw, seed):
        img = np.random.default_rng(seed).uniform(size=(20, 20))
        out = downsample_map(img, (th, tw))
        assert out.shape == (th, tw)
        assert out.min() >= 0 and out.max() <= img.max() + 1e-12

    def test_zero_target(self):
        with pytest.raises(ShapeError):
            downsample_map(np.ones((4, 4)), (0, 2))


class TestAttentionStack:
    def test_invisible_maps_zero_and_visible_nonzero(self):
        lms = random_landmarks(np.random.default_rng(5))
        pts = threshold_points(compute_interest_points(lms), 0.6)
        stack = build_attention_stack(pts, (64, 64), (8, 8), 2.0)
        assert stack.maps.shape == (NUM_POINTS, 8, 8)
        for vis, amap in zip(pts.visible, stack.maps):
            if vis:
                assert amap.max() > 0
            else:
                assert np.all(amap == 0)

    def test_all_below_threshold(self):
        lms = random_landmarks(np.random.default_rng(6), conf=0.2)
        stack = attention_for(lms, (8, 8), T=0.6)
        assert np.all(stack.maps == 0)

    def test_all_visible(self):
        lms = random_landmarks(np.random.default_rng(7), conf=0.9)
        stack = attention_for(lms, (8, 8), T=0.6, sigma=3.5)
        assert all(m.max() > 0 for m in stack.maps)
        assert stack.sigma == 3.5

    def test_values_in_unit_interval(self):
        stack = attention_for(random_landmarks(np.random.default_rng(8)), (8, 8), T=0.0)
        assert stack.maps.min() >= 0 and stack.maps.max() <= 1

    def test_invisible_coordinates_do_not_matter(self):
        rng = np.random.default_rng(9)
        lms = random_landmarks(rng)
        pts = threshold_points(compute_interest_points(lms), 0.6)
        moved = pts.points.copy()
        moved[~pts.visible, :2] += rng.normal(scale=20, size=(int((~pts.visible).sum()), 2))
        a = build_attention_stack(pts, (64, 64), (8, 8), 2.0).maps
        b = build_attention_stack(InterestPointSet(moved, pts.visible, 0.6), (64, 64), (8, 8), 2.0).maps
        np.testing.assert_array_equal(a, b)

    def test_half_occluded_fixture(self):
        from oadn.synth import Occluder, paint_occluder

        rec = make_record(3, seed=11)
        box = (0.0, 32.0, 63.0, 63.0)  # lower half of the image
        occ = paint_occluder(rec, Occluder("rectangle", "solid", box), np.random.default_rng(0))
        pts = threshold_points(compute_interest_points(occ.landmarks), 0.6)
        stack = build_attention_stack(pts, (64, 64), (8, 8), 2.0)
        inside = pts.points[:, 1] >= 32.0
        assert inside.any() and (~inside).any()
        assert all(np.all(stack.maps[i] == 0) for i in np.flatnonzero(inside))
        assert all(stack.maps[i].max() > 0 for i in np.flatnonzero(~inside))

    def test_flipped_stack_is_mirror(self):
        rec = make_record(0, seed=12)
        plain = attention_for(rec.landmarks, (8, 8), sigma=3.5).maps
        flipped = attention_for(rec.landmarks, (8, 8), sigma=3.5, flip=True).maps
        np.testing.assert_allclose(flipped, plain[list(default_mapping().flip)][..., ::-1], atol=1e-12)


class TestModulate:
    def test_zero_map_gives_zero_gap(self):
        F = Tensor(np.random.default_rng(0).uniform(size=(5, 4, 4)))
        maps = np.zeros((2, 4, 4))
        maps[1] = 0.5
        out = modulate(F, AttentionStack(maps, 1.0))
        assert len(out) == 2
        assert np.all(global_avg_pool(out[0]).data == 0)
        np.testing.assert_allclose(out[1].data, 0.5 * F.data)

    def test_unit_map_identity(self):
        F = np.random.default_rng(1).normal(size=(3, 2, 2))
        np.testing.assert_array_equal(modulate(Tensor(F), np.ones((1, 2, 2)))[0].data, F)

    def test_single_cell_value(self):
        out = modulate(Tensor(np.full((1, 1, 1), 2.0)), np.full((1, 1, 1), 0.5))
        assert out[0].data.item() == 1.0

    def test_batched(self):
        rng = np.random.default_rng(2)
        F = rng.normal(size=(2, 3, 4, 4))
        maps = rng.uniform(size=(2, 5, 4, 4))
        out = modulate(Tensor(F), maps)
        assert len(out) == 5
        np.testing.assert_allclose(out[3].data, F * maps[:, 3:4])

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            modulate(Tensor(np.ones((3, 4, 4))), np.ones((2, 5, 5)))
