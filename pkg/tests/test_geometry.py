import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsmil.geometry import (
    Box,
    BoxError,
    decode_target,
    decode_targets,
    encode_target,
    encode_targets,
    iou,
    iou_matrix,
    nms,
    smooth_l1,
)


def pixel_iou(a, b, size=24):
    """Count unit cells of an integer grid covered by each box."""
    grid_a = np.zeros((size, size), dtype=bool)
    grid_b = np.zeros((size, size), dtype=bool)
    grid_a[a[1]:a[3], a[0]:a[2]] = True
    grid_b[b[1]:b[3], b[0]:b[2]] = True
    return (grid_a & grid_b).sum() / (grid_a | grid_b).sum()


@st.composite
def int_boxes(draw, size=24):
    x1 = draw(st.integers(0, size - 1))
    y1 = draw(st.integers(0, size - 1))
    x2 = draw(st.integers(x1 + 1, size))
    y2 = draw(st.integers(y1 + 1, size))
    return (x1, y1, x2, y2)


@st.composite
def real_boxes(draw):
    x1 = draw(st.floats(-500, 500))
    y1 = draw(st.floats(-500, 500))
    w = draw(st.floats(0.5, 400))
    h = draw(st.floats(0.5, 400))
    return (x1, y1, x1 + w, y1 + h)


class TestIou:
    def test_identical(self):
        assert iou((0, 0, 5, 3), (0, 0, 5, 3)) == 1.0

    def test_disjoint(self):
        assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0

    def test_touching_edges_is_zero(self):
        assert iou((0, 0, 1, 1), (1, 0, 2, 1)) == 0.0

    def test_overlap_one_seventh(self):
        assert iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-15)
        assert pixel_iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-15)

    def test_degenerate(self):
        with pytest.raises(BoxError):
            iou((0, 0, 0, 1), (0, 0, 1, 1))

    @settings(max_examples=500, deadline=None)
    @given(int_boxes(), int_boxes())
    def test_matches_pixel_count(self, a, b):
        assert abs(iou(a, b) - pixel_iou(a, b)) < 1e-9

    @settings(max_examples=300, deadline=None)
    @given(real_boxes(), real_boxes())
    def test_symmetric_and_bounded(self, a, b):
        v = iou(a, b)
        assert v == iou(b, a)
        assert 0.0 <= v <= 1.0
        assert iou(a, a) == pytest.approx(1.0, abs=1e-12)

    def test_matrix_agrees_with_scalar(self):
        rng = np.random.default_rng(0)
        xy = rng.uniform(0, 50, size=(6, 2))
        a = np.column_stack([xy, xy + rng.uniform(1, 30, size=(6, 2))])
        m = iou_matrix(a, a[::-1])
        for i in range(6):
            for j in range(6):
                assert m[i, j] == pytest.approx(iou(a[i], a[::-1][j]), abs=1e-12)


class TestNms:
    def test_single(self):
        assert nms([(0, 0, 1, 1)], [0.5]) == [0]

    def test_identical_boxes(self):
        assert nms([(0, 0, 4, 4), (0, 0, 4, 4)], [0.8, 0.9], 0.5) == [1]

    def test_disjoint_in_score_order(self):
        assert nms([(0, 0, 1, 1), (5, 5, 6, 6)], [0.2, 0.7]) == [1, 0]

    def test_empty(self):
        assert nms([], []) == []

    def test_tie_prefers_lower_index(self):
        assert nms([(0, 0, 4, 4), (0, 0, 4, 4)], [0.5, 0.5]) == [0]

    def test_boundary_is_kept(self):
        # IoU exactly 0.5 is not above the threshold
        boxes = [(0, 0, 2, 1), (0, 0, 1, 1)]
        assert iou(*boxes) == 0.5
        assert nms(boxes, [0.9, 0.8], 0.5) == [0, 1]

    @pytest.mark.parametrize("t", [0.0, 1.0, -0.1])
    def test_bad_threshold(self, t):
        with pytest.raises(ValueError):
            nms([(0, 0, 1, 1)], [1.0], t)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(int_boxes(), min_size=1, max_size=8), st.randoms(use_true_random=False),
           st.floats(0.05, 0.95))
    def test_permutation_invariant(self, boxes, rnd, t):
        scores = [1.0 - i / 10 for i in range(len(boxes))]
        kept = [tuple(boxes[i]) for i in nms(boxes, scores, t)]
        perm = list(range(len(boxes)))
        rnd.shuffle(perm)
        pb = [boxes[i] for i in perm]
        ps = [scores[i] for i in perm]
        assert [tuple(pb[i]) for i in nms(pb, ps, t)] == kept

    @settings(max_examples=200, deadline=None)
    @given(st.lists(int_boxes(), min_size=1, max_size=8), st.floats(0.05, 0.95))
    def test_kept_boxes_do_not_overlap_beyond_threshold(self, boxes, t):
        scores = np.linspace(1, 0, len(boxes))
        kept = nms(boxes, scores, t)
        for i in kept:
            for j in kept:
                if i != j:
                    assert iou(boxes[i], boxes[j]) <= t
        # every dropped box is covered by some kept box
        for i in set(range(len(boxes))) - set(kept):
            assert any(iou(boxes[i], boxes[k]) > t for k in kept)


class TestRegression:
    def test_identity(self):
        assert encode_target((3, 4, 10, 9), (3, 4, 10, 9)) == (0.0, 0.0, 0.0, 0.0)

    def test_half_width_shift(self):
        t = encode_target((0, 0, 2, 2), (1, 0, 3, 2))
        assert t == pytest.approx((0.5, 0.0, 0.0, 0.0), abs=1e-15)

    def test_zero_offsets(self):
        assert decode_target((0, 0, 0, 0), (1, 2, 5, 8)) == pytest.approx((1, 2, 5, 8))

    def test_log2_doubles_width(self):
        b = decode_target((0, 0, math.log(2), 0), (2, 0, 6, 1))
        assert b == pytest.approx((0, 0, 8, 1), abs=1e-12)

    def test_clip_to_bounds(self):
        b = decode_target((0, 0, math.log(4), 0), (0, 0, 4, 4), bounds=(6, 6))
        assert b == pytest.approx((0, 0, 6, 4))

    @settings(max_examples=1000, deadline=None)
    @given(real_boxes(), real_boxes())
    def test_round_trip(self, p, g):
        back = decode_target(encode_target(p, g), p)
        assert np.allclose(back, g, rtol=0, atol=1e-9)

    def test_vectorized_round_trip(self):
        rng = np.random.default_rng(2)
        xy = rng.uniform(0, 100, size=(50, 2))
        p = np.column_stack([xy, xy + rng.uniform(1, 50, size=(50, 2))])
        g = np.column_stack([xy + 3, xy + 3 + rng.uniform(1, 50, size=(50, 2))])
        np.testing.assert_allclose(decode_targets(encode_targets(p, g), p), g, rtol=0, atol=1e-9)


class TestSmoothL1:
    @pytest.mark.parametrize("x, expected", [(0, 0), (1, 0.5), (-2, 1.5), (0.5, 0.125)])
    def test_values(self, x, expected):
        assert smooth_l1(x) == expected

    def test_branches_agree_at_one(self):
        assert 0.5 * 1.0 ** 2 == abs(1.0) - 0.5 == smooth_l1(1.0) == smooth_l1(-1.0)

    @settings(max_examples=300, deadline=None)
    @given(st.floats(-50, 50).filter(lambda x: abs(abs(x) - 1) > 1e-3))
    def test_even_and_derivative(self, x):
        assert smooth_l1(x) == smooth_l1(-x)
        h = 1e-6
        fd = (smooth_l1(x + h) - smooth_l1(x - h)) / (2 * h)
        analytic = x if abs(x) < 1 else math.copysign(1.0, x)
        assert abs(fd - analytic) < 1e-6
