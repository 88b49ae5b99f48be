import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tfakit.boxes import (
    DELTA_CLAMP, BBox, decode_deltas, decode_reg_target, encode_deltas, encode_reg_target,
    iou, iou_matrix, nms,
)
from tfakit.exceptions import ValidationError


def test_iou_identity_and_disjoint():
    a = BBox(3, 4, 10, 7)
    assert iou(a, a) == 1.0
    assert iou(a, BBox(50, 50, 2, 2)) == 0.0


def test_iou_one_seventh():
    assert iou(BBox(0, 0, 2, 2), BBox(1, 1, 2, 2)) == pytest.approx(1 / 7, abs=1e-12)


def test_touching_edges_do_not_overlap():
    assert iou(BBox(0, 0, 2, 2), BBox(2, 0, 2, 2)) == 0.0


@pytest.mark.parametrize("bad", [(0, 0, 0, 1), (0, 0, 1, -1), (-1, 0, 1, 1), (0, float("nan"), 1, 1)])
def test_bbox_validation(bad):
    with pytest.raises(ValidationError):
        BBox(*bad)


def _box(rng):
    x, y = rng.uniform(0, 50, 2)
    return BBox(x, y, *rng.uniform(0.5, 40, 2))


def test_iou_matrix_matches_scalar(rng):
    a = [_box(rng) for _ in range(7)]
    b = [_box(rng) for _ in range(5)]
    m = iou_matrix(np.array([x.to_xyxy() for x in a]), np.array([x.to_xyxy() for x in b]))
    ref = np.array([[iou(x, y) for y in b] for x in a])
    np.testing.assert_allclose(m, ref, atol=1e-12)


def test_encode_hand_example():
    t = encode_reg_target(BBox(0, 0, 10, 10), BBox(0, 0, 20, 10))
    np.testing.assert_allclose(t, [0.5, 0.0, math.log(2), 0.0], atol=1e-12)


def test_encode_identity_is_zero():
    p = BBox(5, 6, 7, 8)
    assert encode_reg_target(p, p) == (0.0, 0.0, 0.0, 0.0)


def test_decode_hand_example_and_identity():
    out = decode_reg_target((0.5, 0.0, math.log(2), 0.0), BBox(0, 0, 10, 10))
    np.testing.assert_allclose(out.to_list(), [0, 0, 20, 10], atol=1e-9)
    p = BBox(1, 2, 3, 4)
    np.testing.assert_allclose(decode_reg_target((0, 0, 0, 0), p).to_list(), p.to_list())


def test_decode_clamps_extreme_log_size():
    out = decode_reg_target((0, 0, 50, 50), BBox(100, 100, 10, 10))
    assert all(math.isfinite(v) for v in out.to_list())
    raw = decode_deltas(np.array([0, 0, 50, 50.0]), np.array([100, 100, 110, 110.0]))
    assert raw[2] - raw[0] == pytest.approx(10 * math.exp(DELTA_CLAMP))


def test_encode_decode_roundtrip_bulk(rng):
    n = 10_000
    p = np.c_[rng.uniform(0, 500, (n, 2)), np.zeros((n, 2))]
    p[:, 2:] = p[:, :2] + rng.uniform(1, 200, (n, 2))
    # size ratios stay inside the decode clamp
    size = (p[:, 2:] - p[:, :2]) * np.exp(rng.uniform(-3, 3, (n, 2)))
    g = np.c_[rng.uniform(0, 500, (n, 2)), np.zeros((n, 2))]
    g[:, 2:] = g[:, :2] + size
    back = decode_deltas(encode_deltas(p, g), p)
    np.testing.assert_allclose(back, g, rtol=0, atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=4, max_size=4),
       st.lists(st.floats(0.1, 100), min_size=2, max_size=2))
def test_iou_symmetric_and_bounded(origin, size):
    a = BBox(origin[0], origin[1], *size)
    b = BBox(origin[2], origin[3], size[1], size[0])
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(iou(b, a), abs=1e-15)


class TestNMS:
    def test_duplicate_suppressed(self):
        boxes = np.array([[0, 0, 10, 10], [0, 0, 10, 10]], float)
        assert nms(boxes, np.array([0.8, 0.9]), 0.5).tolist() == [1]

    def test_threshold_is_strict(self):
        # IoU exactly 0.5 survives at nms_iou 0.5
        boxes = np.array([[0, 0, 10, 10], [0, 0, 10, 5]], float)
        assert nms(boxes, np.array([0.9, 0.8]), 0.5).tolist() == [0, 1]

    def test_equal_scores_keep_input_order(self):
        boxes = np.array([[0, 0, 10, 10], [1, 1, 11, 11], [50, 50, 60, 60]], float)
        assert nms(boxes, np.array([0.5, 0.5, 0.5]), 0.3).tolist() == [0, 2]

    def test_brute_force(self, rng):
        for _ in range(50):
            n = rng.integers(1, 12)
            xy = rng.uniform(0, 30, (n, 2))
            boxes = np.c_[xy, xy + rng.uniform(2, 20, (n, 2))]
            scores = rng.uniform(size=n)
            thr = rng.uniform(0.1, 0.9)
            alive, keep = list(np.argsort(-scores, kind="stable")), []
            while alive:
                i = alive.pop(0)
                keep.append(i)
                a = BBox.from_xyxy(boxes[i])
                alive = [j for j in alive if iou(a, BBox.from_xyxy(boxes[j])) <= thr]
            assert nms(boxes, scores, thr).tolist() == keep
