import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import box_iou, brute_nms, central_difference, max_rel_error, softmax_ce
from scod.multibox import (REFERENCE_LAYOUT, Box, DefaultBoxBank, MatchResult, decode, decode_boxes,
                           detections_to_csv, encode, generate_default_boxes, hard_negatives, iou, iou_corners,
                           iou_matrix, match_and_encode, multibox_loss, nms, nms_arrays, to_center, to_corners)
from scod.network import Detection


def random_boxes(rng, n):
    c = np.column_stack([rng.uniform(0.1, 0.9, (n, 2)), rng.uniform(0.05, 0.5, (n, 2))])
    return c


def test_reference_count():
    assert len(generate_default_boxes(REFERENCE_LAYOUT)) == 8732


def test_first_map_alone():
    assert len(generate_default_boxes(REFERENCE_LAYOUT[:1])) == 38 * 38 * 4


def test_single_cell_map():
    bank = generate_default_boxes([(1, (1.0, 2.0, 0.5))])
    assert len(bank) == 4
    np.testing.assert_array_equal(bank.boxes[:, :2], 0.5)


def test_box_geometry_per_cell():
    bank = generate_default_boxes([(2, (1.0, 2.0, 0.5)), (1, (1.0,))], s_min=0.2, s_max=0.6)
    first = bank.boxes[:4]
    np.testing.assert_allclose(first[:, :2], 0.25)
    np.testing.assert_allclose(first[0, 2:], [0.2, 0.2])
    np.testing.assert_allclose(first[1, 2:], [0.2 * math.sqrt(2), 0.2 / math.sqrt(2)])
    np.testing.assert_allclose(first[3, 2:], [math.sqrt(0.2 * 0.6)] * 2)
    # row-major: second cell moves along x
    np.testing.assert_allclose(bank.boxes[4, :2], [0.75, 0.25])
    assert bank.layout == ((2, 4), (1, 2))


def test_layout_errors():
    with pytest.raises(ValueError, match="empty"):
        generate_default_boxes([])
    with pytest.raises(ValueError):
        generate_default_boxes([(0, (1.0,))])
    with pytest.raises(ValueError):
        generate_default_boxes([(2, (1.0,))], s_min=0.5, s_max=0.4)


@given(st.lists(st.tuples(st.integers(1, 12), st.integers(1, 5)), min_size=1, max_size=6))
def test_count_formula(layout):
    spec = [(f, tuple([1.0, 2.0, 0.5, 3.0, 1 / 3][:b])) for f, b in layout]
    assert len(generate_default_boxes(spec)) == sum(f * f * (b + 1) for f, b in layout)


def test_iou_examples():
    a = Box(0.5, 0.5, 0.2, 0.4)
    assert iou(a, a) == 1.0
    assert iou(Box(0.2, 0.2, 0.1, 0.1), Box(0.8, 0.8, 0.1, 0.1)) == 0.0
    assert iou_corners((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7, rel=1e-15)


@given(st.integers(0, 2**32 - 1))
def test_iou_properties(seed):
    rng = np.random.default_rng(seed)
    a, b = to_corners(random_boxes(rng, 2))
    m = iou_matrix([a], [b])[0, 0]
    assert m == iou_matrix([b], [a])[0, 0]
    assert 0.0 <= m <= 1.0
    assert m == pytest.approx(box_iou(a, b), abs=1e-15)
    assert m < 1.0 or np.allclose(a, b)


def test_box_validation():
    with pytest.raises(ValueError):
        Box(0.5, 0.5, 0.0, 0.1)
    with pytest.raises(ValueError):
        Box(0.5, 0.5, 0.1, -0.2)


def test_encoding_example():
    t = encode(np.array([0.5, 0.5, 0.2, 0.2]), np.array([0.55, 0.5, 0.2, 0.2]), (0.1, 0.2))
    np.testing.assert_allclose(t, [2.5, 0.0, 0.0, 0.0], atol=1e-12)
    g = decode(np.array([0.5, 0.5, 0.2, 0.2]), np.array([2.5, 0, 0, 0]), (0.1, 0.2))
    assert g[0] == pytest.approx(0.55, abs=1e-15)


@given(st.integers(0, 2**32 - 1))
def test_encode_decode_round_trip(seed):
    rng = np.random.default_rng(seed)
    anchors = random_boxes(rng, 20)
    gts = random_boxes(rng, 20)
    np.testing.assert_allclose(decode(anchors, encode(anchors, gts)), gts, atol=1e-9)
    t = rng.normal(size=(20, 4))
    np.testing.assert_allclose(encode(anchors, decode(anchors, t)), t, atol=1e-9)


def test_decode_boxes_checks():
    bank = generate_default_boxes([(2, (1.0,))])
    np.testing.assert_array_equal(decode_boxes(bank, np.zeros((len(bank), 4))), bank.boxes)
    with pytest.raises(ValueError, match="shape"):
        decode_boxes(bank, np.zeros((3, 4)))
    bad = np.zeros((len(bank), 4))
    bad[0, 0] = math.nan
    with pytest.raises(ValueError, match="finite"):
        decode_boxes(bank, bad)


def test_match_identical_anchor():
    bank = generate_default_boxes([(4, (1.0, 2.0))])
    target = Box(*bank.boxes[9])
    m = match_and_encode(bank, [(target, 1)])
    assert m.labels[9] == 2 and m.gt_index[9] == 0
    np.testing.assert_allclose(m.offsets[9], 0.0, atol=1e-12)


def test_best_anchor_rule_below_threshold():
    bank = DefaultBoxBank(np.array([[0.3, 0.5, 0.2, 0.2], [0.8, 0.8, 0.1, 0.1]]), ((1, 2),))
    # same-size box shifted along x so that inter / (0.08 - inter) = 0.45
    inter = 0.45 * 0.08 / 1.45
    d = 0.2 - inter / 0.2
    gt = Box.from_corners(0.2 + d, 0.4, 0.4 + d, 0.6)
    assert iou(gt, Box(*bank.boxes[0])) == pytest.approx(0.45, abs=1e-12)
    m = match_and_encode(bank, [(gt, 0)], 0.5)
    assert m.labels.tolist() == [1, 0]
    assert m.forced[0]


def test_match_rejects_bad_inputs():
    bank = generate_default_boxes([(2, (1.0,))])
    with pytest.raises(ValueError):
        match_and_encode(bank, [(Box(0.5, 0.5, 0.2, 0.2), 0)], iou_threshold=1.0)
    with pytest.raises(ValueError, match="class"):
        match_and_encode(bank, [(Box(0.5, 0.5, 0.2, 0.2), 3)], num_classes=3)


@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.floats(0.05, 0.95))
def test_every_gt_matched(seed, n, threshold):
    rng = np.random.default_rng(seed)
    bank = generate_default_boxes([(4, (1.0, 2.0, 0.5)), (2, (1.0,))])
    gts = [(Box(*b), int(rng.integers(0, 3))) for b in random_boxes(rng, n)]
    m = match_and_encode(bank, gts, threshold, num_classes=3)
    assert set(m.gt_index[m.gt_index >= 0].tolist()) == set(range(n))
    ious = iou_matrix(bank.corners, to_corners(np.array([g.as_array() for g, _ in gts])))
    for a in np.flatnonzero(m.labels):
        assert m.forced[a] or ious[a, m.gt_index[a]] >= threshold
        assert m.labels[a] == gts[m.gt_index[a]][1] + 1


def test_nms_examples():
    a = (Box.from_corners(0.1, 0.1, 0.5, 0.5), 0, 0.9)
    assert nms([a]) == [a]
    b = (Box.from_corners(0.12, 0.1, 0.52, 0.5), 0, 0.8)
    assert iou(a[0], b[0]) > 0.8 - 1e-9
    assert nms([a, b], 0.5) == [a]
    c = (Box.from_corners(0.35, 0.1, 0.75, 0.5), 0, 0.8)
    assert iou(a[0], c[0]) < 0.5
    assert nms([a, c], 0.5) == [a, c]
    assert nms([a, (b[0], 1, 0.8)], 0.5) == [a, (b[0], 1, 0.8)]


def test_nms_ties_and_topk():
    box = Box(0.5, 0.5, 0.2, 0.2)
    dets = [(box, 0, 0.5), (box, 0, 0.5), (Box(0.1, 0.1, 0.1, 0.1), 1, 0.7)]
    kept = nms_arrays(np.array([d[0].corners() for d in dets]), np.array([0, 0, 1]), np.array([0.5, 0.5, 0.7]))
    assert kept.tolist() == [2, 0]
    assert nms(dets, top_k=1) == [dets[2]]
    assert nms(dets, top_k=0) == []


@given(st.integers(0, 2**32 - 1), st.integers(1, 60), st.sampled_from([0.3, 0.5, 0.7]))
def test_nms_matches_brute_force(seed, n, threshold):
    rng = np.random.default_rng(seed)
    corners = to_corners(random_boxes(rng, n))
    classes = rng.integers(0, 3, n)
    scores = np.round(rng.uniform(size=n), 2)  # rounding forces ties
    got = nms_arrays(corners, classes, scores, threshold, 25).tolist()
    assert got == brute_nms(corners, classes, scores, threshold, 25)
    kept = got
    for i in kept:
        for j in kept:
            if i != j and classes[i] == classes[j]:
                assert box_iou(corners[i], corners[j]) <= threshold
    assert all(scores[a] >= scores[b] for a, b in zip(kept, kept[1:]))


def _match(labels, offsets=None):
    labels = np.asarray(labels)
    n = labels.size
    return MatchResult(labels, np.where(labels > 0, 0, -1), np.zeros((n, 4)) if offsets is None else offsets,
                       np.zeros(n, bool))


def test_loss_exact_limit():
    rng = np.random.default_rng(0)
    labels = np.array([2, 0, 1, 0, 0, 0, 0, 0])
    offsets = rng.normal(size=(8, 4))
    offsets[labels == 0] = 0
    conf = np.full((8, 3), -20.0)
    conf[np.arange(8), labels] = 20.0
    out = multibox_loss(conf, offsets.copy(), _match(labels, offsets))
    assert out.loc_loss == 0.0
    assert out.conf_loss < 1e-3
    assert out.loss >= 0


def test_hard_negative_count():
    rng = np.random.default_rng(1)
    labels = np.zeros(22, dtype=np.int64)
    labels[[3, 11]] = 1
    conf = rng.normal(size=(22, 2))
    mask = hard_negatives(conf, labels, 3.0)
    assert mask.sum() == 6 and not mask[[3, 11]].any()
    bg = -(conf[:, 0] - np.log(np.exp(conf).sum(axis=1)))
    neg_losses = sorted(bg[labels == 0], reverse=True)
    assert sorted(bg[mask], reverse=True) == neg_losses[:6]
    assert multibox_loss(conf, np.zeros((22, 4)), _match(labels)).n_neg == 6


def test_zero_positive_loss_against_independent_ce():
    rng = np.random.default_rng(2)
    conf = rng.normal(size=(10, 3))
    labels = np.zeros(10, dtype=np.int64)
    out = multibox_loss(conf, rng.normal(size=(10, 4)), _match(labels), neg_ratio=3.0)
    ce = sorted((softmax_ce(list(row), 0) for row in conf), reverse=True)[:3]
    assert out.n_pos == 0 and out.n_neg == 3
    assert out.loss == pytest.approx(sum(ce), rel=1e-12)
    assert out.loss > 0


def test_loss_errors():
    with pytest.raises(ValueError):
        multibox_loss(np.zeros((0, 3)), np.zeros((0, 4)), _match(np.zeros(0, dtype=np.int64)))
    with pytest.raises(ValueError, match="disagree"):
        multibox_loss(np.zeros((3, 3)), np.zeros((4, 4)), _match(np.zeros(3, dtype=np.int64)))


@pytest.mark.parametrize("seed", range(4))
def test_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    n = 12
    labels = rng.integers(0, 3, n)
    labels[:2] = [1, 2]
    offsets = np.where(labels[:, None] > 0, rng.normal(size=(n, 4)), 0.0)
    conf = rng.normal(size=(n, 3))
    loc = offsets + rng.normal(size=(n, 4)) * 1.5
    match = _match(labels, offsets)
    out = multibox_loss(conf, loc, match)
    f = lambda: multibox_loss(conf, loc, match).loss
    assert max_rel_error(out.grad_conf, central_difference(f, conf)) < 1e-4
    assert max_rel_error(out.grad_loc, central_difference(f, loc)) < 1e-4


def test_corner_center_round_trip():
    c = np.array([[0.5, 0.4, 0.2, 0.6]])
    np.testing.assert_allclose(to_center(to_corners(c)), c)


def test_detection_csv_clamps_to_pixels():
    det = Detection(Box(0.05, 0.5, 0.3, 0.2), 1, 0.75)
    text = detections_to_csv([("img", det)], ["a", "b"], (200, 100))
    assert text.splitlines() == ["image_id,class_name,score,xmin,ymin,xmax,ymax",
                                 "img,b,0.750000,0.00,40.00,40.00,60.00"]
