import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hrfuser import tensor as T
from hrfuser.backbone import ModelConfig
from hrfuser.checks import ap_grid_errors
from hrfuser.detection import (
    COCO_THRESHOLDS,
    PRIOR_PROB,
    Detector,
    Head,
    HeadOutput,
    assign_targets,
    average_precision,
    compute_loss,
    decode,
    nms,
    read_boxes,
    write_boxes,
)
from hrfuser.oracles import ap_by_enumeration
from hrfuser.sensing import Box2D, iou
from hrfuser.tensor import ShapeError, Tensor


def make_head(cin=4, classes=2, seed=0):
    return Head(np.random.default_rng(seed), cin, classes)


# -- head ----------------------------------------------------------------------

def test_head_shapes_and_positive_distances():
    head = make_head()
    out = head(Tensor(np.random.default_rng(1).normal(size=(2, 4, 6, 5))))
    assert out.cls.shape == (2, 2, 6, 5)
    assert out.box.shape == (2, 4, 6, 5)
    assert out.ctr.shape == (2, 1, 6, 5)
    assert (out.box.data > 0).all()


def test_head_zero_input_gives_prior_logits():
    out = make_head()(Tensor(np.zeros((1, 4, 3, 3))))
    prior = -math.log((1 - PRIOR_PROB) / PRIOR_PROB)
    np.testing.assert_allclose(out.cls.data, prior)


def test_head_rejects_wrong_channels():
    with pytest.raises(ShapeError):
        make_head()(Tensor(np.zeros((1, 3, 4, 4))))


def test_head_gradcheck():
    head = make_head(cin=3, classes=2)
    x = Tensor(np.random.default_rng(2).normal(size=(1, 3, 4, 4)), requires_grad=True)
    boxes = [[Box2D(2.0, 3.0, 11.0, 13.0, label=1)]]

    def loss():
        return compute_loss(head(x), boxes)

    err = T.gradcheck(loss, head.parameters() + [x], rng=np.random.default_rng(0), budget=200)
    assert err < 1e-4


def test_detector_forward_shapes():
    det = Detector(ModelConfig(variant="tiny", modalities=("camera", "lidar")))
    rng = np.random.default_rng(0)
    inputs = {m: Tensor(rng.normal(size=(1, 3, 32, 32))) for m in ("camera", "lidar")}
    out = det(inputs)
    assert out.cls.shape == (1, 2, 8, 8)
    assert out.stride == 4


# -- targets and loss ------------------------------------------------------------

def test_assignment_prefers_smaller_box():
    big = Box2D(0, 0, 16, 16, label=0)
    small = Box2D(4, 4, 12, 12, label=1)
    tg = assign_targets([[big, small]], (4, 4), 4, 2)
    # pixel (1, 1) has center (6, 6), inside both
    assert tg.labels[0, 1, 1, 1] == 1 and tg.labels[0, 0, 1, 1] == 0
    np.testing.assert_allclose(tg.distances[0, :, 1, 1], [2, 2, 6, 6])
    assert tg.labels[0, 0, 0, 0] == 1


def test_center_on_box_edge_is_negative():
    # centers (2, 2) and (6, 6) lie on the first box's corners
    tg = assign_targets([[Box2D(2, 2, 6, 6)], [Box2D(2, 2, 6.5, 6.5)]], (2, 2), 4, 1)
    assert not tg.positive[0].any()
    assert tg.positive[1].tolist() == [[False, False], [False, True]]


def perfect_output(boxes, shape, stride=4, classes=2):
    h, w = shape
    tg = assign_targets([boxes], shape, stride, classes)
    cls = np.where(tg.labels > 0, 30.0, -30.0)
    dist = np.where(tg.positive[:, None], tg.distances, 1.0)
    with np.errstate(divide="ignore"):
        c = np.clip(tg.centerness, 1e-12, 1 - 1e-12)
        ctr = np.log(c) - np.log1p(-c)
    return HeadOutput(Tensor(cls), Tensor(dist), Tensor(ctr[:, None]), stride), tg


def test_perfect_prediction_has_near_zero_loss():
    boxes = [Box2D(3, 5, 25, 19, label=0), Box2D(14, 2, 30, 30, label=1)]
    out, tg = perfect_output(boxes, (8, 8))
    assert tg.positive.sum() > 10
    assert float(compute_loss(out, [boxes]).data) < 1e-3


def test_loss_without_objects_is_finite_and_classification_only():
    out = make_head()(Tensor(np.random.default_rng(0).normal(size=(1, 4, 5, 5))))
    loss = compute_loss(out, [[]])
    assert np.isfinite(loss.data)
    loss.backward()
    head_grad = out.box  # box branch receives no gradient without positives
    assert head_grad.grad is None or not np.any(head_grad.grad.data)


def test_loss_batch_mismatch():
    out = make_head()(Tensor(np.zeros((2, 4, 3, 3))))
    with pytest.raises(ShapeError):
        compute_loss(out, [[]])


def test_loss_decreases_monotonically_on_one_sample():
    head = make_head(cin=4, classes=2, seed=3)
    x = Tensor(np.random.default_rng(4).normal(size=(1, 4, 8, 8)))
    boxes = [[Box2D(3, 4, 20, 22, label=0), Box2D(16, 10, 31, 30, label=1)]]
    params = head.parameters()
    history = []
    for _ in range(50):
        head.zero_grad()
        loss = compute_loss(head(x), boxes)
        loss.backward()
        history.append(float(loss.data))
        for p in params:
            p.data -= 0.1 * p.grad.data
    assert all(b < a for a, b in zip(history, history[1:]))
    assert history[-1] < 0.85 * history[0]


# -- nms and decoding ----------------------------------------------------------------

def nms_by_scan(boxes, scores, thr):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    keep = []
    for i in order:
        a = Box2D(*boxes[i])
        if all(iou(a, Box2D(*boxes[k])) <= thr for k in keep):
            keep.append(i)
    return keep


def test_nms_identical_boxes_keep_higher_score():
    boxes = np.array([[0, 0, 10, 10], [0, 0, 10, 10.0]])
    assert nms(boxes, np.array([0.8, 0.9]), 0.5) == [1]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 12), st.sampled_from([0.0, 0.3, 0.5, 0.7, 1.0]))
def test_nms_matches_scan(seed, n, thr):
    rng = np.random.default_rng(seed)
    xy = rng.integers(0, 20, size=(n, 2)).astype(float)
    wh = rng.integers(1, 12, size=(n, 2)).astype(float)
    boxes = np.concatenate([xy, xy + wh], axis=1)
    scores = rng.integers(0, 5, size=n) / 4.0  # ties on purpose
    assert nms(boxes, scores, thr) == nms_by_scan(boxes.tolist(), scores.tolist(), thr)


def logit(p):
    return math.log(p / (1 - p))


def test_decode_two_identical_boxes():
    # two cells whose distances describe the same box [0, 0, 8, 4]
    cls = np.full((1, 1, 1, 2), -30.0)
    cls[0, 0, 0, 0], cls[0, 0, 0, 1] = logit(0.9), logit(0.8)
    box = np.zeros((1, 4, 1, 2))
    box[0, :, 0, 0] = [2, 2, 6, 2]
    box[0, :, 0, 1] = [6, 2, 2, 2]
    ctr = np.full((1, 1, 1, 2), 40.0)
    out = HeadOutput(Tensor(cls), Tensor(box), Tensor(ctr), 4)
    [dets] = decode(out, score_thresh=0.05, nms_iou=0.5)
    assert len(dets) == 1
    assert dets[0].score == pytest.approx(0.9)
    assert dets[0].as_array().tolist()[:4] == [0, 0, 8, 4]


def test_decode_threshold_above_all_scores_is_empty():
    out = make_head()(Tensor(np.random.default_rng(0).normal(size=(2, 4, 4, 4))))
    assert decode(out, score_thresh=0.999) == [[], []]


def test_decode_rejects_bad_thresholds():
    out = make_head()(Tensor(np.zeros((1, 4, 2, 2))))
    with pytest.raises(ValueError):
        decode(out, score_thresh=1.5)


def test_decode_max_dets():
    out = make_head()(Tensor(np.random.default_rng(0).normal(size=(1, 4, 8, 8))))
    [dets] = decode(out, score_thresh=0.0, nms_iou=1.0, max_dets=7)
    assert len(dets) == 7
    assert [d.score for d in dets] == sorted((d.score for d in dets), reverse=True)


# -- average precision ------------------------------------------------------------------

def gt(x0, y0, x1, y1, label=0):
    return Box2D(float(x0), float(y0), float(x1), float(y1), label=label)


def det(x0, y0, x1, y1, score, label=0):
    return Box2D(float(x0), float(y0), float(x1), float(y1), label=label, score=score)


def test_ap_perfect_detection():
    gts = [[gt(0, 0, 10, 10), gt(20, 20, 40, 40, 1)]]
    dets = [[det(0, 0, 10, 10, 0.9), det(20, 20, 40, 40, 0.8, 1)]]
    r = average_precision(dets, gts)
    assert r.ap == 1.0 and r.ap50 == 1.0 and r.ar == 1.0


def test_ap_no_detections():
    r = average_precision([[]], [[gt(0, 0, 10, 10)]])
    assert r.ap == 0.0 and r.ar == 0.0


def test_ap_swapped_scores_is_half():
    # the false positive outranks the only true positive
    gts = [[gt(0, 0, 10, 10)]]
    dets = [[det(50, 50, 60, 60, 0.9), det(0, 0, 10, 10, 0.8)]]
    assert average_precision(dets, gts).ap == pytest.approx(0.5)


def test_ap_one_third_iou():
    gts = [[gt(0, 0, 2, 2)]]
    dets = [[det(1, 0, 3, 2, 0.9)]]
    assert iou(dets[0][0], gts[0][0]) == pytest.approx(1 / 3)
    assert average_precision(dets, gts).ap == 0.0
    assert average_precision(dets, gts, iou_thresholds=[1 / 3]).ap == 1.0
    assert average_precision(dets, gts, iou_thresholds=[0.34]).ap == 0.0


def test_ap_area_buckets():
    gts = [[gt(0, 0, 40, 40), gt(100, 100, 220, 220)]]  # medium and large
    dets = [[det(0, 0, 40, 40, 0.9)]]
    r = average_precision(dets, gts)
    assert r.ap_m == 1.0
    assert r.ap_l == 0.0


def test_ap_length_mismatch():
    with pytest.raises(ValueError):
        average_precision([[]], [[], []])


def random_instance(rng, images=3, classes=2):
    gts, dets = [], []
    for _ in range(images):
        g, d = [], []
        for _ in range(rng.integers(0, 4)):
            x, y = rng.uniform(0, 80, 2)
            w, h = rng.uniform(5, 60, 2)
            g.append(gt(x, y, x + w, y + h, int(rng.integers(classes))))
        for _ in range(rng.integers(0, 6)):
            if g and rng.random() < 0.6:
                src = g[rng.integers(len(g))]
                jitter = rng.normal(0, 3, 4)
                coords = np.array([src.x_min, src.y_min, src.x_max, src.y_max]) + jitter
                coords[2:] = np.maximum(coords[2:], coords[:2] + 1)
                label = src.label
            else:
                x, y = rng.uniform(0, 80, 2)
                coords = [x, y, x + rng.uniform(5, 60), y + rng.uniform(5, 60)]
                label = int(rng.integers(classes))
            d.append(det(*coords, float(rng.random()), label))
        gts.append(g)
        dets.append(d)
    return dets, gts


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_ap_invariant_under_monotone_score_transform(seed):
    dets, gts = random_instance(np.random.default_rng(seed))
    moved = [[Box2D(b.x_min, b.y_min, b.x_max, b.y_max, b.label, b.score**3 * 0.5 + 0.1) for b in d] for d in dets]
    assert average_precision(dets, gts) == average_precision(moved, gts)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_removing_a_false_positive_never_lowers_ap(seed):
    dets, gts = random_instance(np.random.default_rng(seed))
    # detections that overlap nothing are false positives at every threshold
    stray = det(500, 500, 540, 540, float(np.random.default_rng(seed).random()))
    with_fp = [d + [stray] if i == 0 else d for i, d in enumerate(dets)]
    assert average_precision(dets, gts).ap >= average_precision(with_fp, gts).ap


def test_ap_matches_enumeration_on_exhaustive_grid():
    count, worst = ap_grid_errors()
    assert count == 7 * sum(5**n for n in range(5))
    assert worst < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_ap_matches_enumeration_on_random_instances(seed):
    dets, gts = random_instance(np.random.default_rng(seed))
    want_ap, want_ar = ap_by_enumeration(
        [[(b.x_min, b.y_min, b.x_max, b.y_max, b.label, b.score) for b in d] for d in dets],
        [[(b.x_min, b.y_min, b.x_max, b.y_max, b.label) for b in g] for g in gts],
        COCO_THRESHOLDS,
    )
    got = average_precision(dets, gts)
    assert got.ap == pytest.approx(want_ap, abs=1e-12)
    assert got.ar == pytest.approx(want_ar, abs=1e-12)


# -- text format ---------------------------------------------------------------------------

def test_box_text_round_trip(tmp_path):
    boxes = [[det(0.5, 1.25, 10, 20, 0.123456789, 1), gt(1, 2, 3, 4)], [], [det(5, 5, 6, 7, 1e-9)]]
    path = tmp_path / "boxes.txt"
    write_boxes(path, boxes, ["a", "b", "c"])
    back = read_boxes(path)
    assert set(back) == {"a", "c"}
    assert back["a"] == boxes[0]
    assert back["c"] == boxes[2]


def test_box_text_rejects_short_lines(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("0 1 - 1 2 3\n")
    with pytest.raises(ValueError, match="bad.txt:1"):
        read_boxes(path)
