import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

import ganshot.tensor_core as tc
from ganshot import data_io as dio
from ganshot import detector as det
from ganshot.boxes import BoundingBox, iou_matrix
from ganshot.tensor_core import Tensor


def random_box(rng, lo=0.02, hi=0.6):
    w, h = rng.uniform(lo, hi, size=2)
    return BoundingBox(rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2), w, h)


# -- default boxes -----------------------------------------------------------------

def test_default_box_count_for_32px():
    spec, defaults = det.build_ssd(num_classes=2, image_size=32)
    assert [(s.m, s.n) for s in spec.feature_shapes] == [(8, 8), (4, 4), (2, 2)]
    assert len(defaults) == 4 * (64 + 16 + 4) == 336
    assert [k for _, _, k in defaults.layout] == [4, 4, 4]


def test_64px_input_has_same_feature_grid():
    spec, defaults = det.build_ssd(num_classes=1, image_size=64)
    assert [(s.m, s.n) for s in spec.feature_shapes] == [(8, 8), (4, 4), (2, 2)]
    assert len(defaults) == 336


def test_unsupported_image_size():
    with pytest.raises(det.nn.SpecError):
        det.build_ssd(1, image_size=48)


def test_single_class_prediction_channels():
    spec, _ = det.build_ssd(num_classes=1)
    for head in spec.heads:
        assert head.output_shape[0] == 6 * spec.boxes_per_cell


def test_single_center_box():
    out = det.generate_default_boxes([det.FeatureMapShape(1, 1, 8)], [0.5], [1.0])
    np.testing.assert_allclose(out.boxes, [[0.5, 0.5, 0.5, 0.5]])


def test_two_by_two_centers():
    out = det.generate_default_boxes([det.FeatureMapShape(2, 2, 1)], [0.1], [1.0])
    np.testing.assert_allclose(out.boxes[:, :2], [[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75]])


def test_aspect_ratio_two():
    out = det.generate_default_boxes([det.FeatureMapShape(1, 1, 1)], [0.4], [2.0])
    _, _, w, h = out.boxes[0]
    assert w == pytest.approx(0.4 * math.sqrt(2), abs=1e-6)
    assert h == pytest.approx(0.4 / math.sqrt(2), abs=1e-6)
    assert w / h == pytest.approx(2.0)
    assert w == pytest.approx(0.5657, abs=1e-4) and h == pytest.approx(0.2828, abs=1e-4)


def test_default_boxes_are_clipped():
    out = det.generate_default_boxes([det.FeatureMapShape(3, 3, 1)], [0.9], [1.0, 3.0])
    corners = det.center_to_corners(out.boxes)
    assert corners.min() >= 0 and corners.max() <= 1


def test_default_box_argument_errors():
    with pytest.raises(ValueError):
        det.generate_default_boxes([det.FeatureMapShape(1, 1, 1)], [0.1, 0.2], [1.0])
    with pytest.raises(ValueError):
        det.generate_default_boxes([det.FeatureMapShape(1, 1, 1)], [0.1], [])
    with pytest.raises(ValueError):
        det.FeatureMapShape(0, 1, 1)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 6), st.integers(1, 6)), min_size=1, max_size=4),
       st.lists(st.floats(0.25, 4.0), min_size=1, max_size=4), st.booleans())
def test_default_box_count_formula(grids, ratios, extra):
    shapes = [det.FeatureMapShape(m, n, 1) for m, n in grids]
    scales = np.linspace(0.1, 0.9, len(shapes)).tolist()
    out = det.generate_default_boxes(shapes, scales, ratios, extra_square=extra)
    k = len(ratios) + extra
    assert len(out) == sum(m * n * k for m, n in grids)
    assert out.layout == [(m, n, k) for m, n in grids]


# -- offsets -----------------------------------------------------------------------

def test_encode_identity():
    d = BoundingBox(0.3, 0.6, 0.2, 0.1)
    assert det.encode_offsets(d, d) == (0.0, 0.0, 0.0, 0.0)


def test_encode_double_width():
    d = BoundingBox(0.5, 0.5, 0.2, 0.3)
    got = det.encode_offsets(BoundingBox(0.5, 0.5, 0.4, 0.3), d)
    np.testing.assert_allclose(got, (0.0, 0.0, math.log(2), 0.0), atol=1e-12)


def test_encode_rejects_degenerate_gt():
    with pytest.raises(ValueError):
        det.encode_offsets(BoundingBox(0.5, 0.5, 0.0, 0.1), BoundingBox(0.5, 0.5, 0.1, 0.1))


def test_encode_decode_round_trip():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        gt, d = random_box(rng), random_box(rng)
        back = det.decode_offsets(det.encode_offsets(gt, d), d)
        np.testing.assert_allclose(back.as_array(), gt.as_array(), atol=1e-6)


# -- matching ----------------------------------------------------------------------

def reference_match(gts, defaults, threshold):
    """Plain-loop matcher: greedy best pair first, then per-default threshold pass.

    The IoU table comes from ``iou_matrix`` so that exact ties (common with
    clipped defaults) resolve identically; IoU itself is checked elsewhere.
    """
    table = iou_matrix(np.array([b.as_array() for b, _ in gts]).reshape(-1, 4), defaults.boxes).tolist()
    boxes = defaults.boxes
    owner = [-1] * len(boxes)
    for k in range(len(boxes)):
        best, arg = -1.0, -1
        for g in range(len(gts)):
            if table[g][k] > best:
                best, arg = table[g][k], g
        if arg >= 0 and best >= threshold:
            owner[k] = arg
    free_g, free_d = set(range(len(gts))), set(range(len(boxes)))
    while free_g and free_d:
        best, pick = -2.0, None
        for g in sorted(free_g):
            for k in sorted(free_d):
                if table[g][k] > best:
                    best, pick = table[g][k], (g, k)
        g, k = pick
        owner[k] = g
        free_g.discard(g)
        free_d.discard(k)
    labels = [gts[o][1] + 1 if o >= 0 else 0 for o in owner]
    return np.array(labels), np.array(owner)


def test_no_gts_all_background():
    _, defaults = det.build_ssd(2)
    a = det.match_boxes([], defaults)
    assert a.num_matched == 0 and not a.targets.any()
    assert (a.gt_index == -1).all()


def test_coincident_gt_matched_at_high_threshold():
    _, defaults = det.build_ssd(2)
    a = det.match_boxes([(defaults.box(123), 1)], defaults, iou_threshold=0.99)
    assert a.labels[123] == 2
    assert a.num_matched == 1
    np.testing.assert_allclose(a.targets[123], 0, atol=1e-12)


def test_matcher_equals_exhaustive_reference():
    rng = np.random.default_rng(5)
    for scene in range(200):
        shapes = [det.FeatureMapShape(int(m), int(m), 1) for m in rng.integers(1, 8, size=rng.integers(1, 4))]
        scales = np.sort(rng.uniform(0.1, 0.9, len(shapes)))
        defaults = det.generate_default_boxes(shapes, scales, [1.0, 2.0, 0.5], extra_square=bool(scene % 2))
        defaults.boxes = defaults.boxes[:500]
        gts = [(random_box(rng), int(rng.integers(0, 3))) for _ in range(rng.integers(0, 11))]
        threshold = float(rng.uniform(0.2, 0.7))
        a = det.match_boxes(gts, defaults, threshold)
        labels, owner = reference_match(gts, defaults, threshold)
        np.testing.assert_array_equal(a.labels, labels)
        np.testing.assert_array_equal(a.gt_index, owner)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 10))
def test_every_gt_gets_a_default(seed, count):
    rng = np.random.default_rng(seed)
    _, defaults = det.build_ssd(2)
    gts = [(random_box(rng, 0.01, 0.9), 0) for _ in range(count)]
    a = det.match_boxes(gts, defaults, 0.5)
    assert set(a.gt_index[a.gt_index >= 0]) == set(range(count))


# -- loss ------------------------------------------------------------------------------

def loss_fixture(seed, num_gts=2):
    rng = np.random.default_rng(seed)
    defaults = det.generate_default_boxes([det.FeatureMapShape(3, 3, 1)], [0.4], [1.0, 2.0])
    assigns = [det.match_boxes([(random_box(rng, 0.2, 0.6), int(rng.integers(0, 2))) for _ in range(num_gts)],
                               defaults) for _ in range(2)]
    logits = Tensor(rng.normal(size=(2, len(defaults), 3)), requires_grad=True)
    offsets = Tensor(rng.normal(0, 0.3, size=(2, len(defaults), 4)), requires_grad=True)
    return defaults, assigns, logits, offsets


def test_perfect_predictions_near_zero_loss():
    defaults, assigns, _, _ = loss_fixture(0)
    labels = np.stack([a.labels for a in assigns])
    logits = np.full(labels.shape + (3,), -10.0)
    np.put_along_axis(logits, labels[..., None], 10.0, axis=-1)
    offsets = np.stack([a.targets for a in assigns])
    loss = det.multibox_loss(Tensor(logits), Tensor(offsets), assigns)
    assert 0 <= loss.item() < 0.01


def test_no_matches_gives_zero_localization():
    _, _, logits, offsets = loss_fixture(1)
    empty = [det.match_boxes([], det.DefaultBoxSet(np.zeros((logits.shape[1], 4)), []))] * 2
    loss, conf, loc = det.multibox_loss(logits, offsets, empty, return_parts=True)
    assert loc == 0.0 and loss.item() == 0.0
    grads = tc.backward(loss)
    assert not grads[offsets].any()


def test_hard_negative_ratio():
    _, assigns, logits, offsets = loss_fixture(2, num_gts=1)
    npos = sum(a.num_matched for a in assigns)
    _, conf, _ = det.multibox_loss(logits, offsets, assigns, return_parts=True)
    # mined negatives contribute to the gradient; unmined ones do not
    grads = tc.backward(det.multibox_loss(logits, offsets, assigns))[logits]
    touched = np.abs(grads).sum(-1) > 0
    labels = np.stack([a.labels for a in assigns])
    for i in range(2):
        pos = int((labels[i] > 0).sum())
        assert touched[i].sum() == pos + min(3 * pos, int((labels[i] == 0).sum()))
    assert npos > 0 and conf > 0


@pytest.mark.parametrize("seed", range(5))
def test_multibox_loss_gradient(seed):
    _, assigns, logits, offsets = loss_fixture(seed)
    errs = tc.grad_check(lambda a, b: det.multibox_loss(a, b, assigns), [logits, offsets])
    assert max(errs.values()) < 1e-3


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-0.3, 0.3), st.floats(-0.3, 0.3))
def test_loss_is_nonnegative_and_translation_consistent(seed, dx, dy):
    rng = np.random.default_rng(seed)
    defaults = det.generate_default_boxes([det.FeatureMapShape(3, 3, 1)], [0.3], [1.0, 2.0])
    gts = [(random_box(rng, 0.1, 0.4), 0) for _ in range(2)]
    moved_defaults = det.DefaultBoxSet(defaults.boxes + [dx, dy, 0, 0], defaults.layout)
    moved_gts = [(BoundingBox(b.cx + dx, b.cy + dy, b.w, b.h), c) for b, c in gts]
    # translation perturbs IoU by rounding error; skip exact ties and threshold hits it could flip
    table = np.sort(iou_matrix(np.array([b.as_array() for b, _ in gts]), defaults.boxes).ravel())
    overlaps = table[table > 0]
    assume(np.all(np.diff(overlaps) > 1e-9) and np.all(np.abs(overlaps - 0.5) > 1e-9))
    a1 = det.match_boxes(gts, defaults)
    a2 = det.match_boxes(moved_gts, moved_defaults)
    np.testing.assert_allclose(a1.targets, a2.targets, atol=1e-9)
    logits = Tensor(rng.normal(size=(1, len(defaults), 2)))
    offsets = Tensor(rng.normal(size=(1, len(defaults), 4)))
    l1 = det.multibox_loss(logits, offsets, [a1]).item()
    l2 = det.multibox_loss(logits, offsets, [a2]).item()
    assert l1 >= 0
    assert l1 == pytest.approx(l2, rel=1e-5, abs=1e-6)


# -- network and inference -------------------------------------------------------------

def test_forward_shapes_and_softmax():
    spec, defaults = det.build_ssd(2, width=8)
    params = det.init_ssd(spec, 0)
    images = np.random.default_rng(0).uniform(size=(3, 3, 32, 32)).astype(np.float32)
    logits, offsets = det.ssd_forward(spec, params, Tensor(images), mode="eval")
    assert logits.shape == (3, 336, 3) and offsets.shape == (3, 336, 4)
    probs, boxes = det.predict(spec, params, defaults, images)
    assert probs.min() >= 0 and probs.max() <= 1
    np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-5)
    corners = det.center_to_corners(boxes)
    assert corners.min() >= -1e-9 and corners.max() <= 1 + 1e-9


def test_detect_structure():
    spec, defaults = det.build_ssd(2, width=8)
    params = det.init_ssd(spec, 1)
    image = np.random.default_rng(1).uniform(size=(3, 32, 32)).astype(np.float32)
    dets = det.detect(spec, params, defaults, image)
    assert len(dets) == len(defaults) * 2
    assert all(0 <= d.score <= 1 for d in dets)
    with pytest.raises(tc.DimensionError):
        det.detect(spec, params, defaults, image[:, :16, :16])


def test_flip_gts_mirrors_center():
    (b, c), = det.flip_gts([(BoundingBox(0.2, 0.3, 0.1, 0.2), 1)])
    assert (b.cx, b.cy, b.w, b.h, c) == pytest.approx((0.8, 0.3, 0.1, 0.2, 1))


def test_training_is_deterministic():
    scenes = dio.synth_scenes(range(8))
    images = dio.stack_images(scenes)
    spec, defaults = det.build_ssd(2, width=8)
    cfg = det.DetectorTrainConfig(epochs=1, batch_size=4)
    p1, h1 = det.train_detector(spec, defaults, images, [s.gts for s in scenes], 3, cfg)
    p2, h2 = det.train_detector(spec, defaults, images, [s.gts for s in scenes], 3, cfg)
    assert h1 == h2
    assert all(p1[n].data.tobytes() == p2[n].data.tobytes() for n in p1)


def test_empty_training_set():
    spec, defaults = det.build_ssd(2, width=8)
    with pytest.raises(ValueError):
        det.train_detector(spec, defaults, np.zeros((0, 3, 32, 32), np.float32), [], 0)


def test_trained_detector_localizes_single_objects():
    params_scene = dio.SceneParams(count_range=(1, 1), size_range=(10, 16))
    train = dio.synth_scenes(range(500), params_scene)
    held_out = dio.synth_scenes(range(10_000, 10_200), params_scene)
    spec, defaults = det.build_ssd(2, width=16)
    params, history = det.train_detector(spec, defaults, dio.stack_images(train), [s.gts for s in train], 0,
                                         det.DetectorTrainConfig(epochs=8))
    assert history[-1] < history[0]
    probs, boxes = det.predict(spec, params, defaults, dio.stack_images(held_out))
    hits = 0
    for scene, p, b in zip(held_out, probs, boxes):
        k = np.unravel_index(np.argmax(p[:, 1:]), p[:, 1:].shape)[0]
        hits += iou_matrix(b[k:k + 1], scene.gts[0][0].as_array()[None])[0, 0] >= 0.5
    assert hits / len(held_out) >= 0.8
