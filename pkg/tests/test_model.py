import numpy as np
import pytest

from _oracles import max_relative_error
from osdet.geometry import BoundingBox, iou
from osdet.labels import LabelSpace
from osdet.model import (
    DetectorLayout,
    HeadGrads,
    anchor_grid,
    backward,
    bce_with_logits,
    decode_deltas,
    encode_deltas,
    forward,
    init_params,
    predict,
    rpn_targets,
    smooth_l1,
)
from osdet.shapes import SHAPE_CLASSES, render_image


@pytest.fixture
def tiny_setup():
    space = LabelSpace(("circle", "square"))
    layout = DetectorLayout(num_classes_total=space.total_logits, channels=(4, 6, 8),
                            hidden_dim=16, embed_dim=8)
    params = init_params(layout, np.random.default_rng(0))
    img = render_image(7, ("circle", "square"), height=32, width=32)
    return space, layout, params, img


class TestBoxCoding:
    def test_encode_decode_round_trip(self, rng):
        src = np.stack([[10, 10, 26, 26], [4, 8, 20, 18]]).astype(float)
        dst = np.stack([[12, 9, 30, 27], [6, 6, 18, 20]]).astype(float)
        deltas = encode_deltas(src, dst)
        back = decode_deltas(src, deltas, 64, 64)
        assert np.allclose(back, dst, atol=1e-9)

    def test_decode_clips_and_keeps_positive_area(self):
        src = np.array([[0.0, 0.0, 16.0, 16.0]])
        wild = np.array([[5.0, -5.0, 3.9, 3.9]])
        out = decode_deltas(src, wild, 64, 64)
        assert out[0, 0] >= 0 and out[0, 1] >= 0
        assert out[0, 2] <= 64 and out[0, 3] <= 64
        assert out[0, 2] > out[0, 0] and out[0, 3] > out[0, 1]


class TestAnchors:
    def test_grid_layout(self):
        anchors = anchor_grid(4, 4)
        assert anchors.shape == (16, 4)
        assert np.allclose(anchors[0], [-4.0, -4.0, 12.0, 12.0])
        # index 5 = row 1, col 1: center (12, 12), 16 px square
        assert np.allclose(anchors[5], [4.0, 4.0, 20.0, 20.0])
        widths = anchors[:, 2] - anchors[:, 0]
        assert np.allclose(widths, 16.0)

    def test_rpn_targets_force_match(self):
        anchors = anchor_grid(4, 4)
        target = np.array([[1.0, 1.0, 9.0, 9.0]])  # small target, best anchor forced positive
        obj, deltas = rpn_targets(anchors, target)
        assert (obj == 1).sum() >= 1
        pos = np.nonzero(obj == 1)[0]
        decoded = decode_deltas(anchors[pos], deltas[pos], 32, 32)
        assert np.allclose(decoded, np.repeat(target, len(pos), axis=0), atol=1e-6)

    def test_rpn_targets_empty(self):
        anchors = anchor_grid(4, 4)
        obj, deltas = rpn_targets(anchors, np.zeros((0, 4)))
        assert np.all(obj == 0)
        assert np.all(deltas == 0)


class TestForward:
    def test_shapes_and_norms(self, tiny_setup):
        space, layout, params, img = tiny_setup
        labels = np.array([0])
        boxes = np.array([[8.0, 8.0, 24.0, 24.0]])
        out = forward(params, layout, img, space, targets=(labels, boxes))
        p = out.proposals.shape[0]
        assert out.batch.logits.shape == (p, space.total_logits)
        assert out.batch.embeddings.shape == (p, layout.embed_dim)
        norms = np.linalg.norm(out.batch.embeddings, axis=1)
        assert np.max(np.abs(norms - 1.0)) < 1e-5
        assert out.roi_deltas.shape == (p, 4)
        assert out.batch.assigned_label.shape == (p,)

    def test_deterministic(self, tiny_setup):
        space, layout, params, img = tiny_setup
        t = (np.array([0]), np.array([[8.0, 8.0, 24.0, 24.0]]))
        a = forward(params, layout, img, space, targets=t)
        b = forward(params, layout, img, space, targets=t)
        assert np.array_equal(a.batch.logits, b.batch.logits)
        assert np.array_equal(a.proposals, b.proposals)

    def test_assignment_rule(self, tiny_setup):
        space, layout, params, img = tiny_setup
        gt_box = np.array([[8.0, 8.0, 24.0, 24.0]])
        fixed = np.array([
            [8.0, 8.0, 24.0, 24.0],     # IoU 1.0 -> circle
            [8.0, 12.0, 24.0, 28.0],    # shifted 4 px: IoU = 192/320 = 0.6
            [40.0, 40.0, 56.0, 56.0],   # IoU 0 -> background
        ])
        a = BoundingBox.from_array(fixed[1])
        b = BoundingBox.from_array(gt_box[0])
        expected_iou = iou(a, b)
        assert expected_iou == pytest.approx(0.6)
        out = forward(params, layout, img, space, targets=(np.array([0]), gt_box),
                      proposals_override=fixed)
        assert out.batch.assigned_label[0] == 0
        assert out.batch.assigned_iou[0] == pytest.approx(1.0)
        assert out.batch.assigned_label[1] == 0
        assert out.batch.assigned_iou[1] == pytest.approx(expected_iou)
        assert out.batch.assigned_label[2] == space.background_index
        assert np.all(out.assigned_box[2] == 0.0)

    def test_no_targets_means_all_background(self, tiny_setup):
        space, layout, params, img = tiny_setup
        out = forward(params, layout, img, space)
        assert np.all(out.batch.assigned_label == space.background_index)
        assert out.rpn_obj_target is None

    def test_proposal_count_limits(self, tiny_setup):
        space, layout, params, img = tiny_setup
        train_out = forward(params, layout, img, space,
                            targets=(np.zeros(0, dtype=int), np.zeros((0, 4))))
        eval_out = forward(params, layout, img, space)
        assert train_out.proposals.shape[0] <= layout.train_proposals
        assert eval_out.proposals.shape[0] <= layout.eval_proposals

    def test_indivisible_image_size_rejected(self, tiny_setup):
        space, layout, params, _ = tiny_setup
        bad = np.zeros((30, 30, 3))
        with pytest.raises(ValueError):
            forward(params, layout, bad, space)

    def test_low_iou_assignments_are_background(self, tiny_setup):
        space, layout, params, img = tiny_setup
        labels = np.array([1])
        boxes = np.array([[10.0, 10.0, 22.0, 22.0]])
        out = forward(params, layout, img, space, targets=(labels, boxes))
        low = out.batch.assigned_iou <= 0.5
        assert np.all(out.batch.assigned_label[low] == space.background_index)
        nonbg = out.batch.assigned_label != space.background_index
        assert np.all(out.batch.assigned_iou[nonbg] > 0.5)


class TestBackward:
    def test_matches_finite_differences_with_frozen_proposals(self, tiny_setup):
        space, layout, params, img = tiny_setup
        labels = np.array([0])
        boxes = np.array([[10.0, 10.0, 26.0, 26.0]])
        out = forward(params, layout, img, space, targets=(labels, boxes), want_cache=True)
        fixed = out.proposals.copy()
        rngs = [np.random.default_rng(s) for s in range(5)]
        wl = rngs[0].normal(size=out.batch.logits.shape)
        we = rngs[1].normal(size=out.batch.embeddings.shape)
        wd = rngs[2].normal(size=out.roi_deltas.shape)
        wo = rngs[3].normal(size=out.rpn_obj_logits.shape)
        wdd = rngs[4].normal(size=out.rpn_deltas.shape)

        def loss_of(p):
            o = forward(p, layout, img, space, targets=(labels, boxes), proposals_override=fixed)
            return float(
                (wl * o.batch.logits).sum()
                + (we * o.batch.embeddings).sum()
                + (wd * o.roi_deltas).sum()
                + (wo * o.rpn_obj_logits).sum()
                + (wdd * o.rpn_deltas).sum()
            )

        grads = backward(params, layout, out.cache,
                         HeadGrads(dlogits=wl, dembeddings=we, droi_deltas=wd,
                                   drpn_obj=wo, drpn_deltas=wdd))
        h = 1e-6
        sample_rng = np.random.default_rng(99)
        for key in params:
            flat = params[key].ravel()
            gflat = grads[key].ravel()
            for _ in range(3):
                i = int(sample_rng.integers(flat.size))
                old = flat[i]
                flat[i] = old + h
                fp = loss_of(params)
                flat[i] = old - h
                fm = loss_of(params)
                flat[i] = old
                fd = (fp - fm) / (2 * h)
                assert max_relative_error(np.array([gflat[i]]), np.array([fd]), floor=1e-3) < 1e-4, key


class TestPredict:
    def test_background_dominant_logits_give_no_detections(self, tiny_setup):
        space, layout, params, img = tiny_setup
        params = {k: v.copy() for k, v in params.items()}
        params["cls_w"][:] = 0.0
        params["cls_b"][:] = 0.0
        params["cls_b"][space.background_index] = 50.0
        assert predict(params, layout, img, space, 0.05, 0.5) == []

    def test_unknown_dominant_logits_emit_unknown(self, tiny_setup):
        space, layout, params, img = tiny_setup
        params = {k: v.copy() for k, v in params.items()}
        params["cls_w"][:] = 0.0
        params["cls_b"][:] = 0.0
        params["cls_b"][space.unknown_index] = 10.0
        dets = predict(params, layout, img, space, 0.5, 0.5)
        assert dets
        assert all(d.class_id == space.unknown_index for d in dets)
        assert all(d.score > 0.9 for d in dets)

    def test_never_emits_background(self, tiny_setup):
        space, layout, params, img = tiny_setup
        dets = predict(params, layout, img, space, 0.05, 0.5)
        assert all(d.class_id != space.background_index for d in dets)

    def test_allow_unknown_false_masks_unknown(self, tiny_setup):
        space, layout, params, img = tiny_setup
        params = {k: v.copy() for k, v in params.items()}
        params["cls_w"][:] = 0.0
        params["cls_b"][:] = 0.0
        params["cls_b"][space.unknown_index] = 10.0
        dets = predict(params, layout, img, space, 0.05, 0.5, allow_unknown=False)
        assert all(d.class_id != space.unknown_index for d in dets)

    def test_nms_applied_class_wise(self, tiny_setup):
        space, layout, params, img = tiny_setup
        dets = predict(params, layout, img, space, 0.05, 0.5)
        for i, a in enumerate(dets):
            for b in dets[i + 1 :]:
                if a.class_id == b.class_id:
                    assert iou(a.box, b.box) <= 0.5

    def test_threshold_validation(self, tiny_setup):
        space, layout, params, img = tiny_setup
        with pytest.raises(ValueError):
            predict(params, layout, img, space, 0.0, 0.5)
        with pytest.raises(ValueError):
            predict(params, layout, img, space, 0.5, 1.0)


class TestLossHelpers:
    def test_bce_matches_manual(self):
        z = np.array([0.0, 2.0, -2.0, 5.0])
        t = np.array([1.0, 0.0, 1.0, -1.0])  # last ignored
        loss, grad = bce_with_logits(z, t)
        p = 1 / (1 + np.exp(-z[:3]))
        manual = -np.mean(t[:3] * np.log(p) + (1 - t[:3]) * np.log(1 - p))
        assert loss == pytest.approx(manual, abs=1e-12)
        assert grad[3] == 0.0

    def test_bce_all_ignored(self):
        loss, grad = bce_with_logits(np.array([1.0]), np.array([-1.0]))
        assert loss == 0.0 and np.all(grad == 0)

    def test_smooth_l1_quadratic_and_linear_regions(self):
        pred = np.array([[0.5, 3.0]])
        target = np.zeros((1, 2))
        loss, grad = smooth_l1(pred, target)
        assert loss == pytest.approx((0.5 * 0.25 + 2.5) / 2)
        assert grad[0, 0] == pytest.approx(0.5 / 2)
        assert grad[0, 1] == pytest.approx(1.0 / 2)

    def test_smooth_l1_empty(self):
        loss, grad = smooth_l1(np.zeros((0, 4)), np.zeros((0, 4)))
        assert loss == 0.0 and grad.shape == (0, 4)
