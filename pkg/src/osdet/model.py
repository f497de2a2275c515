"""A small two-stage detector over shape images.

Three conv blocks (each a stride-2 conv followed by a stride-1 conv, all
3x3 + ReLU) produce an 8x-downsampled feature map; a dense proposal head
predicts per-anchor objectness and box deltas (one square 16 px anchor per
cell); proposals are ROI-cropped to 4x4 with bilinear sampling and fed to
small MLPs for class logits, box refinement and a unit-normalized
embedding. Forward passes are pure functions of (params, image, targets);
the backward pass is hand-written and returns a gradient dict aligned with
the parameter dict.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .geometry import BoundingBox, Detection, iou_matrix, nms
from .labels import KIND_ID, LabelSpace
from .losses import ProposalBatch, restricted_softmax_matrix
from .shapes import ShapeImage

STRIDE = 8
ANCHOR_SIZE = 16.0
ROI_SIZE = 4
DELTA_CLAMP = 4.0  # limits exp() growth in box decoding

RPN_POSITIVE_IOU = 0.5
RPN_NEGATIVE_IOU = 0.3
RPN_FORCE_MATCH_IOU = 0.1
ASSIGN_IOU = 0.5

# backbone plan: (param prefix, stride); every conv is 3x3 pad 1 + ReLU
_CONV_PLAN = (
    ("conv1a", 2), ("conv1b", 1),
    ("conv2a", 2), ("conv2b", 1),
    ("conv3a", 2), ("conv3b", 1),
)


@dataclass(frozen=True)
class DetectorLayout:
    num_classes_total: int  # K + 2 logits
    channels: tuple[int, int, int] = (16, 32, 32)
    hidden_dim: int = 128
    embed_dim: int = 128
    train_proposals: int = 64
    eval_proposals: int = 32
    proposal_nms_iou: float = 0.7


@dataclass
class ForwardOutput:
    proposals: np.ndarray          # (P, 4) decoded, clipped boxes
    objectness: np.ndarray         # (P,) sigmoid scores
    batch: ProposalBatch
    roi_deltas: np.ndarray         # (P, 4) refinement deltas
    refined_boxes: np.ndarray      # (P, 4) decoded from proposals + deltas
    assigned_box: np.ndarray       # (P, 4) matched target box (zeros for background)
    rpn_obj_logits: np.ndarray     # (A,)
    rpn_deltas: np.ndarray         # (A, 4)
    rpn_obj_target: np.ndarray | None    # (A,) in {1, 0, -1=ignore}
    rpn_delta_target: np.ndarray | None  # (A, 4)
    cache: dict | None


@dataclass
class HeadGrads:
    """Upstream gradients flowing into the backward pass; None means zero."""

    dlogits: np.ndarray | None = None
    dembeddings: np.ndarray | None = None
    droi_deltas: np.ndarray | None = None
    drpn_obj: np.ndarray | None = None
    drpn_deltas: np.ndarray | None = None


# ----------------------------------------------------------------- params --


def _he_normal(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def init_params(layout: DetectorLayout, rng: np.random.Generator) -> dict[str, np.ndarray]:
    c1, c2, c3 = layout.channels
    roi_flat = c3 * ROI_SIZE * ROI_SIZE
    p = {
        "conv1a_w": _he_normal(rng, (c1, 3, 3, 3), 3 * 9),
        "conv1a_b": np.zeros(c1),
        "conv1b_w": _he_normal(rng, (c1, c1, 3, 3), c1 * 9),
        "conv1b_b": np.zeros(c1),
        "conv2a_w": _he_normal(rng, (c2, c1, 3, 3), c1 * 9),
        "conv2a_b": np.zeros(c2),
        "conv2b_w": _he_normal(rng, (c2, c2, 3, 3), c2 * 9),
        "conv2b_b": np.zeros(c2),
        "conv3a_w": _he_normal(rng, (c3, c2, 3, 3), c2 * 9),
        "conv3a_b": np.zeros(c3),
        "conv3b_w": _he_normal(rng, (c3, c3, 3, 3), c3 * 9),
        "conv3b_b": np.zeros(c3),
        "rpn_w": _he_normal(rng, (5, c3, 3, 3), c3 * 9),
        "rpn_b": np.zeros(5),
        "fc1_w": _he_normal(rng, (layout.hidden_dim, roi_flat), roi_flat),
        "fc1_b": np.zeros(layout.hidden_dim),
        "cls_w": _he_normal(rng, (layout.num_classes_total, layout.hidden_dim), layout.hidden_dim),
        "cls_b": np.zeros(layout.num_classes_total),
        "reg_w": _he_normal(rng, (4, layout.hidden_dim), layout.hidden_dim),
        "reg_b": np.zeros(4),
        "emb1_w": _he_normal(rng, (layout.hidden_dim, roi_flat), roi_flat),
        "emb1_b": np.zeros(layout.hidden_dim),
        "emb2_w": _he_normal(rng, (layout.embed_dim, layout.hidden_dim), layout.hidden_dim),
        "emb2_b": np.zeros(layout.embed_dim),
    }
    p["rpn_b"][0] = -2.0   # start with low objectness everywhere
    p["cls_b"][-1] = 2.0   # background prior
    return p


def clone_params(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in params.items()}


def zero_grads(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


# ------------------------------------------------------------- box algebra --


def anchor_grid(fh: int, fw: int) -> np.ndarray:
    ys, xs = np.meshgrid(np.arange(fh), np.arange(fw), indexing="ij")
    cx = (xs.ravel() + 0.5) * STRIDE
    cy = (ys.ravel() + 0.5) * STRIDE
    half = ANCHOR_SIZE / 2.0
    return np.stack([cx - half, cy - half, cx + half, cy + half], axis=1)


def encode_deltas(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Center/size deltas taking src boxes onto dst boxes."""
    sw = src[:, 2] - src[:, 0]
    sh = src[:, 3] - src[:, 1]
    scx = src[:, 0] + 0.5 * sw
    scy = src[:, 1] + 0.5 * sh
    dw = dst[:, 2] - dst[:, 0]
    dh = dst[:, 3] - dst[:, 1]
    dcx = dst[:, 0] + 0.5 * dw
    dcy = dst[:, 1] + 0.5 * dh
    return np.stack(
        [(dcx - scx) / sw, (dcy - scy) / sh, np.log(dw / sw), np.log(dh / sh)], axis=1
    )


def decode_deltas(src: np.ndarray, deltas: np.ndarray, width: float, height: float) -> np.ndarray:
    """Apply deltas to boxes and clip to the image, keeping >= 1 px sides."""
    sw = src[:, 2] - src[:, 0]
    sh = src[:, 3] - src[:, 1]
    scx = src[:, 0] + 0.5 * sw
    scy = src[:, 1] + 0.5 * sh
    d = np.clip(deltas, -DELTA_CLAMP, DELTA_CLAMP)
    cx = scx + d[:, 0] * sw
    cy = scy + d[:, 1] * sh
    w = sw * np.exp(d[:, 2])
    h = sh * np.exp(d[:, 3])
    x0 = cx - 0.5 * w
    y0 = cy - 0.5 * h
    x1 = cx + 0.5 * w
    y1 = cy + 0.5 * h
    x0 = np.clip(x0, 0.0, width - 1.0)
    y0 = np.clip(y0, 0.0, height - 1.0)
    x1 = np.clip(x1, x0 + 1.0, width)
    y1 = np.clip(y1, y0 + 1.0, height)
    return np.stack([x0, y0, x1, y1], axis=1)


# ------------------------------------------------------------ conv helpers --


def _conv_forward(x, w, b, stride, pad):
    cout, cin, kh, kw = w.shape
    _, h, wid = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wid + 2 * pad - kw) // stride + 1
    cols = kernels.im2col(x, kh, kw, stride, pad)
    out = (w.reshape(cout, -1) @ cols + b[:, None]).reshape(cout, oh, ow)
    return out, cols


def _conv_backward(dout, cols, x_shape, w, stride, pad):
    cout, cin, kh, kw = w.shape
    c, h, wid = x_shape
    dmat = dout.reshape(cout, -1)
    dw = (dmat @ cols.T).reshape(w.shape)
    db = dmat.sum(axis=1)
    dcols = w.reshape(cout, -1).T @ dmat
    dx = kernels.col2im(dcols, c, h, wid, kh, kw, stride, pad)
    return dx, dw, db


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ----------------------------------------------------------------- forward --


def _image_array(image) -> np.ndarray:
    pixels = image.pixels if isinstance(image, ShapeImage) else np.asarray(image, dtype=np.float64)
    return np.ascontiguousarray(pixels.transpose(2, 0, 1) - 0.5)


def _assign_proposals(proposals, target_labels, target_boxes, background_index):
    n = proposals.shape[0]
    if target_boxes is None or len(target_boxes) == 0:
        return (
            np.full(n, background_index, dtype=np.int64),
            np.zeros(n),
            np.zeros((n, 4)),
        )
    ious = iou_matrix(proposals, target_boxes)
    best = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best]
    labels = np.where(best_iou > ASSIGN_IOU, target_labels[best], background_index)
    assigned_box = np.where((best_iou > ASSIGN_IOU)[:, None], target_boxes[best], 0.0)
    return labels.astype(np.int64), best_iou, assigned_box


def rpn_targets(anchors: np.ndarray, target_boxes: np.ndarray | None):
    """Anchor objectness targets {1, 0, -1=ignore} and positive box deltas."""
    a = anchors.shape[0]
    obj = np.zeros(a)
    deltas = np.zeros((a, 4))
    if target_boxes is None or len(target_boxes) == 0:
        return obj, deltas
    ious = iou_matrix(anchors, target_boxes)
    best = ious.argmax(axis=1)
    best_iou = ious[np.arange(a), best]
    pos = best_iou > RPN_POSITIVE_IOU
    # guarantee at least one positive anchor per target
    force = ious.argmax(axis=0)
    for t, ai in enumerate(force):
        if ious[ai, t] > RPN_FORCE_MATCH_IOU:
            pos[ai] = True
            best[ai] = t
    obj = np.where(pos, 1.0, np.where(best_iou < RPN_NEGATIVE_IOU, 0.0, -1.0))
    if pos.any():
        deltas[pos] = encode_deltas(anchors[pos], target_boxes[best[pos]])
    return obj, deltas


def forward(
    params: dict[str, np.ndarray],
    layout: DetectorLayout,
    image,
    space: LabelSpace,
    targets: tuple[np.ndarray, np.ndarray] | None = None,
    num_proposals: int | None = None,
    want_cache: bool = False,
    supervised: bool = True,
    proposals_override: np.ndarray | None = None,
) -> ForwardOutput:
    """Run the detector on one image.

    ``targets`` is an optional ``(labels, boxes)`` pair of internal label
    ids and (T, 4) boxes (ground truth or pseudo-labels); when present,
    proposals are assigned to their best target (IoU > 0.5, else
    background) and anchor-level targets are produced for the proposal
    head. Deterministic: no randomness anywhere in the forward pass.

    Proposal boxes are constants as far as gradients are concerned (no
    backprop through box decoding); ``proposals_override`` pins them to a
    fixed set, which keeps finite-difference checks consistent with that
    convention.
    """
    x = _image_array(image)
    _, h, w = x.shape
    if h % STRIDE or w % STRIDE:
        raise ValueError(f"image sides must be divisible by {STRIDE}, got {h}x{w}")

    conv_steps = []  # (name, input_shape, cols, pre_activation) per conv
    act = x
    for name, stride in _CONV_PLAN:
        pre, cols = _conv_forward(act, params[f"{name}_w"], params[f"{name}_b"], stride, 1)
        conv_steps.append((name, act.shape, cols, pre))
        act = np.maximum(pre, 0.0)
    feat = act
    fh, fw = feat.shape[1:]

    rpn_out, cols_r = _conv_forward(feat, params["rpn_w"], params["rpn_b"], 1, 1)
    rpn_obj = rpn_out[0].ravel()
    rpn_deltas = rpn_out[1:].reshape(4, -1).T

    anchors = anchor_grid(fh, fw)
    decoded = decode_deltas(anchors, rpn_deltas, w, h)
    scores = _sigmoid(rpn_obj)

    limit = num_proposals or (layout.train_proposals if targets is not None else layout.eval_proposals)
    if proposals_override is not None:
        proposals = np.asarray(proposals_override, dtype=np.float64).reshape(-1, 4)
        prop_scores = np.zeros(proposals.shape[0])
    else:
        order = np.argsort(-scores, kind="stable")
        keep = kernels.nms_keep(decoded[order], layout.proposal_nms_iou)
        sel = order[keep][:limit]
        proposals = decoded[sel]
        prop_scores = scores[sel]

    roi = kernels.roi_gather(feat, proposals, ROI_SIZE, 1.0 / STRIDE)
    flat = roi.reshape(roi.shape[0], -1)
    pre_h = flat @ params["fc1_w"].T + params["fc1_b"]
    hidden = np.maximum(pre_h, 0.0)
    logits = hidden @ params["cls_w"].T + params["cls_b"]
    roi_deltas = hidden @ params["reg_w"].T + params["reg_b"]

    pre_e = flat @ params["emb1_w"].T + params["emb1_b"]
    e1 = np.maximum(pre_e, 0.0)
    z = e1 @ params["emb2_w"].T + params["emb2_b"]
    norms = np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-12)
    embeddings = z / norms

    refined = decode_deltas(proposals, roi_deltas, w, h)

    if targets is not None:
        t_labels, t_boxes = targets
        t_labels = np.asarray(t_labels, dtype=np.int64)
        t_boxes = np.asarray(t_boxes, dtype=np.float64).reshape(-1, 4)
        labels, assigned_iou, assigned_box = _assign_proposals(
            proposals, t_labels, t_boxes, space.background_index
        )
        obj_target, delta_target = rpn_targets(anchors, t_boxes)
    else:
        labels = np.full(proposals.shape[0], space.background_index, dtype=np.int64)
        assigned_iou = np.zeros(proposals.shape[0])
        assigned_box = np.zeros((proposals.shape[0], 4))
        obj_target, delta_target = None, None

    batch = ProposalBatch(
        logits=logits,
        embeddings=embeddings,
        assigned_label=labels,
        assigned_iou=assigned_iou,
        is_supervised_stage=supervised,
    )

    cache = None
    if want_cache:
        cache = {
            "conv_steps": conv_steps,
            "feat": feat, "cols_r": cols_r,
            "proposals": proposals, "flat": flat,
            "pre_h": pre_h, "hidden": hidden,
            "pre_e": pre_e, "e1": e1,
            "z": z, "norms": norms, "embeddings": embeddings,
        }

    return ForwardOutput(
        proposals=proposals,
        objectness=prop_scores,
        batch=batch,
        roi_deltas=roi_deltas,
        refined_boxes=refined,
        assigned_box=assigned_box,
        rpn_obj_logits=rpn_obj,
        rpn_deltas=rpn_deltas,
        rpn_obj_target=obj_target,
        rpn_delta_target=delta_target,
        cache=cache,
    )


def backward(
    params: dict[str, np.ndarray],
    layout: DetectorLayout,
    cache: dict,
    grads: HeadGrads,
) -> dict[str, np.ndarray]:
    """Backpropagate head gradients to a parameter-gradient dict."""
    g = zero_grads(params)
    flat = cache["flat"]
    n_roi = flat.shape[0]
    dflat = np.zeros_like(flat)

    dhidden = np.zeros_like(cache["hidden"])
    if grads.dlogits is not None and n_roi:
        dl = grads.dlogits
        g["cls_w"] += dl.T @ cache["hidden"]
        g["cls_b"] += dl.sum(axis=0)
        dhidden += dl @ params["cls_w"]
    if grads.droi_deltas is not None and n_roi:
        dd = grads.droi_deltas
        g["reg_w"] += dd.T @ cache["hidden"]
        g["reg_b"] += dd.sum(axis=0)
        dhidden += dd @ params["reg_w"]
    if dhidden.any():
        dpre_h = dhidden * (cache["pre_h"] > 0)
        g["fc1_w"] += dpre_h.T @ flat
        g["fc1_b"] += dpre_h.sum(axis=0)
        dflat += dpre_h @ params["fc1_w"]

    if grads.dembeddings is not None and n_roi:
        de = grads.dembeddings
        e = cache["embeddings"]
        dz = (de - e * np.sum(de * e, axis=1, keepdims=True)) / cache["norms"]
        g["emb2_w"] += dz.T @ cache["e1"]
        g["emb2_b"] += dz.sum(axis=0)
        de1 = dz @ params["emb2_w"]
        dpre_e = de1 * (cache["pre_e"] > 0)
        g["emb1_w"] += dpre_e.T @ flat
        g["emb1_b"] += dpre_e.sum(axis=0)
        dflat += dpre_e @ params["emb1_w"]

    feat = cache["feat"]
    dfeat = np.zeros_like(feat)
    if dflat.any():
        droi = dflat.reshape(n_roi, layout.channels[2], ROI_SIZE, ROI_SIZE)
        dfeat += kernels.roi_scatter(
            droi, cache["proposals"], feat.shape[1], feat.shape[2], 1.0 / STRIDE
        )

    if grads.drpn_obj is not None or grads.drpn_deltas is not None:
        fh, fw = feat.shape[1:]
        drpn = np.zeros((5, fh, fw))
        if grads.drpn_obj is not None:
            drpn[0] = grads.drpn_obj.reshape(fh, fw)
        if grads.drpn_deltas is not None:
            drpn[1:] = grads.drpn_deltas.T.reshape(4, fh, fw)
        dfeat_r, dw, db = _conv_backward(drpn, cache["cols_r"], feat.shape, params["rpn_w"], 1, 1)
        g["rpn_w"] += dw
        g["rpn_b"] += db
        dfeat += dfeat_r

    dact = dfeat
    for (name, in_shape, cols, pre), (_, stride) in zip(
        reversed(cache["conv_steps"]), reversed(_CONV_PLAN)
    ):
        dpre = dact * (pre > 0)
        dact, dw, db = _conv_backward(dpre, cols, in_shape, params[f"{name}_w"], stride, 1)
        g[f"{name}_w"] += dw
        g[f"{name}_b"] += db
    return g


# ----------------------------------------------------------------- predict --


def predict(
    params: dict[str, np.ndarray],
    layout: DetectorLayout,
    image,
    space: LabelSpace,
    score_threshold: float,
    nms_iou: float,
    allow_unknown: bool = True,
    num_proposals: int | None = None,
) -> list[Detection]:
    """Detections from one image: argmax class over non-background
    probabilities, refined boxes, score filtering and class-wise NMS.

    ``allow_unknown=False`` restricts the argmax to ID classes, matching a
    closed-set baseline whose classifier has no unknown output.
    """
    if not (0.0 < score_threshold < 1.0) or not (0.0 < nms_iou < 1.0):
        raise ValueError("score_threshold and nms_iou must lie in (0, 1)")
    out = forward(params, layout, image, space, targets=None, num_proposals=num_proposals)
    probs = restricted_softmax_matrix(out.batch.logits, KIND_ID, space)
    last = space.unknown_index + 1 if allow_unknown else space.unknown_index
    cand = probs[:, :last]
    if cand.shape[0] == 0:
        return []
    cls = cand.argmax(axis=1)
    score = cand[np.arange(cand.shape[0]), cls]
    dets = []
    for i in range(cand.shape[0]):
        if score[i] < score_threshold:
            continue
        dets.append(
            Detection(
                box=BoundingBox.from_array(out.refined_boxes[i]),
                class_id=int(cls[i]),
                score=float(score[i]),
            )
        )
    return nms(dets, nms_iou)


# ------------------------------------------------------------ loss helpers --


def bce_with_logits(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy over non-ignored entries (target >= 0)."""
    valid = targets >= 0
    n = int(valid.sum())
    grad = np.zeros_like(logits)
    if n == 0:
        return 0.0, grad
    z = logits[valid]
    t = targets[valid]
    loss = float(np.mean(np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))))
    grad[valid] = (_sigmoid(z) - t) / n
    return loss, grad


def smooth_l1(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean smooth-L1 over all coordinates; returns (loss, dpred)."""
    if pred.size == 0:
        return 0.0, np.zeros_like(pred)
    d = pred - target
    ad = np.abs(d)
    quad = ad < 1.0
    loss = float(np.mean(np.where(quad, 0.5 * d * d, ad - 0.5)))
    grad = np.where(quad, d, np.sign(d)) / d.size
    return loss, grad
