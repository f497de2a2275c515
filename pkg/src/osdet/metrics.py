"""Detection metrics: per-class AP, mAP over ID classes, unknown-class AP,
and pseudo-label quality diagnostics.

AP uses the all-point interpolated area under the precision-recall curve at
a single IoU operating point (default 0.5). Matching is greedy by
descending score; each ground-truth box is matched at most once, to the
highest-IoU unmatched box strictly above the threshold.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import BoundingBox, Detection, iou
from .labels import LabelSpace


@dataclass
class EvalResult:
    per_class_ap: dict[int, float | None]
    map_k: float
    ap_u: float
    counts: dict[int, tuple[int, int, int]]  # class -> (tp, fp, fn)

    def to_dict(self, space: LabelSpace) -> dict:
        return {
            "map_k": self.map_k,
            "ap_u": self.ap_u,
            "per_class_ap": {
                space.class_name(c): ap for c, ap in sorted(self.per_class_ap.items())
            },
            "counts": {
                space.class_name(c): {"tp": t, "fp": f, "fn": n}
                for c, (t, f, n) in sorted(self.counts.items())
            },
        }

    def to_lines(self, space: LabelSpace) -> str:
        lines = [f"map_k {self.map_k!r}", f"ap_u {self.ap_u!r}"]
        for c, ap in sorted(self.per_class_ap.items()):
            value = "undefined" if ap is None else repr(ap)
            lines.append(f"ap_{space.class_name(c)} {value}")
        for c, (tp, fp, fn) in sorted(self.counts.items()):
            lines.append(f"counts_{space.class_name(c)} tp={tp} fp={fp} fn={fn}")
        return "\n".join(lines) + "\n"


@dataclass
class PseudoQuality:
    precision: float
    recall: float
    ood_contamination: float

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "ood_contamination": self.ood_contamination,
        }


def _match_class(
    dets: list[tuple[int, Detection]],
    gts: list[tuple[int, BoundingBox]],
    iou_thresh: float,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Greedy score-ordered matching within one class.

    ``dets`` and ``gts`` carry an image id as their first element. Returns
    (is_tp flags, scores) aligned with score-sorted detections, plus the
    ground-truth count.
    """
    order = sorted(
        range(len(dets)),
        key=lambda i: (-dets[i][1].score, dets[i][0], dets[i][1].box.x_min, dets[i][1].box.y_min),
    )
    gt_by_image: dict[int, list[BoundingBox]] = {}
    for img_id, box in gts:
        gt_by_image.setdefault(img_id, []).append(box)
    matched: dict[int, list[bool]] = {k: [False] * len(v) for k, v in gt_by_image.items()}
    is_tp = np.zeros(len(dets), dtype=bool)
    scores = np.zeros(len(dets))
    for rank, di in enumerate(order):
        img_id, det = dets[di]
        scores[rank] = det.score
        best_iou, best_j = iou_thresh, -1
        for j, gt_box in enumerate(gt_by_image.get(img_id, ())):
            if matched[img_id][j]:
                continue
            v = iou(det.box, gt_box)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0:
            matched[img_id][best_j] = True
            is_tp[rank] = True
    return is_tp, scores, len(gts)


def _ap_from_tp_flags(is_tp: np.ndarray, scores: np.ndarray, num_gt: int) -> float | None:
    if num_gt == 0:
        return None if is_tp.size == 0 else 0.0
    if is_tp.size == 0:
        return 0.0
    tp = np.cumsum(is_tp)
    fp = np.cumsum(~is_tp)
    # one operating point per distinct score threshold (last rank of a tie group)
    cut = np.nonzero(np.diff(scores))[0]
    pts = np.concatenate([cut, [is_tp.size - 1]])
    recall = tp[pts] / num_gt
    precision = tp[pts] / (tp[pts] + fp[pts])
    # all-point interpolation: running max of precision from the right
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([[0.0], precision])
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def average_precision(
    dets: Sequence[Detection],
    gts: Sequence[tuple[int, BoundingBox]],
    class_id: int,
    iou_thresh: float = 0.5,
    det_image_ids: Sequence[int] | None = None,
    gt_image_ids: Sequence[int] | None = None,
) -> float | None:
    """All-point interpolated AP for one class.

    ``gts`` are (class, box) pairs. Without image ids everything is treated
    as one image. Returns None (undefined) when the class has neither
    ground truth nor detections.
    """
    det_ids = list(det_image_ids) if det_image_ids is not None else [0] * len(dets)
    gt_ids = list(gt_image_ids) if gt_image_ids is not None else [0] * len(gts)
    cd = [(det_ids[i], d) for i, d in enumerate(dets) if d.class_id == class_id]
    cg = [(gt_ids[i], box) for i, (cls, box) in enumerate(gts) if cls == class_id]
    is_tp, scores, num_gt = _match_class(cd, cg, iou_thresh)
    return _ap_from_tp_flags(is_tp, scores, num_gt)


def evaluate(
    predictions: dict[int, list[Detection]],
    ground_truth: dict[int, list[tuple[int, BoundingBox]]],
    space: LabelSpace,
    iou_thresh: float = 0.5,
) -> EvalResult:
    """Per-class AP over a test set keyed by image id.

    Ground-truth OOD objects must already be relabeled ``unknown``.
    ``map_k`` averages ID classes with defined AP; ``ap_u`` is the AP of
    the merged unknown class.
    """
    if not ground_truth:
        raise ValueError("evaluate needs a non-empty test set")
    per_class_ap: dict[int, float | None] = {}
    counts: dict[int, tuple[int, int, int]] = {}
    for class_id in list(space.id_indices) + [space.unknown_index]:
        dets: list[tuple[int, Detection]] = []
        gts: list[tuple[int, BoundingBox]] = []
        for img_id, ds in predictions.items():
            dets.extend((img_id, d) for d in ds if d.class_id == class_id)
        for img_id, anns in ground_truth.items():
            gts.extend((img_id, box) for cls, box in anns if cls == class_id)
        is_tp, scores, num_gt = _match_class(dets, gts, iou_thresh)
        per_class_ap[class_id] = _ap_from_tp_flags(is_tp, scores, num_gt)
        tp = int(is_tp.sum())
        counts[class_id] = (tp, int(is_tp.size - tp), num_gt - tp)
    id_aps = [per_class_ap[c] for c in space.id_indices if per_class_ap[c] is not None]
    map_k = float(np.mean(id_aps)) if id_aps else 0.0
    ap_u = per_class_ap[space.unknown_index]
    return EvalResult(
        per_class_ap=per_class_ap,
        map_k=map_k,
        ap_u=float(ap_u) if ap_u is not None else 0.0,
        counts=counts,
    )


def pseudo_label_quality(
    pseudo: dict[int, list[Detection]],
    hidden: dict[int, list[tuple[int, BoundingBox]]],
    space: LabelSpace,
    iou_thresh: float = 0.5,
) -> PseudoQuality:
    """Precision/recall of ID-labeled pseudo boxes against hidden annotations,
    plus the fraction of them sitting on an OOD (unknown-labeled) object.

    Empty pseudo sets report precision 1 by convention; an image with no
    hidden ID objects contributes no recall denominator.
    """
    tp = 0
    n_pseudo_id = 0
    n_hidden_id = 0
    contaminated = 0
    for img_id, anns in hidden.items():
        id_gts = [(c, b) for c, b in anns if c in space.id_indices]
        n_hidden_id += len(id_gts)
        dets = [d for d in pseudo.get(img_id, []) if d.class_id in space.id_indices]
        n_pseudo_id += len(dets)
        # per-class greedy matching for precision/recall
        for class_id in space.id_indices:
            cd = [(0, d) for d in dets if d.class_id == class_id]
            cg = [(0, b) for c, b in id_gts if c == class_id]
            is_tp, _, _ = _match_class(cd, cg, iou_thresh)
            tp += int(is_tp.sum())
        # contamination: best-overlapping hidden object (any class) is OOD
        for d in dets:
            best_iou, best_cls = 0.0, None
            for cls, box in anns:
                v = iou(d.box, box)
                if v > best_iou:
                    best_iou, best_cls = v, cls
            if best_cls == space.unknown_index and best_iou > iou_thresh:
                contaminated += 1
    precision = tp / n_pseudo_id if n_pseudo_id else 1.0
    recall = tp / n_hidden_id if n_hidden_id else 1.0
    contamination = contaminated / n_pseudo_id if n_pseudo_id else 0.0
    return PseudoQuality(precision=precision, recall=recall, ood_contamination=contamination)
