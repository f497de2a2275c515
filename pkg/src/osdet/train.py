"""Two-stage teacher-student training.

Stage 1 is fully supervised pre-training on labeled data; the result
becomes the teacher. Stage 2 draws mixed batches: the labeled half keeps
the supervised objective while the unlabeled half trains the student on
strongly augmented views against pseudo-labels the teacher produced on
weakly augmented views of the same images (shared flip, so both views live
in one box frame). The teacher tracks the student by EMA; the memory pool
is fed from both halves with detached student embeddings.

All randomness is drawn from streams keyed by (seed, iteration, role), so
runs are bit-reproducible and the supervised half of a step is unaffected
by whether the unsupervised half executes.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import config as config_mod
from .config import RunConfig
from .geometry import BoundingBox, Detection, iou
from .labels import LabelSpace
from .losses import (
    STAGE_SEMI,
    STAGE_SUP,
    LossResult,
    LossWeights,
    ProposalBatch,
    SupervisedTerms,
    UnsupervisedTerms,
    compose_total_loss,
    feature_contrastive_loss,
    plain_classification_loss,
    uncertainty_classification_loss,
)
from .model import (
    DetectorLayout,
    ForwardOutput,
    HeadGrads,
    backward,
    clone_params,
    encode_deltas,
    forward,
    init_params,
    predict,
    smooth_l1,
    bce_with_logits,
    zero_grads,
)
from .pool import EmbeddingPool
from .shapes import STRONG, WEAK, ShapeImage, augment
from .splits import DatasetItem
from . import checkpoint as ckpt_mod

# RNG stream roles
_ROLE_INIT = 0
_ROLE_LABELED_SAMPLE = 1
_ROLE_LABELED_AUG = 2
_ROLE_UNLABELED_SAMPLE = 3
_ROLE_UNLABELED_AUG = 4


class TrainingDiverged(RuntimeError):
    """Raised when the total loss stops being finite; carries the state."""

    def __init__(self, message: str, state: "TrainState"):
        super().__init__(message)
        self.state = state


@dataclass
class TrainState:
    student: dict[str, np.ndarray]
    teacher: dict[str, np.ndarray] | None
    pool: EmbeddingPool
    iteration: int
    momentum: dict[str, np.ndarray]
    seed: int


def layout_from_config(cfg: RunConfig, space: LabelSpace) -> DetectorLayout:
    return DetectorLayout(
        num_classes_total=space.total_logits,
        channels=tuple(cfg.channels),
        hidden_dim=cfg.hidden_dim,
        embed_dim=cfg.embed_dim,
        train_proposals=cfg.train_proposals,
        eval_proposals=cfg.eval_proposals,
        proposal_nms_iou=cfg.proposal_nms_iou,
    )


def _stream(seed: int, iteration: int, role: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, iteration, role)))


def alpha_t_schedule(iteration: int, cfg: RunConfig) -> float:
    """Linear decay of the contrastive weight over both stages, then clamped."""
    total = cfg.stage1_iters + cfg.stage2_iters
    if total <= 0:
        return cfg.alpha_t_init
    t = min(max(iteration, 0), total) / total
    return cfg.alpha_t_init + (cfg.alpha_t_final - cfg.alpha_t_init) * t


def ema_update(
    teacher: dict[str, np.ndarray], student: dict[str, np.ndarray], m: float
) -> dict[str, np.ndarray]:
    """Exponential moving average: theta_t' = m * theta_t + (1 - m) * theta_s."""
    if not (0.0 < m < 1.0):
        raise ValueError(f"ema momentum must lie in (0, 1), got {m}")
    if set(teacher) != set(student):
        raise ValueError("teacher/student parameter names differ")
    out = {}
    for k in teacher:
        if teacher[k].shape != student[k].shape:
            raise ValueError(f"shape mismatch for {k}: {teacher[k].shape} vs {student[k].shape}")
        out[k] = m * teacher[k] + (1.0 - m) * student[k]
    return out


def params_checksum(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k]).tobytes())
    return h.hexdigest()


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    momentum_buf: dict[str, np.ndarray],
    lr: float,
    mu: float,
    clip_norm: float,
):
    """In-place SGD with momentum and optional global-norm clipping.

    Reductions iterate keys in sorted order so results do not depend on
    dict insertion order (bit-reproducibility across checkpoint restores).
    """
    scale = 1.0
    if clip_norm > 0:
        total = np.sqrt(sum(float(np.sum(grads[k] * grads[k])) for k in sorted(grads)))
        if total > clip_norm:
            scale = clip_norm / total
    for k in sorted(params):
        buf = momentum_buf[k]
        buf *= mu
        buf += grads[k] * scale
        params[k] -= lr * buf


def generate_pseudo_labels(
    teacher: dict[str, np.ndarray],
    layout: DetectorLayout,
    image: ShapeImage,
    cfg: RunConfig,
    space: LabelSpace,
    aug_seed: int | None = None,
) -> list[Detection]:
    """Teacher detections on the weakly augmented image, confidence-thresholded
    and class-wise NMS-suppressed; unknown-class pseudo-labels are retained."""
    view = augment(image, WEAK, aug_seed) if aug_seed is not None else image
    return predict(
        teacher,
        layout,
        view,
        space,
        score_threshold=cfg.pseudo_threshold,
        nms_iou=cfg.pseudo_nms_iou,
        allow_unknown=cfg.enable_uc,
    )


def _targets_from_objects(objects, space: LabelSpace):
    if not objects:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 4))
    labels = np.array([space.index_of(name) for name, _ in objects], dtype=np.int64)
    boxes = np.stack([box.as_array() for _, box in objects])
    return labels, boxes


def _targets_from_detections(dets: list[Detection]):
    if not dets:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 4))
    labels = np.array([d.class_id for d in dets], dtype=np.int64)
    boxes = np.stack([d.box.as_array() for d in dets])
    return labels, boxes


@dataclass
class PoolCandidate:
    class_id: int
    vector: np.ndarray
    refined_box: np.ndarray
    target_box: np.ndarray


@dataclass
class BranchResult:
    terms: SupervisedTerms | UnsupervisedTerms
    image_grads: list[tuple[dict, HeadGrads]] = field(default_factory=list)
    pool_candidates: list[PoolCandidate] = field(default_factory=list)
    n_pseudo: int = 0


def _pool_candidates_from(out: ForwardOutput, space: LabelSpace, cfg: RunConfig):
    cands = []
    labels = out.batch.assigned_label
    rows = np.nonzero(labels != space.background_index)[0]
    for i in rows:
        class_id = int(labels[i])
        if class_id == space.unknown_index and not cfg.store_ood_in_pool:
            continue
        cands.append(
            PoolCandidate(
                class_id=class_id,
                vector=out.batch.embeddings[i].copy(),
                refined_box=out.refined_boxes[i].copy(),
                target_box=out.assigned_box[i].copy(),
            )
        )
    return cands


def _classification_loss(batch: ProposalBatch, space, cfg: RunConfig, stage: str) -> LossResult:
    if cfg.enable_uc:
        return uncertainty_classification_loss(batch, space, cfg.alpha, cfg.k_mine, stage)
    return plain_classification_loss(batch, space)


def supervised_branch(
    params, layout, space, cfg: RunConfig, prepared, pool_snapshot, alpha_t: float
) -> BranchResult:
    """Losses and head gradients for a batch of labeled (image, labels, boxes)."""
    n = max(1, len(prepared))
    outs = []
    v_rpn_cls = v_rpn_reg = v_roi_reg = v_uc = 0.0
    for img, labels, boxes in prepared:
        out = forward(params, layout, img, space, targets=(labels, boxes), want_cache=True,
                      supervised=True)
        hg = HeadGrads()

        v, g = bce_with_logits(out.rpn_obj_logits, out.rpn_obj_target)
        v_rpn_cls += v / n
        hg.drpn_obj = g / n

        pos = out.rpn_obj_target == 1.0
        if pos.any():
            v, g = smooth_l1(out.rpn_deltas[pos], out.rpn_delta_target[pos])
            v_rpn_reg += v / n
            full = np.zeros_like(out.rpn_deltas)
            full[pos] = g / n
            hg.drpn_deltas = full

        nonbg = np.nonzero(out.batch.assigned_label != space.background_index)[0]
        if nonbg.size:
            target_d = encode_deltas(out.proposals[nonbg], out.assigned_box[nonbg])
            v, g = smooth_l1(out.roi_deltas[nonbg], target_d)
            v_roi_reg += v / n
            full = np.zeros_like(out.roi_deltas)
            full[nonbg] = g / n
            hg.droi_deltas = full

        res = _classification_loss(out.batch, space, cfg, STAGE_SUP)
        v_uc += res.value / n
        hg.dlogits = cfg.beta * res.grad / n

        outs.append((out, hg))

    fc_value = _attach_contrastive(outs, cfg, pool_snapshot, alpha_t)
    terms = SupervisedTerms(rpn_cls=v_rpn_cls, rpn_reg=v_rpn_reg, roi_reg=v_roi_reg,
                            fc=fc_value, uc=v_uc)
    return BranchResult(
        terms=terms,
        image_grads=[(o.cache, hg) for o, hg in outs],
        pool_candidates=[c for o, _ in outs for c in _pool_candidates_from(o, space, cfg)]
        if cfg.enable_fc
        else [],
    )


def unsupervised_branch(
    params, layout, space, cfg: RunConfig, prepared, pool_snapshot, alpha_t: float
) -> BranchResult:
    """Losses/gradients for pseudo-labeled images: proposal-head objectness
    (only on images that received pseudo-labels), the contrastive term and
    the semi-stage classification term. No box-regression terms at all."""
    outs = []
    v_rpn_cls_sum = 0.0
    rpn_images = 0
    v_uc = 0.0
    n = max(1, len(prepared))
    n_pseudo = 0
    rpn_grads = []
    for img, labels, boxes in prepared:
        out = forward(params, layout, img, space, targets=(labels, boxes), want_cache=True,
                      supervised=False)
        hg = HeadGrads()
        n_pseudo += len(labels)
        if len(labels):
            v, g = bce_with_logits(out.rpn_obj_logits, out.rpn_obj_target)
            v_rpn_cls_sum += v
            rpn_images += 1
            rpn_grads.append(g)
        else:
            rpn_grads.append(None)

        res = _classification_loss(out.batch, space, cfg, STAGE_SEMI)
        v_uc += res.value / n
        hg.dlogits = cfg.beta * res.grad / n
        outs.append((out, hg))

    denom = max(1, rpn_images)
    for (out, hg), g in zip(outs, rpn_grads):
        if g is not None:
            hg.drpn_obj = g / denom

    fc_value = _attach_contrastive(outs, cfg, pool_snapshot, alpha_t)
    terms = UnsupervisedTerms(rpn_cls=v_rpn_cls_sum / denom, fc=fc_value, uc=v_uc)
    return BranchResult(
        terms=terms,
        image_grads=[(o.cache, hg) for o, hg in outs],
        pool_candidates=[c for o, _ in outs for c in _pool_candidates_from(o, space, cfg)]
        if cfg.enable_fc
        else [],
        n_pseudo=n_pseudo,
    )


def _attach_contrastive(outs, cfg: RunConfig, pool_snapshot, alpha_t: float) -> float:
    """Run the contrastive loss over the branch's concatenated proposals and
    fold its embedding gradients back into the per-image head grads."""
    if not cfg.enable_fc or not outs or not pool_snapshot:
        return 0.0
    batches = [o.batch for o, _ in outs]
    cat = ProposalBatch(
        logits=np.concatenate([b.logits for b in batches]),
        embeddings=np.concatenate([b.embeddings for b in batches]),
        assigned_label=np.concatenate([b.assigned_label for b in batches]),
        assigned_iou=np.concatenate([b.assigned_iou for b in batches]),
        is_supervised_stage=batches[0].is_supervised_stage,
    )
    res = feature_contrastive_loss(cat, pool_snapshot, cfg.tau, cfg.literal_denominator)
    if res.skipped:
        return 0.0
    start = 0
    for (out, hg), b in zip(outs, batches):
        rows = b.embeddings.shape[0]
        hg.dembeddings = alpha_t * res.grad[start : start + rows]
        start += rows
    return res.value


def _accumulate_grads(params, layout, image_grads) -> dict[str, np.ndarray]:
    total = zero_grads(params)
    for cache, hg in image_grads:
        g = backward(params, layout, cache, hg)
        for k in total:
            total[k] += g[k]
    return total


def _update_pool(state: TrainState, candidates: list[PoolCandidate]):
    for cand in candidates:
        try:
            box = BoundingBox.from_array(cand.refined_box)
            target = BoundingBox.from_array(cand.target_box)
        except ValueError:
            continue
        s_iou = iou(box, target)
        center = state.pool.center(cand.class_id)
        s_cos = 1.0 if center is None else float(np.dot(cand.vector, center))
        state.pool.try_insert(cand.class_id, cand.vector, s_iou, s_cos)


def train_step(
    state: TrainState,
    labeled_items: list[DatasetItem],
    unlabeled_items: list[DatasetItem] | None,
    cfg: RunConfig,
    layout: DetectorLayout,
    space: LabelSpace,
) -> dict:
    """One optimization step; returns the log record for this iteration."""
    it = state.iteration
    alpha_t = alpha_t_schedule(it, cfg)
    weights = LossWeights(
        alpha_t=alpha_t, beta=cfg.beta, lambda_=cfg.lambda_,
        tau=cfg.tau, alpha=cfg.alpha, k_mine=cfg.k_mine,
    )
    snapshot = state.pool.snapshot() if cfg.enable_fc else {}

    rng = _stream(state.seed, it, _ROLE_LABELED_SAMPLE)
    idx = rng.choice(len(labeled_items), size=min(cfg.batch_labeled, len(labeled_items)),
                     replace=False)
    aug_seeds = _stream(state.seed, it, _ROLE_LABELED_AUG).integers(0, 2**62, size=idx.size)
    sup_prepared = []
    for j, i in enumerate(idx):
        img = augment(labeled_items[int(i)].image, STRONG, int(aug_seeds[j]))
        labels, boxes = _targets_from_objects(img.objects, space)
        sup_prepared.append((img, labels, boxes))
    sup = supervised_branch(state.student, layout, space, cfg, sup_prepared, snapshot, alpha_t)

    unsup = None
    use_unsup = bool(unlabeled_items) and cfg.lambda_ > 0 and state.teacher is not None
    if use_unsup:
        rng = _stream(state.seed, it, _ROLE_UNLABELED_SAMPLE)
        uidx = rng.choice(len(unlabeled_items), size=min(cfg.batch_unlabeled, len(unlabeled_items)),
                          replace=False)
        useeds = _stream(state.seed, it, _ROLE_UNLABELED_AUG).integers(0, 2**62, size=uidx.size)
        unsup_prepared = []
        for j, i in enumerate(uidx):
            base = unlabeled_items[int(i)].image
            seed_j = int(useeds[j])
            weak_view = augment(base, WEAK, seed_j)
            strong_view = augment(base, STRONG, seed_j)  # same flip as the weak view
            pseudo = predict(
                state.teacher, layout, weak_view, space,
                score_threshold=cfg.pseudo_threshold, nms_iou=cfg.pseudo_nms_iou,
                allow_unknown=cfg.enable_uc,
            )
            labels, boxes = _targets_from_detections(pseudo)
            unsup_prepared.append((strong_view, labels, boxes))
        unsup = unsupervised_branch(state.student, layout, space, cfg, unsup_prepared,
                                    snapshot, alpha_t)

    total = compose_total_loss(sup.terms, unsup.terms if unsup else None, weights)
    if not np.isfinite(total):
        raise TrainingDiverged(f"loss became non-finite at iteration {it}", state)

    grads = _accumulate_grads(state.student, layout, sup.image_grads)
    if unsup is not None:
        g_unsup = _accumulate_grads(state.student, layout, unsup.image_grads)
        for k in grads:
            grads[k] += cfg.lambda_ * g_unsup[k]

    sgd_step(state.student, grads, state.momentum, cfg.lr, cfg.momentum, cfg.grad_clip)
    if state.teacher is not None:
        state.teacher = ema_update(state.teacher, state.student, cfg.ema_momentum)

    if cfg.enable_fc:
        _update_pool(state, sup.pool_candidates)
        if unsup is not None:
            _update_pool(state, unsup.pool_candidates)

    state.iteration += 1
    record = {
        "iteration": it,
        "alpha_t": alpha_t,
        "lr": cfg.lr,
        "loss_total": total,
        "sup_rpn_cls": sup.terms.rpn_cls,
        "sup_rpn_reg": sup.terms.rpn_reg,
        "sup_roi_reg": sup.terms.roi_reg,
        "sup_fc": sup.terms.fc,
        "sup_uc": sup.terms.uc,
        "unsup_rpn_cls": unsup.terms.rpn_cls if unsup else 0.0,
        "unsup_fc": unsup.terms.fc if unsup else 0.0,
        "unsup_uc": unsup.terms.uc if unsup else 0.0,
        "n_pseudo": unsup.n_pseudo if unsup else 0,
        "pool_occupancy": {str(c): n for c, n in state.pool.occupancy().items()},
    }
    return record


def init_state(cfg: RunConfig, space: LabelSpace) -> TrainState:
    layout = layout_from_config(cfg, space)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, _ROLE_INIT)))
    student = init_params(layout, rng)
    return TrainState(
        student=student,
        teacher=None,
        pool=EmbeddingPool(cfg.pool_capacity, cfg.s_iou_threshold, cfg.s_cos_threshold),
        iteration=0,
        momentum=zero_grads(student),
        seed=cfg.seed,
    )


def train_stage1(
    labeled_items: list[DatasetItem],
    cfg: RunConfig,
    space: LabelSpace,
    callback=None,
) -> tuple[TrainState, list[dict]]:
    """Supervised pre-training; the finished student is copied into the teacher."""
    if not labeled_items:
        raise ValueError("stage 1 needs a non-empty labeled set")
    layout = layout_from_config(cfg, space)
    state = init_state(cfg, space)
    records = []
    for _ in range(cfg.stage1_iters):
        rec = train_step(state, labeled_items, None, cfg, layout, space)
        records.append(rec)
        if callback:
            callback(state, rec)
    state.teacher = clone_params(state.student)
    return state, records


def train_stage2(
    state: TrainState,
    labeled_items: list[DatasetItem],
    unlabeled_items: list[DatasetItem],
    cfg: RunConfig,
    space: LabelSpace,
    callback=None,
) -> tuple[TrainState, list[dict]]:
    """Teacher-student training on mixed labeled + pseudo-labeled batches."""
    if state.teacher is None:
        raise ValueError("stage 2 requires a stage-1 state with a teacher")
    if not unlabeled_items:
        warnings.warn("unlabeled set is empty; stage 2 degenerates to supervised-only training")
        unlabeled_items = []
    layout = layout_from_config(cfg, space)
    records = []
    for _ in range(cfg.stage2_iters):
        rec = train_step(state, labeled_items, unlabeled_items, cfg, layout, space)
        records.append(rec)
        if callback:
            callback(state, rec)
    return state, records


# -------------------------------------------------------------- checkpoints --


def state_to_checkpoint(path, state: TrainState, cfg: RunConfig):
    arrays: dict[str, np.ndarray] = {}
    for k, v in state.student.items():
        arrays[f"student/{k}"] = v
    if state.teacher is not None:
        for k, v in state.teacher.items():
            arrays[f"teacher/{k}"] = v
    for k, v in state.momentum.items():
        arrays[f"momentum/{k}"] = v
    pool_state = state.pool.state_arrays()
    for class_id, (vectors, scores) in pool_state.items():
        arrays[f"pool/{class_id}/vectors"] = vectors
        arrays[f"pool/{class_id}/scores"] = scores
    meta = {
        "iteration": state.iteration,
        "seed": state.seed,
        "has_teacher": state.teacher is not None,
        "pool_classes": sorted(pool_state),
        "config": config_mod.to_dict(cfg),
    }
    ckpt_mod.save_checkpoint(path, arrays, meta)


def state_from_checkpoint(path) -> tuple[TrainState, RunConfig]:
    arrays, meta = ckpt_mod.load_checkpoint(path)
    cfg = config_mod.from_dict(meta["config"])
    student = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("student/")}
    momentum = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("momentum/")}
    teacher = None
    if meta["has_teacher"]:
        teacher = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("teacher/")}
    pool_state = {}
    for class_id in meta["pool_classes"]:
        pool_state[int(class_id)] = (
            arrays[f"pool/{class_id}/vectors"],
            arrays[f"pool/{class_id}/scores"],
        )
    pool = EmbeddingPool.from_state(
        pool_state, cfg.pool_capacity, cfg.s_iou_threshold, cfg.s_cos_threshold
    )
    state = TrainState(
        student=student,
        teacher=teacher,
        pool=pool,
        iteration=int(meta["iteration"]),
        momentum=momentum,
        seed=int(meta["seed"]),
    )
    return state, cfg
