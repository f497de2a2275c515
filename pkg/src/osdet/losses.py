"""Training objectives.

Two losses carry the open-set behaviour:

* ``feature_contrastive_loss`` pulls each ID-class proposal embedding toward
  the stored pool embeddings of its class and pushes it away from every
  other class (including the unknown class) via a temperature softmax.
* ``uncertainty_classification_loss`` is a weighted cross-entropy over
  restricted label sets that teaches the classifier to move probability
  mass onto the unknown class for uncertain rows.

Both return analytic gradients with respect to their direct inputs;
everything upstream of logits/embeddings is handled by the detector's
backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .labels import KIND_ID, KIND_OOD, LabelSpace, restricted_class_set

STAGE_SUP = "sup"
STAGE_SEMI = "semi"


@dataclass
class ProposalBatch:
    """Per-proposal classifier/embedding outputs with target assignments.

    ``logits`` is (N, K+2), ``embeddings`` is (N, d) with unit-norm rows,
    ``assigned_label`` holds internal label indices (ID, unknown or
    background) and ``assigned_iou`` the IoU against the matched target.
    """

    logits: np.ndarray
    embeddings: np.ndarray
    assigned_label: np.ndarray
    assigned_iou: np.ndarray
    is_supervised_stage: bool = True

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.assigned_label = np.asarray(self.assigned_label, dtype=np.int64)
        self.assigned_iou = np.asarray(self.assigned_iou, dtype=np.float64)
        n = self.logits.shape[0]
        if self.embeddings.shape[0] != n or self.assigned_label.shape[0] != n or self.assigned_iou.shape[0] != n:
            raise ValueError("proposal batch fields disagree on row count")
        if not np.all(np.isfinite(self.logits)):
            raise ValueError("logits contain non-finite values")
        if not np.all(np.isfinite(self.embeddings)):
            raise ValueError("embeddings contain non-finite values")

    @property
    def size(self) -> int:
        return self.logits.shape[0]


@dataclass(frozen=True)
class LossWeights:
    """Loss composition weights; names follow the run-config keys."""

    alpha_t: float = 0.1   # contrastive term weight (scheduled)
    beta: float = 1.0      # uncertainty term weight
    lambda_: float = 2.0   # unsupervised branch weight
    tau: float = 0.1       # contrastive temperature
    alpha: float = 1.0     # uncertainty weight exponent
    k_mine: int = 3        # mined background rows per image

    def __post_init__(self):
        for name in ("alpha_t", "beta", "lambda_", "alpha"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.k_mine < 0:
            raise ValueError("k_mine must be non-negative")


@dataclass(frozen=True)
class SupervisedTerms:
    rpn_cls: float = 0.0
    rpn_reg: float = 0.0
    roi_reg: float = 0.0
    fc: float = 0.0
    uc: float = 0.0


@dataclass(frozen=True)
class UnsupervisedTerms:
    rpn_cls: float = 0.0
    fc: float = 0.0
    uc: float = 0.0


@dataclass
class LossResult:
    value: float
    grad: np.ndarray
    contributing: int = 0

    @property
    def skipped(self) -> bool:
        return self.contributing == 0


def restricted_softmax_matrix(logits: np.ndarray, kind: str, space: LabelSpace) -> np.ndarray:
    """Row-wise softmax over the restricted class set, zero elsewhere.

    Computed with max-subtraction; rows of the returned full-width matrix
    sum to 1 over the restricted indices.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits contain non-finite values")
    idx = sorted(restricted_class_set(kind, space))
    sub = logits[:, idx]
    m = sub.max(axis=1, keepdims=True)
    e = np.exp(sub - m)
    p = e / e.sum(axis=1, keepdims=True)
    out = np.zeros_like(logits)
    out[:, idx] = p
    return out


def restricted_softmax(logits_row: np.ndarray, kind: str, space: LabelSpace) -> np.ndarray:
    """Single-row convenience wrapper around :func:`restricted_softmax_matrix`."""
    row = np.asarray(logits_row, dtype=np.float64).reshape(1, -1)
    return restricted_softmax_matrix(row, kind, space)[0]


def uncertainty_weight(p_k, alpha: float):
    """Row weight ``(1 - p_k)^alpha * p_k`` applied to mined/unknown rows."""
    p = np.asarray(p_k, dtype=np.float64)
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError("p_k must lie in [0, 1]")
    w = np.power(1.0 - p, alpha) * p
    return float(w) if w.ndim == 0 else w


def feature_contrastive_loss(
    batch: ProposalBatch,
    pool_snapshot: dict[int, np.ndarray],
    tau: float,
    literal_denominator: bool = False,
) -> LossResult:
    """Pool-contrastive loss over ID anchors, with analytic embedding gradient.

    Anchors are rows with ``assigned_iou > 0.5`` whose label is an ID class;
    unknown-assigned rows never contribute a positive term (unknown pool
    entries only appear inside other anchors' denominators). Per anchor of
    class c with positives P = pool[c] and contrast set D:

        loss_i = -(1/|P|) * sum_{k in P} log( exp(e_i.e_k / tau)
                                              / sum_{u in D} exp(e_i.e_u / tau) )

    By default D = P plus every other class's pool entries, which keeps the
    loss bounded below; ``literal_denominator`` restricts D to the other
    classes only. The total is the mean over contributing anchors. Stored
    pool vectors are constants: the gradient is with respect to the anchor
    embeddings only.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    emb = batch.embeddings
    grad = np.zeros_like(emb)
    if emb.shape[0] == 0:
        return LossResult(0.0, grad, 0)
    num_classes = batch.logits.shape[1] - 2
    labels = batch.assigned_label
    anchor_rows = np.nonzero((batch.assigned_iou > 0.5) & (labels >= 0) & (labels < num_classes))[0]

    classes_present = sorted(c for c, v in pool_snapshot.items() if len(v))
    pools = {c: np.asarray(pool_snapshot[c], dtype=np.float64) for c in classes_present}

    total = 0.0
    count = 0
    for i in anchor_rows:
        c = int(labels[i])
        pos = pools.get(c)
        if pos is None or pos.shape[0] == 0:
            continue
        others = [pools[cc] for cc in classes_present if cc != c]
        if literal_denominator:
            if not others:
                continue
            den = np.concatenate(others, axis=0)
        else:
            den = np.concatenate([pos] + others, axis=0) if others else pos
        e = emb[i]
        z_pos = pos @ e / tau
        z_den = den @ e / tau
        z_max = z_den.max()
        exp_den = np.exp(z_den - z_max)
        lse = z_max + np.log(exp_den.sum())
        total += float(lse - z_pos.mean())
        p = exp_den / exp_den.sum()
        grad[i] = (p @ den - pos.mean(axis=0)) / tau
        count += 1
    if count == 0:
        return LossResult(0.0, np.zeros_like(emb), 0)
    return LossResult(total / count, grad / count, count)


@dataclass
class UncertaintyRowSelection:
    """Frozen row roles and weights for one uncertainty-loss evaluation.

    The weights are data: no gradient flows through them, so the loss seen
    by the gradient is exactly the one this selection defines.
    """

    id_rows: np.ndarray
    id_labels: np.ndarray            # aligned with id_rows
    unknown_rows: np.ndarray
    mined_rows: np.ndarray
    background_rows: np.ndarray      # background rows not mined
    ood_weights: np.ndarray          # aligned with ood_rows
    norm_main: int

    @property
    def ood_rows(self) -> np.ndarray:
        return np.concatenate([self.unknown_rows, self.mined_rows])


def select_uncertainty_rows(
    batch: ProposalBatch, space: LabelSpace, alpha: float, k_mine: int
) -> UncertaintyRowSelection:
    """Pick OOD rows (unknown-assigned plus mined background) and freeze weights."""
    labels = batch.assigned_label
    k = space.num_id_classes
    id_rows = np.nonzero(labels < k)[0]
    unknown_rows = np.nonzero(labels == space.unknown_index)[0]
    bg_rows = np.nonzero(labels == space.background_index)[0]

    p_id = restricted_softmax_matrix(batch.logits, KIND_ID, space)
    p_k = p_id[:, :k].max(axis=1) if batch.size else np.zeros(0)
    weights = uncertainty_weight(p_k, alpha) if batch.size else np.zeros(0)

    if k_mine > 0 and bg_rows.size:
        order = np.argsort(-weights[bg_rows], kind="stable")
        mined = bg_rows[order[: min(k_mine, bg_rows.size)]]
    else:
        mined = np.zeros(0, dtype=np.int64)
    plain_bg = np.setdiff1d(bg_rows, mined, assume_unique=True)

    ood_rows = np.concatenate([unknown_rows, mined])
    return UncertaintyRowSelection(
        id_rows=id_rows,
        id_labels=labels[id_rows],
        unknown_rows=unknown_rows,
        mined_rows=mined,
        background_rows=plain_bg,
        ood_weights=weights[ood_rows] if ood_rows.size else np.zeros(0),
        norm_main=max(1, id_rows.size + unknown_rows.size),
    )


def uncertainty_loss_fixed_selection(
    logits: np.ndarray, selection: UncertaintyRowSelection, space: LabelSpace, stage: str
) -> tuple[float, np.ndarray]:
    """Evaluate the uncertainty loss for a frozen row selection.

    Smooth in ``logits``; this is the function the analytic gradient
    differentiates (and what a finite-difference check should probe).
    """
    if stage not in (STAGE_SUP, STAGE_SEMI):
        raise ValueError(f"stage must be '{STAGE_SUP}' or '{STAGE_SEMI}', got {stage!r}")
    logits = np.asarray(logits, dtype=np.float64)
    grad = np.zeros_like(logits)
    loss = 0.0
    u = space.unknown_index
    bg = space.background_index
    norm = selection.norm_main

    ood_rows = selection.ood_rows
    if ood_rows.size:
        p_ood = restricted_softmax_matrix(logits[ood_rows], KIND_OOD, space)
        w = selection.ood_weights
        loss += float(np.sum(w * -np.log(p_ood[:, u]))) / norm
        g = p_ood.copy()
        g[:, u] -= 1.0
        np.add.at(grad, ood_rows, (w[:, None] * g) / norm)

    if stage == STAGE_SUP:
        if selection.id_rows.size:
            rows = selection.id_rows
            p_id = restricted_softmax_matrix(logits[rows], KIND_ID, space)
            targets = np.arange(rows.size)
            labels = selection.id_labels
            loss += float(np.sum(-np.log(p_id[targets, labels]))) / norm
            g = p_id
            g[targets, labels] -= 1.0
            np.add.at(grad, rows, g / norm)
        if selection.background_rows.size:
            rows = selection.background_rows
            p_id = restricted_softmax_matrix(logits[rows], KIND_ID, space)
            n_bg = rows.size
            loss += float(np.sum(-np.log(p_id[:, bg]))) / n_bg
            g = p_id
            g[:, bg] -= 1.0
            np.add.at(grad, rows, g / n_bg)
    return loss, grad


def uncertainty_classification_loss(
    batch: ProposalBatch, space: LabelSpace, alpha: float, k_mine: int, stage: str
) -> LossResult:
    """Open-set classification loss with analytic logits gradient.

    OOD rows are the unknown-assigned proposals plus the ``k_mine``
    background-assigned proposals with the highest uncertainty weight
    ``(1 - p_k)^alpha * p_k`` (p_k = max ID probability under the full
    softmax). Each contributes ``w * -log p_u`` where p_u is the unknown
    probability of the {unknown, background} softmax; the weight is treated
    as a constant. In the supervised stage, ID-assigned rows add plain
    cross-entropy at weight 1 and the remaining background rows add their
    own mean cross-entropy so the classifier keeps learning rejection; the
    semi stage computes the OOD term only. The main terms are normalized by
    the number of non-background-assigned rows (min 1).
    """
    selection = select_uncertainty_rows(batch, space, alpha, k_mine)
    loss, grad = uncertainty_loss_fixed_selection(batch.logits, selection, space, stage)
    contributing = int(selection.ood_rows.size)
    if stage == STAGE_SUP:
        contributing += int(selection.id_rows.size + selection.background_rows.size)
    return LossResult(loss, grad, contributing)


def plain_classification_loss(batch: ProposalBatch, space: LabelSpace) -> LossResult:
    """Standard cross-entropy over the full label softmax (baseline mode).

    Used when the uncertainty loss is disabled; targets must be ID or
    background (the baseline never supervises the unknown class).
    """
    if batch.size == 0:
        return LossResult(0.0, np.zeros_like(batch.logits), 0)
    labels = batch.assigned_label
    if np.any(labels == space.unknown_index):
        raise ValueError("plain classification loss cannot supervise unknown-assigned rows")
    p = restricted_softmax_matrix(batch.logits, KIND_ID, space)
    rows = np.arange(batch.size)
    loss = float(np.mean(-np.log(p[rows, labels])))
    grad = p
    grad[rows, labels] -= 1.0
    return LossResult(loss, grad / batch.size, batch.size)


def compose_total_loss(
    sup_terms: SupervisedTerms,
    unsup_terms: UnsupervisedTerms | None,
    weights: LossWeights,
) -> float:
    """Weighted total: supervised branch plus lambda times the unsupervised one.

    The unsupervised branch carries no box-regression terms and its ROI
    classification objective is the uncertainty loss.
    """
    l_sup = (
        sup_terms.rpn_cls
        + sup_terms.rpn_reg
        + sup_terms.roi_reg
        + weights.alpha_t * sup_terms.fc
        + weights.beta * sup_terms.uc
    )
    if unsup_terms is None:
        return l_sup
    l_unsup = unsup_terms.rpn_cls + weights.alpha_t * unsup_terms.fc + weights.beta * unsup_terms.uc
    return l_sup + weights.lambda_ * l_unsup
