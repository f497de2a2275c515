import math

import numpy as np
import pytest

from _oracles import central_difference, max_relative_error
from conftest import random_unit_rows
from osdet.labels import KIND_ID, KIND_OOD, LabelSpace
from osdet.losses import (
    STAGE_SEMI,
    STAGE_SUP,
    LossWeights,
    ProposalBatch,
    SupervisedTerms,
    UnsupervisedTerms,
    compose_total_loss,
    feature_contrastive_loss,
    plain_classification_loss,
    restricted_softmax,
    restricted_softmax_matrix,
    select_uncertainty_rows,
    uncertainty_classification_loss,
    uncertainty_loss_fixed_selection,
    uncertainty_weight,
)


def make_batch(logits, embeddings, labels, ious, supervised=True):
    return ProposalBatch(
        logits=np.asarray(logits, dtype=float),
        embeddings=np.asarray(embeddings, dtype=float),
        assigned_label=np.asarray(labels),
        assigned_iou=np.asarray(ious, dtype=float),
        is_supervised_stage=supervised,
    )


class TestRestrictedSoftmax:
    def test_uniform_id(self, space_k2):
        p = restricted_softmax(np.zeros(4), KIND_ID, space_k2)
        assert np.allclose(p, 0.25)

    def test_uniform_ood(self, space_k2):
        p = restricted_softmax(np.zeros(4), KIND_OOD, space_k2)
        assert p[space_k2.unknown_index] == pytest.approx(0.5)
        assert p[space_k2.background_index] == pytest.approx(0.5)
        assert np.allclose(p[:2], 0.0)

    def test_log2_example(self, space_k2):
        logits = np.array([5.0, -3.0, math.log(2.0), 0.0])  # ID logits must be ignored
        p = restricted_softmax(logits, KIND_OOD, space_k2)
        assert p[space_k2.unknown_index] == pytest.approx(2.0 / 3.0)

    def test_sums_to_one_and_shift_invariant(self, rng, space_k4):
        logits = rng.normal(scale=5.0, size=(20, space_k4.total_logits))
        for kind in (KIND_ID, KIND_OOD):
            p = restricted_softmax_matrix(logits, kind, space_k4)
            assert np.allclose(p.sum(axis=1), 1.0, atol=1e-6)
            shifted = restricted_softmax_matrix(logits + 13.7, kind, space_k4)
            assert np.allclose(p, shifted, atol=1e-9)
            assert np.all(p[:, sorted_set(kind, space_k4)] > 0)

    def test_rejects_nan(self, space_k2):
        bad = np.array([np.nan, 0.0, 0.0, 0.0])
        with pytest.raises(ValueError):
            restricted_softmax(bad, KIND_ID, space_k2)


def sorted_set(kind, space):
    from osdet.labels import restricted_class_set

    return sorted(restricted_class_set(kind, space))


class TestUncertaintyWeight:
    def test_zero_probability(self):
        assert uncertainty_weight(0.0, 2.0) == 0.0

    def test_unit_probability(self):
        assert uncertainty_weight(1.0, 1.0) == 0.0

    def test_symmetric_max(self):
        assert uncertainty_weight(0.5, 1.0) == pytest.approx(0.25)

    @pytest.mark.parametrize("alpha", [0.5, 1.0, 2.0, 4.0])
    def test_maximized_at_inverse_one_plus_alpha(self, alpha):
        grid = np.linspace(0.0, 1.0, 20001)
        w = uncertainty_weight(grid, alpha)
        assert grid[np.argmax(w)] == pytest.approx(1.0 / (1.0 + alpha), abs=1e-3)

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            uncertainty_weight(1.5, 1.0)


class TestFeatureContrastive:
    def test_single_positive_no_negatives_is_zero(self, space_k2):
        batch = make_batch(np.zeros((1, 4)), [[1.0, 0.0]], [0], [0.9])
        res = feature_contrastive_loss(batch, {0: np.array([[1.0, 0.0]])}, tau=1.0)
        assert res.value == pytest.approx(0.0, abs=1e-12)
        assert res.contributing == 1

    def test_one_positive_one_negative_matches_closed_form(self, space_k2):
        batch = make_batch(np.zeros((1, 4)), [[1.0, 0.0]], [0], [0.9])
        pool = {0: np.array([[1.0, 0.0]]), 1: np.array([[0.0, 1.0]])}
        res = feature_contrastive_loss(batch, pool, tau=1.0)
        expected = math.log(1.0 + math.e) - 1.0  # -log(e / (e + 1))
        assert res.value == pytest.approx(expected, abs=1e-9)
        assert res.value == pytest.approx(0.313262, abs=1e-6)

    def test_anchor_selection_rules(self, space_k2):
        # low IoU, background and unknown rows must not contribute
        emb = random_unit_rows(np.random.default_rng(0), 4, 3)
        batch = make_batch(
            np.zeros((4, 4)), emb,
            [0, space_k2.background_index, space_k2.unknown_index, 1],
            [0.4, 0.9, 0.9, 0.9],
        )
        pool = {0: random_unit_rows(np.random.default_rng(1), 3, 3),
                1: random_unit_rows(np.random.default_rng(2), 2, 3)}
        res = feature_contrastive_loss(batch, pool, tau=0.2)
        assert res.contributing == 1  # only the last row: ID class with IoU > 0.5
        assert np.all(res.grad[[0, 1, 2]] == 0.0)
        assert np.any(res.grad[3] != 0.0)

    def test_empty_pool_skips(self, space_k2):
        batch = make_batch(np.zeros((2, 4)), random_unit_rows(np.random.default_rng(0), 2, 3),
                           [0, 1], [0.9, 0.9])
        res = feature_contrastive_loss(batch, {}, tau=0.5)
        assert res.skipped
        assert res.value == 0.0
        assert np.all(res.grad == 0.0)

    def test_gradient_matches_finite_differences(self, rng):
        worst = 0.0
        for trial in range(30):
            d = int(rng.integers(2, 6))
            n = int(rng.integers(2, 6))
            space = LabelSpace(("a", "b", "c"))
            labels = rng.integers(0, 4, size=n)  # some unknown rows too
            ious = rng.uniform(0.2, 1.0, size=n)
            emb = random_unit_rows(rng, n, d)
            pool = {
                c: random_unit_rows(rng, int(rng.integers(1, 5)), d)
                for c in range(4)
                if rng.random() < 0.8
            }
            if not pool:
                pool = {0: random_unit_rows(rng, 2, d)}
            tau = float(rng.uniform(0.1, 1.0))
            logits = np.zeros((n, 5))
            batch = make_batch(logits, emb, labels, ious)
            res = feature_contrastive_loss(batch, pool, tau=tau)
            if res.skipped:
                continue

            def f(e):
                b = make_batch(logits, e, labels, ious)
                return feature_contrastive_loss(b, pool, tau=tau).value

            num = central_difference(f, emb.copy(), h=1e-4)
            worst = max(worst, max_relative_error(res.grad, num))
        assert worst < 1e-4

    def test_rotation_invariance(self, rng, space_k2):
        d = 4
        emb = random_unit_rows(rng, 3, d)
        pool = {0: random_unit_rows(rng, 3, d), 1: random_unit_rows(rng, 2, d)}
        batch = make_batch(np.zeros((3, 4)), emb, [0, 1, 0], [0.8, 0.9, 0.7])
        base = feature_contrastive_loss(batch, pool, tau=0.3).value
        q, _ = np.linalg.qr(rng.normal(size=(d, d)))
        rot_batch = make_batch(np.zeros((3, 4)), emb @ q.T, [0, 1, 0], [0.8, 0.9, 0.7])
        rot_pool = {c: v @ q.T for c, v in pool.items()}
        rotated = feature_contrastive_loss(rot_batch, rot_pool, tau=0.3).value
        assert rotated == pytest.approx(base, abs=1e-9)

    def test_monotone_in_positive_similarity(self, space_k2):
        pool = {0: np.array([[1.0, 0.0]]), 1: np.array([[0.0, 1.0]])}
        angles = np.linspace(0.0, 1.2, 8)
        losses = []
        for a in angles:
            e = np.array([[math.cos(a), math.sin(a)]])
            batch = make_batch(np.zeros((1, 4)), e, [0], [0.9])
            losses.append(feature_contrastive_loss(batch, pool, tau=0.5).value)
        # moving the anchor away from its positive strictly increases the loss
        assert all(losses[i] < losses[i + 1] for i in range(len(losses) - 1))

    def test_literal_denominator_mode(self, space_k2):
        batch = make_batch(np.zeros((1, 4)), [[1.0, 0.0]], [0], [0.9])
        pool = {0: np.array([[1.0, 0.0]]), 1: np.array([[0.0, 1.0]])}
        res = feature_contrastive_loss(batch, pool, tau=1.0, literal_denominator=True)
        # denominator holds only the other-class entry: -1 + lse([0]) = -1
        assert res.value == pytest.approx(-1.0, abs=1e-9)
        only_own = {0: np.array([[1.0, 0.0]])}
        res2 = feature_contrastive_loss(batch, only_own, tau=1.0, literal_denominator=True)
        assert res2.skipped

    def test_nan_embeddings_hard_error(self, space_k2):
        with pytest.raises(ValueError):
            make_batch(np.zeros((1, 4)), [[np.nan, 0.0]], [0], [0.9])


class TestUncertaintyLoss:
    def test_semi_single_unknown_row(self, space_k2):
        # uniform logits: p_u = 0.5 under the OOD softmax, max ID prob 0.25
        batch = make_batch(np.zeros((1, 4)), [[1.0, 0.0]], [space_k2.unknown_index], [0.8])
        res = uncertainty_classification_loss(batch, space_k2, alpha=1.0, k_mine=0, stage=STAGE_SEMI)
        expected = (0.75 * 0.25) * -math.log(0.5)
        assert res.value == pytest.approx(expected, abs=1e-9)
        assert res.value == pytest.approx(0.1299651, abs=1e-6)

    def test_sup_single_id_row(self, space_k2):
        batch = make_batch(np.zeros((1, 4)), [[1.0, 0.0]], [0], [0.9])
        res = uncertainty_classification_loss(batch, space_k2, alpha=1.0, k_mine=0, stage=STAGE_SUP)
        assert res.value == pytest.approx(-math.log(0.25), abs=1e-9)
        assert res.value == pytest.approx(1.386294, abs=1e-6)

    def test_semi_without_unknown_or_mining_is_exactly_zero(self, rng, space_k4):
        n = 12
        logits = rng.normal(size=(n, space_k4.total_logits))
        labels = rng.choice([0, 1, 2, 3, space_k4.background_index], size=n)
        batch = make_batch(logits, random_unit_rows(rng, n, 4), labels, rng.uniform(size=n))
        res = uncertainty_classification_loss(batch, space_k4, alpha=1.0, k_mine=0, stage=STAGE_SEMI)
        assert res.value == 0.0
        assert np.all(res.grad == 0.0)

    def test_mining_selects_highest_weight_background_rows(self, space_k2):
        # rows: ID prob high (low weight), balanced (max weight), bg-ish
        logits = np.array(
            [
                [6.0, 0.0, 0.0, 0.0],   # confident ID -> tiny w
                [0.0, 0.0, 0.0, 0.0],   # uniform -> p_k=0.25, w=0.1875
                [3.0, 3.0, 0.0, 0.0],   # two-way ID split -> p_k~0.47
            ]
        )
        bg = space_k2.background_index
        batch = make_batch(logits, random_unit_rows(np.random.default_rng(0), 3, 2),
                           [bg, bg, bg], [0.1, 0.1, 0.1])
        sel = select_uncertainty_rows(batch, space_k2, alpha=1.0, k_mine=2)
        assert set(sel.mined_rows) == {1, 2}
        assert sel.background_rows.tolist() == [0]
        assert sel.norm_main == 1  # no non-background rows -> clamped to 1

    def test_mining_caps_at_background_count(self, space_k2):
        bg = space_k2.background_index
        batch = make_batch(np.zeros((2, 4)), random_unit_rows(np.random.default_rng(0), 2, 2),
                           [bg, bg], [0.1, 0.1])
        sel = select_uncertainty_rows(batch, space_k2, alpha=1.0, k_mine=10)
        assert sel.mined_rows.size == 2

    def test_gradient_matches_finite_differences(self, rng):
        worst = 0.0
        for trial in range(30):
            k = int(rng.integers(1, 4))
            space = LabelSpace(tuple(f"c{i}" for i in range(k)))
            n = int(rng.integers(1, 8))
            logits = rng.normal(scale=2.0, size=(n, space.total_logits))
            labels = rng.integers(0, space.total_logits, size=n)
            batch = make_batch(logits, random_unit_rows(rng, n, 3), labels, rng.uniform(size=n))
            stage = STAGE_SUP if trial % 2 == 0 else STAGE_SEMI
            alpha = float(rng.uniform(0.0, 3.0))
            k_mine = int(rng.integers(0, 4))
            res = uncertainty_classification_loss(batch, space, alpha, k_mine, stage)
            selection = select_uncertainty_rows(batch, space, alpha, k_mine)

            def f(lg):
                return uncertainty_loss_fixed_selection(lg, selection, space, stage)[0]

            assert f(logits) == pytest.approx(res.value, abs=1e-12)
            num = central_difference(f, logits.copy(), h=1e-4)
            worst = max(worst, max_relative_error(res.grad, num))
        assert worst < 1e-4

    def test_mined_rows_use_frozen_weights(self, space_k2):
        # gradient w.r.t. ID logits of a mined row comes only from the
        # ID-softmax terms, never from differentiating the weight
        bg = space_k2.background_index
        logits = np.array([[1.0, -0.5, 0.3, 0.2]])
        batch = make_batch(logits, [[1.0, 0.0]], [bg], [0.1])
        res = uncertainty_classification_loss(batch, space_k2, alpha=1.0, k_mine=1, stage=STAGE_SEMI)
        # semi stage: the OOD term only touches unknown/background logits
        assert np.all(res.grad[0, :2] == 0.0)
        assert np.any(res.grad[0, 2:] != 0.0)

    def test_nan_logits_hard_error(self, space_k2):
        with pytest.raises(ValueError):
            make_batch(np.array([[np.nan, 0, 0, 0]]), [[1.0, 0.0]], [0], [0.9])

    def test_invalid_stage(self, space_k2):
        batch = make_batch(np.zeros((1, 4)), [[1.0, 0.0]], [0], [0.9])
        with pytest.raises(ValueError):
            uncertainty_classification_loss(batch, space_k2, 1.0, 0, "warmup")


class TestPlainClassification:
    def test_uniform_cross_entropy(self, space_k2):
        batch = make_batch(np.zeros((2, 4)), random_unit_rows(np.random.default_rng(0), 2, 2),
                           [0, space_k2.background_index], [0.9, 0.1])
        res = plain_classification_loss(batch, space_k2)
        assert res.value == pytest.approx(-math.log(0.25), abs=1e-12)

    def test_rejects_unknown_targets(self, space_k2):
        batch = make_batch(np.zeros((1, 4)), [[1.0, 0.0]], [space_k2.unknown_index], [0.9])
        with pytest.raises(ValueError):
            plain_classification_loss(batch, space_k2)

    def test_gradient_matches_finite_differences(self, rng, space_k4):
        n = 6
        logits = rng.normal(size=(n, space_k4.total_logits))
        labels = rng.choice([0, 1, 2, 3, space_k4.background_index], size=n)
        emb = random_unit_rows(rng, n, 3)
        res = plain_classification_loss(make_batch(logits, emb, labels, np.ones(n)), space_k4)

        def f(lg):
            return plain_classification_loss(make_batch(lg, emb, labels, np.ones(n)), space_k4).value

        num = central_difference(f, logits.copy(), h=1e-4)
        assert max_relative_error(res.grad, num) < 1e-4


class TestComposeTotalLoss:
    def test_zero_lambda_equals_supervised(self):
        sup = SupervisedTerms(rpn_cls=0.3, rpn_reg=0.2, roi_reg=0.1, fc=0.5, uc=0.7)
        unsup = UnsupervisedTerms(rpn_cls=9.0, fc=9.0, uc=9.0)
        w = LossWeights(alpha_t=0.1, beta=1.0, lambda_=0.0)
        expected = 0.3 + 0.2 + 0.1 + 0.1 * 0.5 + 0.7
        assert compose_total_loss(sup, unsup, w) == pytest.approx(expected)

    def test_all_zero(self):
        w = LossWeights()
        assert compose_total_loss(SupervisedTerms(), UnsupervisedTerms(), w) == 0.0

    def test_unit_terms_arithmetic(self):
        sup = SupervisedTerms(rpn_cls=1, rpn_reg=1, roi_reg=1, fc=1, uc=1)
        unsup = UnsupervisedTerms(rpn_cls=1, fc=1, uc=1)
        w = LossWeights(alpha_t=0.1, beta=1.0, lambda_=1.0)
        assert compose_total_loss(sup, unsup, w) == pytest.approx(6.2)

    def test_missing_unsup_branch(self):
        sup = SupervisedTerms(rpn_cls=1.0)
        assert compose_total_loss(sup, None, LossWeights()) == pytest.approx(1.0)

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(beta=-1.0)
        with pytest.raises(ValueError):
            LossWeights(tau=0.0)
