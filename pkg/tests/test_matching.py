import itertools
import math

import numpy as np
import pytest

from diffbev.diffusion import BoxNormalizer
from diffbev.matching import (
    Assignment,
    MatchWeights,
    focal_loss,
    hungarian,
    match_cost_matrix,
    training_loss,
)


@pytest.fixture(scope="module")
def norm():
    return BoxNormalizer()


def brute_force_total(cost):
    n, m = cost.shape
    return min(
        sum(cost[perm[j], j] for j in range(m))
        for perm in itertools.permutations(range(n), m)
    )


class TestFocal:
    def test_confident_correct_near_zero(self):
        assert focal_loss(1 - 1e-7, True) < 1e-12

    def test_half_probability_value(self):
        # -alpha (1-p)^gamma log p at p=0.5: 0.25 * 0.25 * log 2
        assert focal_loss(0.5, True) == pytest.approx(0.25 * 0.25 * math.log(2), abs=1e-12)

    def test_gamma_zero_reduces_to_half_bce(self):
        for p in (0.1, 0.4, 0.9):
            assert focal_loss(p, True, alpha=0.5, gamma=0.0) == pytest.approx(-0.5 * math.log(p))
            assert focal_loss(p, False, alpha=0.5, gamma=0.0) == pytest.approx(-0.5 * math.log(1 - p))

    def test_nonnegative_after_clamp(self):
        assert focal_loss(0.0, True) >= 0
        assert focal_loss(1.0, False) >= 0
        assert math.isfinite(focal_loss(0.0, True))


class TestCostMatrix:
    def test_perfect_pair_near_zero(self, norm):
        gt = np.array([[30.0, 5.0, 3.9, 1.6, 0.4]])
        cost = match_cost_matrix(np.array([1 - 1e-7]), gt, gt, norm)
        assert cost[0, 0] < 1e-5

    def test_score_only_term(self, norm):
        gt = np.array([[30.0, 5.0, 3.9, 1.6, 0.4]])
        w = MatchWeights()
        cost = match_cost_matrix(np.array([0.5]), gt, gt, norm)
        assert cost[0, 0] == pytest.approx(w.lambda_cls * focal_loss(0.5, True), abs=1e-12)

    def test_identical_predictions_give_identical_rows(self, norm):
        gt = np.array([[30.0, 5.0, 3.9, 1.6, 0.4], [50.0, -10.0, 4.1, 1.7, -0.2]])
        preds = np.array([[31.0, 5.5, 3.8, 1.6, 0.3]] * 2)
        cost = match_cost_matrix(np.array([0.7, 0.7]), preds, gt, norm)
        assert np.array_equal(cost[0], cost[1])

    def test_non_finite_rejected(self, norm):
        gt = np.array([[30.0, 5.0, 3.9, 1.6, 0.4]])
        with pytest.raises(ValueError):
            match_cost_matrix(np.array([np.nan]), gt, gt, norm)


class TestHungarian:
    def test_simple_two_by_two(self):
        a = hungarian(np.array([[1.0, 2.0], [2.0, 1.0]]))
        assert a.pairs == ((0, 0), (1, 1))
        assert a.unmatched_preds == ()

    def test_identity_dominant_with_cheaper_permutation(self):
        cost = np.array([[1.0, 100.0, 100.0], [100.0, 1.0, 0.1], [100.0, 0.1, 1.0]])
        a = hungarian(cost)
        total = sum(cost[p, g] for p, g in a.pairs)
        assert total == pytest.approx(brute_force_total(cost))
        assert a.pairs == ((0, 0), (2, 1), (1, 2))

    def test_matches_brute_force_on_random_matrices(self):
        rng = np.random.default_rng(20)
        for _ in range(400):
            n = int(rng.integers(1, 8))
            m = int(rng.integers(1, n + 1))
            cost = rng.uniform(0, 10, (n, m))
            a = hungarian(cost)
            total = sum(cost[p, g] for p, g in a.pairs)
            assert total == pytest.approx(brute_force_total(cost), abs=1e-9)
            assert len({p for p, _ in a.pairs}) == m
            assert sorted(g for _, g in a.pairs) == list(range(m))

    def test_beats_identity_and_random_permutations(self):
        rng = np.random.default_rng(21)
        for _ in range(50):
            n, m = 9, 6
            cost = rng.uniform(0, 5, (n, m))
            total = sum(cost[p, g] for p, g in hungarian(cost).pairs)
            assert total <= sum(cost[j, j] for j in range(m)) + 1e-12
            for _ in range(100):
                perm = rng.permutation(n)[:m]
                assert total <= sum(cost[perm[j], j] for j in range(m)) + 1e-12

    def test_rescaling_invariance(self):
        rng = np.random.default_rng(22)
        for _ in range(50):
            cost = rng.uniform(0, 1, (6, 4))
            assert hungarian(cost).pairs == hungarian(cost * 37.5).pairs

    def test_lexicographic_tie_break(self):
        # every assignment costs the same; canonical answer takes the lowest
        # free prediction for each ground truth in order
        cost = np.ones((4, 3))
        assert hungarian(cost).pairs == ((0, 0), (1, 1), (2, 2))
        cost = np.array([[2.0, 1.0], [1.0, 2.0], [2.0, 1.0]])
        # optimal total is 2: (1,0) with (0,1) or (2,1); lexicographic picks (0,1)
        assert hungarian(cost).pairs == ((1, 0), (0, 1))

    def test_more_gts_than_preds_rejected(self):
        with pytest.raises(ValueError):
            hungarian(np.zeros((2, 3)))

    def test_zero_gts(self):
        a = hungarian(np.zeros((3, 0)))
        assert a.pairs == () and a.unmatched_preds == (0, 1, 2)


class TestTrainingLoss:
    def make_inputs(self, norm, seed=30, n=8, m=3):
        rng = np.random.default_rng(seed)
        probs = rng.uniform(0.15, 0.85, n)
        sig = rng.uniform(-1.6, 1.6, (n, 5))
        cz = rng.uniform(0.4, 1.1, n)
        dz = rng.uniform(1.2, 1.8, n)
        gt = np.stack(
            [
                rng.uniform(10, 60, m),
                rng.uniform(-30, 30, m),
                rng.uniform(3.2, 4.6, m),
                rng.uniform(1.4, 1.8, m),
                rng.uniform(-1.4, 1.4, m),
            ],
            axis=1,
        )
        gcz = rng.uniform(0.6, 0.9, m)
        gdz = rng.uniform(1.3, 1.7, m)
        pairs = tuple((int(i), int(j)) for j, i in enumerate(rng.permutation(n)[:m]))
        pairs = tuple(sorted(pairs, key=lambda x: x[1]))
        unmatched = tuple(i for i in range(n) if i not in {p for p, _ in pairs})
        return probs, sig, cz, dz, gt, gcz, gdz, Assignment(pairs=pairs, unmatched_preds=unmatched)

    def test_perfect_predictions_near_zero(self, norm):
        gt = np.array([[30.0, 5.0, 3.9, 1.6, 0.4], [55.0, -12.0, 4.2, 1.7, -0.9]])
        sig = norm.encode(gt)
        probs = np.array([1 - 1e-7, 1 - 1e-7])
        asn = Assignment(pairs=((0, 0), (1, 1)), unmatched_preds=())
        res = training_loss(probs, sig, np.array([0.7, 0.8]), np.array([1.5, 1.4]), gt,
                            np.array([0.7, 0.8]), np.array([1.5, 1.4]), asn, norm)
        assert res.total < 1e-3

    def test_terms_nonnegative_and_weighted_sum(self, norm):
        probs, sig, cz, dz, gt, gcz, gdz, asn = self.make_inputs(norm)
        w = MatchWeights()
        res = training_loss(probs, sig, cz, dz, gt, gcz, gdz, asn, norm, w)
        assert all(v >= 0 for v in res.terms.values())
        assert res.total == pytest.approx(
            w.lambda_cls * res.terms["cls"] + w.lambda_reg * res.terms["reg"] + w.lambda_iou * res.terms["iou"]
        )

    def test_doubling_lambda_reg_doubles_reg_contribution(self, norm):
        probs, sig, cz, dz, gt, gcz, gdz, asn = self.make_inputs(norm)
        r1 = training_loss(probs, sig, cz, dz, gt, gcz, gdz, asn, norm, MatchWeights())
        r2 = training_loss(probs, sig, cz, dz, gt, gcz, gdz, asn, norm, MatchWeights(lambda_reg=10.0))
        assert r2.terms["reg"] == pytest.approx(r1.terms["reg"])  # breakdown stores the raw term
        assert r2.total - r1.total == pytest.approx(5.0 * r1.terms["reg"])

    def test_zero_gts_classification_only(self, norm):
        probs = np.array([0.3, 0.6])
        sig = np.zeros((2, 5))
        asn = Assignment(pairs=(), unmatched_preds=(0, 1))
        res = training_loss(probs, sig, np.zeros(2), np.ones(2), np.zeros((0, 5)),
                            np.zeros(0), np.zeros(0), asn, norm)
        assert res.terms["reg"] == 0 and res.terms["iou"] == 0
        expected = sum(focal_loss(p, False) for p in probs)
        assert res.terms["cls"] == pytest.approx(expected)
        assert np.allclose(res.d_signal, 0) and np.allclose(res.d_cz, 0)

    def test_gradients_match_finite_differences(self, norm):
        h = 1e-6
        worst = 0.0
        for seed in range(6):
            probs, sig, cz, dz, gt, gcz, gdz, asn = self.make_inputs(norm, seed=40 + seed)
            res = training_loss(probs, sig, cz, dz, gt, gcz, gdz, asn, norm)

            def total(p=probs, s=sig, c=cz, d=dz):
                return training_loss(p, s, c, d, gt, gcz, gdz, asn, norm).total

            for i in range(len(probs)):
                p_hi = probs.copy(); p_hi[i] += h
                p_lo = probs.copy(); p_lo[i] -= h
                fd = (total(p=p_hi) - total(p=p_lo)) / (2 * h)
                worst = max(worst, abs(fd - res.d_prob[i]) / max(abs(fd), 1e-6))
                c_hi = cz.copy(); c_hi[i] += h
                c_lo = cz.copy(); c_lo[i] -= h
                fd = (total(c=c_hi) - total(c=c_lo)) / (2 * h)
                worst = max(worst, abs(fd - res.d_cz[i]) / max(abs(fd), 1e-6))
                d_hi = dz.copy(); d_hi[i] += h
                d_lo = dz.copy(); d_lo[i] -= h
                fd = (total(d=d_hi) - total(d=d_lo)) / (2 * h)
                worst = max(worst, abs(fd - res.d_dz[i]) / max(abs(fd), 1e-6))
                for k in range(5):
                    s_hi = sig.copy(); s_hi[i, k] += h
                    s_lo = sig.copy(); s_lo[i, k] -= h
                    fd = (total(s=s_hi) - total(s=s_lo)) / (2 * h)
                    worst = max(worst, abs(fd - res.d_signal[i, k]) / max(abs(fd), 1e-6))
        assert worst < 1e-4


class TestAssignmentInvariances:
    def test_rigid_motion_keeps_pairs(self, norm):
        rng = np.random.default_rng(50)
        for _ in range(20):
            m = 3
            gt = np.stack(
                [
                    rng.uniform(20, 50, m),
                    rng.uniform(-20, 20, m),
                    rng.uniform(3.2, 4.6, m),
                    rng.uniform(1.4, 1.8, m),
                    rng.uniform(-1.4, 1.4, m),
                ],
                axis=1,
            )
            preds = gt[rng.permutation(m)] + rng.normal(0, 0.3, (m, 5)) * [1, 1, 0.1, 0.1, 0.05]
            probs = rng.uniform(0.3, 0.9, m)
            base = hungarian(match_cost_matrix(probs, preds, gt, norm)).pairs

            phi, tx, ty = 0.3, 2.0, -1.5
            c, s = math.cos(phi), math.sin(phi)

            def move(arr):
                out = arr.copy()
                out[:, 0] = c * arr[:, 0] - s * arr[:, 1] + tx
                out[:, 1] = s * arr[:, 0] + c * arr[:, 1] + ty
                out[:, 4] = arr[:, 4] + phi
                return out

            moved = hungarian(match_cost_matrix(probs, move(preds), move(gt), norm)).pairs
            assert moved == base
