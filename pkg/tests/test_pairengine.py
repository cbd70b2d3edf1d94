import numpy as np
import pytest

from grfface.pairengine import (
    SvmModel,
    pair_rep,
    pair_rep_rows,
    score_pairs,
    similarity,
    svm_objective,
)


class TestPairRep:
    def test_identical_faces_zero(self):
        a = np.array([1.0, -2.0, 3.0])
        assert np.all(pair_rep(a, a, "abs_diff", 0.5) == 0)

    def test_symmetry_bit_exact(self):
        rng = np.random.default_rng(0)
        for kind in ("abs_diff", "product"):
            for _ in range(20):
                a = rng.normal(size=16)
                b = rng.normal(size=16)
                assert np.array_equal(pair_rep(a, b, kind), pair_rep(b, a, kind))

    def test_hand_computed_example(self):
        out = pair_rep(np.array([4.0, 1.0]), np.array([0.0, 0.0]), "abs_diff", 0.5)
        assert np.allclose(out, [2.0, 1.0])

    def test_product_kind(self):
        out = pair_rep(np.array([2.0, -3.0]), np.array([2.0, 3.0]), "product", 1.0)
        assert np.allclose(out, [4.0, 9.0])

    def test_dim_mismatch(self):
        with pytest.raises(ValueError, match="dim-mismatch"):
            pair_rep(np.zeros(3), np.zeros(4))

    def test_rows_match_single(self):
        rng = np.random.default_rng(1)
        feats = rng.normal(size=(6, 5))
        ii, jj = [0, 2, 4], [1, 3, 5]
        rows = pair_rep_rows(feats, ii, jj, "abs_diff", 0.5)
        for k in range(3):
            assert np.array_equal(rows[k], pair_rep(feats[ii[k]], feats[jj[k]]))


class TestObjective:
    def test_zero_weights(self):
        x = np.random.default_rng(2).normal(size=(7, 4))
        y = np.ones(7)
        assert svm_objective(np.zeros(4), x, y, C=2.0) == pytest.approx(2.0 * 7)

    def test_satisfied_margins(self):
        w = np.array([2.0, 0.0])
        x = np.array([[1.0, 0.0], [-1.0, 3.0]])
        y = np.array([1.0, -1.0])
        # margins: y * w'x = 2 and 2, both >= 1
        assert svm_objective(w, x, y, C=5.0) == pytest.approx(0.5 * 4.0)

    def test_matches_naive_loop(self):
        rng = np.random.default_rng(3)
        w = rng.normal(size=6)
        x = rng.normal(size=(40, 6))
        y = rng.choice([1.0, -1.0], size=40)
        ref = 0.5 * w @ w
        for i in range(40):
            ref += 1.3 * max(1 - y[i] * (w @ x[i]), 0.0) ** 2
        assert abs(svm_objective(w, x, y, 1.3) - ref) < 1e-10

    def test_convexity_midpoint(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(30, 5))
        y = rng.choice([1.0, -1.0], size=30)
        for _ in range(25):
            w1 = rng.normal(size=5)
            w2 = rng.normal(size=5)
            mid = svm_objective((w1 + w2) / 2, x, y, 0.7)
            avg = (svm_objective(w1, x, y, 0.7) + svm_objective(w2, x, y, 0.7)) / 2
            assert mid <= avg + 1e-9

    def test_rejects_bad_c(self):
        with pytest.raises(ValueError, match="C"):
            svm_objective(np.zeros(2), np.zeros((1, 2)), np.ones(1), C=0.0)


class TestSimilarity:
    def test_self_pair_scores_zero(self):
        model = SvmModel(w=np.array([-1.0, -2.0]), C=1.0)
        v = np.array([0.3, 0.7])
        assert similarity(v, v, model) == 0.0

    def test_hand_computed_score(self):
        model = SvmModel(w=np.array([1.0, 0.0]), C=1.0, p_rep=0.5)
        a = np.array([4.0, 9.0])
        b = np.array([0.0, 9.0])
        assert similarity(a, b, model) == pytest.approx(2.0)

    def test_symmetric(self):
        rng = np.random.default_rng(5)
        model = SvmModel(w=rng.normal(size=8), C=1.0)
        a, b = rng.normal(size=8), rng.normal(size=8)
        assert similarity(a, b, model) == similarity(b, a, model)

    def test_negative_weights_make_self_pair_optimal(self):
        rng = np.random.default_rng(6)
        w = -np.abs(rng.normal(size=10)) - 0.01
        model = SvmModel(w=w, C=1.0)
        v = rng.normal(size=10)
        best = similarity(v, v, model)
        for _ in range(100):
            other = v + 0.1 * rng.normal(size=10)
            assert similarity(v, other, model) <= best + 1e-12

    def test_dim_mismatch(self):
        model = SvmModel(w=np.zeros(3), C=1.0)
        with pytest.raises(ValueError, match="dim-mismatch"):
            similarity(np.zeros(4), np.zeros(4), model)

    def test_score_pairs_batches(self):
        rng = np.random.default_rng(7)
        model = SvmModel(w=rng.normal(size=5), C=1.0)
        feats = rng.normal(size=(8, 5))
        ii, jj = [0, 1, 2], [3, 4, 5]
        scores = score_pairs(feats, ii, jj, model)
        for k in range(3):
            assert scores[k] == pytest.approx(similarity(feats[ii[k]], feats[jj[k]], model))

    def test_model_validation(self):
        with pytest.raises(ValueError, match="kind"):
            SvmModel(w=np.zeros(2), C=1.0, kind="sum")
        with pytest.raises(ValueError, match="p_rep"):
            SvmModel(w=np.zeros(2), C=1.0, p_rep=0.0)
