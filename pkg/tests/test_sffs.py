import numpy as np
import pytest

from grfface.evalharness import all_pairs
from grfface.sffs import CandidateSet, objective_j, sffs_select, write_trace


def planted_family(rng, n_subjects=10, images=4, n_noise=9, noise=0.4):
    """One identity-carrying candidate among pure-noise candidates."""
    subjects = np.repeat(np.arange(n_subjects), images)
    n = subjects.size
    latent = rng.normal(size=(n_subjects, 6))
    informative = latent[subjects] + noise * rng.normal(size=(n, 6))
    candidates = [informative] + [rng.normal(size=(n, 6)) for _ in range(n_noise)]
    return CandidateSet(candidates, subjects), subjects


class TestObjective:
    def test_perfect_separation_gives_one(self):
        # two tight same-subject clusters far apart
        subjects = np.array([0, 0, 1, 1])
        feats = np.array([[0.0], [0.1], [10.0], [10.1]])
        cands = CandidateSet([feats], subjects)
        pairs = all_pairs(subjects)
        assert objective_j([0], cands, pairs, fpr_target=0.0) == 1.0

    def test_constant_features_give_zero(self):
        subjects = np.array([0, 0, 1, 1, 2, 2])
        feats = np.ones((6, 3))
        cands = CandidateSet([feats], subjects)
        pairs = all_pairs(subjects)
        assert objective_j([0], cands, pairs, fpr_target=0.001) == 0.0

    def test_informative_beats_noise_over_draws(self):
        wins = 0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            cands, subjects = planted_family(rng, n_noise=1)
            pairs = all_pairs(subjects)
            j_signal = objective_j([0], cands, pairs, fpr_target=0.01)
            j_noise = objective_j([1], cands, pairs, fpr_target=0.01)
            wins += j_signal > j_noise
        assert wins == 20

    def test_degenerate_pairs_rejected(self):
        subjects = np.array([0, 0])
        cands = CandidateSet([np.zeros((2, 2))], subjects)
        ii, jj, labels = all_pairs(subjects)
        with pytest.raises(ValueError, match="degenerate-pair-set"):
            objective_j([0], cands, (ii, jj, labels))

    def test_empty_selection_rejected(self):
        subjects = np.array([0, 0, 1, 1])
        cands = CandidateSet([np.zeros((4, 2))], subjects)
        with pytest.raises(ValueError, match="non-empty"):
            objective_j([], cands, all_pairs(subjects))


class TestSelect:
    def test_single_candidate(self):
        rng = np.random.default_rng(0)
        cands, subjects = planted_family(rng, n_noise=0)
        result = sffs_select(cands, all_pairs(subjects), target_count=1, seed=0)
        assert result.selected == [0]
        assert result.flag is None
        assert len(result.trace) == 1

    def test_planted_signal_recovered(self):
        hits = 0
        for seed in range(20):
            rng = np.random.default_rng(1000 + seed)
            cands, subjects = planted_family(rng)
            result = sffs_select(cands, all_pairs(subjects), target_count=1,
                                 fpr_target=0.01, seed=seed)
            hits += result.selected == [0]
        assert hits >= 19

    def test_best_at_size_monotone_during_run(self):
        rng = np.random.default_rng(5)
        cands, subjects = planted_family(rng, n_noise=5)
        seen: dict[int, float] = {}
        result = sffs_select(cands, all_pairs(subjects), target_count=3,
                             fpr_target=0.01, seed=0)
        for line in result.trace:
            parts = line.split()
            k, j = int(parts[1]), float(parts[4])
            if k in seen:
                assert j >= seen[k] - 1e-12  # recorded best never decreases
            seen[k] = max(seen.get(k, -np.inf), j)

    def test_deterministic_under_seed(self):
        rng = np.random.default_rng(6)
        cands, subjects = planted_family(rng, n_noise=6)
        pairs = all_pairs(subjects)
        r1 = sffs_select(cands, pairs, target_count=3, seed=3)
        r2 = sffs_select(cands, pairs, target_count=3, seed=3)
        assert r1.selected == r2.selected
        assert r1.trajectory == r2.trajectory

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(7)
        cands, subjects = planted_family(rng, n_noise=6)
        pairs = all_pairs(subjects)
        base = sffs_select(cands, pairs, target_count=2, fpr_target=0.01, seed=1)
        perm = np.random.default_rng(8).permutation(len(cands))
        permuted = CandidateSet([cands.features[p] for p in perm], subjects)
        other = sffs_select(permuted, pairs, target_count=2, fpr_target=0.01, seed=1)
        assert sorted(perm[c] for c in other.selected) == sorted(base.selected)

    def test_step_budget_flag(self):
        rng = np.random.default_rng(9)
        cands, subjects = planted_family(rng, n_noise=8)
        result = sffs_select(cands, all_pairs(subjects), target_count=5,
                             max_steps=2, seed=0)
        assert result.flag == "step-budget-exhausted"
        assert 1 <= len(result.selected) <= 2

    def test_target_validated(self):
        rng = np.random.default_rng(10)
        cands, subjects = planted_family(rng, n_noise=2)
        with pytest.raises(ValueError, match="target_count"):
            sffs_select(cands, all_pairs(subjects), target_count=10)

    def test_trace_file(self, tmp_path):
        rng = np.random.default_rng(11)
        cands, subjects = planted_family(rng, n_noise=2)
        result = sffs_select(cands, all_pairs(subjects), target_count=2, seed=0)
        path = tmp_path / "trace.log"
        write_trace(path, result)
        lines = path.read_text().strip().split("\n")
        assert all(line.split()[0] == "step" for line in lines)
        assert all(line.split()[2] in ("include", "exclude") for line in lines)
