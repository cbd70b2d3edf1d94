import hashlib
import os

import numpy as np
import pytest

from grfface import evalharness, pipeline
from grfface.evalharness import SyntheticConfig, all_pairs, generate_synthetic, kfold_protocol
from grfface.imgcore import write_pgm
from grfface.modelfile import QuantizedMatrix, load_model, quantize_matrix, save_model
from grfface.pairengine import score_pairs
from grfface.pipeline import (
    PipelineConfig,
    config_from_text,
    config_hash,
    config_to_text,
    estimate_cost,
    read_manifest,
    run_pipeline,
    threshold_at_fpr,
    train_model,
    verify_pair,
    write_manifest,
)


def smoke_config(**overrides):
    base = dict(
        seed=1, n_channels=2, channel_smooths=(0, 3), channel_orients=("axis",),
        patch_stride=16, n_patches=8, patch_candidate_cap=48,
        pooling_kinds=("mu",), C=0.05, blocks=1, max_rounds=30,
    )
    base.update(overrides)
    return PipelineConfig(**base)


@pytest.fixture(scope="module")
def smoke_dataset():
    return generate_synthetic(SyntheticConfig(subjects=8, images_per_subject=4, seed=1))


@pytest.fixture(scope="module")
def smoke_model(smoke_dataset):
    model, logs = train_model(smoke_dataset.images, smoke_dataset.subjects, smoke_config())
    return model, logs


def write_dataset_dir(dataset, directory):
    os.makedirs(directory, exist_ok=True)
    names = []
    for i in range(len(dataset)):
        name = f"f{i:03d}.pgm"
        write_pgm(os.path.join(directory, name), dataset.images[i])
        names.append(name)
    manifest = os.path.join(directory, "manifest.csv")
    write_manifest(manifest, names, [f"s{j}" for j in dataset.subjects])
    return manifest


class TestConfig:
    def test_text_round_trip(self):
        cfg = smoke_config(rho=2.5, quantize=True, pos_quota=123)
        back = config_from_text(config_to_text(cfg))
        assert back == cfg

    def test_hash_stable_and_sensitive(self):
        cfg = smoke_config()
        assert config_hash(cfg) == config_hash(smoke_config())
        assert config_hash(cfg) != config_hash(smoke_config(seed=2))

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown config key"):
            config_from_text("bogus=1\n")


class TestManifest:
    def test_round_trip(self, tmp_path, smoke_dataset):
        manifest_path = write_dataset_dir(smoke_dataset, tmp_path / "data")
        manifest = read_manifest(manifest_path)
        assert manifest.n_faces == len(smoke_dataset)
        assert manifest.n_pairs == len(smoke_dataset) * (len(smoke_dataset) - 1) // 2
        images = manifest.load_faces(128)
        assert images.shape == (len(smoke_dataset), 128, 128)

    def test_missing_file_rejected(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("path,subject\nnope.pgm,a\n")
        with pytest.raises(ValueError, match="missing image"):
            read_manifest(path)

    def test_wrong_size_rejected(self, tmp_path):
        img_path = tmp_path / "small.pgm"
        write_pgm(img_path, np.zeros((64, 64)))
        man = tmp_path / "m.csv"
        man.write_text(f"path,subject\n{img_path},a\n")
        manifest = read_manifest(man)
        with pytest.raises(ValueError, match="bad-input-size"):
            manifest.load_faces(128)


class TestTrainSmoke:
    def test_model_invariants(self, smoke_model):
        model, logs = smoke_model
        assert model.bank.P == 2
        assert model.pool.Q == 8
        model.check_consistent()
        assert len(model.bank.specs) == 112
        assert "channels" in logs and "patches" in logs

    def test_determinism_bit_identical_model_files(self, tmp_path, smoke_dataset):
        cfg = smoke_config()
        hashes = []
        for run in range(2):
            model, _ = train_model(smoke_dataset.images, smoke_dataset.subjects, cfg)
            path = tmp_path / f"run{run}.grfm"
            save_model(path, model)
            hashes.append(hashlib.sha256(path.read_bytes()).hexdigest())
        assert hashes[0] == hashes[1]

    def test_run_pipeline_from_manifest(self, tmp_path, smoke_dataset):
        manifest_path = write_dataset_dir(smoke_dataset, tmp_path / "data")
        manifest = read_manifest(manifest_path)
        out = tmp_path / "model.grfm"
        model, _ = run_pipeline(manifest, smoke_config(), out_path=out)
        assert out.exists()
        loaded = load_model(out)
        assert loaded.engines["mu"].svm.dim == model.engines["mu"].svm.dim

    def test_stage_failure_names_stage(self, smoke_dataset):
        bad = smoke_config(n_channels=200)  # more channels than candidates
        with pytest.raises(pipeline.StageError, match="stage channel-activation"):
            train_model(smoke_dataset.images, smoke_dataset.subjects, bad)


class TestModelFile:
    def test_save_load_save_byte_identical(self, tmp_path, smoke_model):
        model, _ = smoke_model
        p1, p2 = tmp_path / "a.grfm", tmp_path / "b.grfm"
        save_model(p1, model)
        save_model(p2, load_model(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_quantized_round_trip(self, tmp_path, smoke_dataset):
        model, _ = train_model(smoke_dataset.images, smoke_dataset.subjects,
                               smoke_config(quantize=True))
        p1, p2 = tmp_path / "q1.grfm", tmp_path / "q2.grfm"
        save_model(p1, model)
        loaded = load_model(p1)
        save_model(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()
        assert isinstance(loaded.engines["mu"].projection[0], QuantizedMatrix)

    def test_quantization_error_bounded(self):
        rng = np.random.default_rng(0)
        mat = rng.normal(size=(64, 40)).astype(np.float32)
        quant = quantize_matrix(mat)
        back = quant.dequantize()
        col_range = mat.max(axis=0) - mat.min(axis=0)
        assert np.all(np.abs(back - mat) <= col_range / 255.0 + 1e-6)

    def test_dimension_consistency_enforced(self, tmp_path, smoke_model):
        model, _ = smoke_model
        path = tmp_path / "m.grfm"
        save_model(path, model)
        loaded = load_model(path)
        loaded.engines["mu"].projection.pop()
        with pytest.raises(ValueError, match="dim-mismatch"):
            loaded.check_consistent()


class TestVerify:
    def test_self_pair_scores_zero_and_accepts(self, smoke_model, smoke_dataset):
        model, _ = smoke_model
        result = verify_pair(model, smoke_dataset.images[0], smoke_dataset.images[0])
        assert result["scores"]["mu"] == 0.0
        assert result["decision"] == "same"

    def test_bad_size_rejected(self, smoke_model):
        model, _ = smoke_model
        with pytest.raises(ValueError, match="bad-input-size"):
            verify_pair(model, np.zeros((64, 64)), np.zeros((64, 64)))

    def test_decisions_replay_harness_rates(self, smoke_model, smoke_dataset):
        model, _ = smoke_model
        eng = model.engines["mu"]
        feats = pipeline.build_face_features(
            smoke_dataset.images, model.bank, model.pool.active_specs(),
            eng.projection_model(), "mu", 0.2)
        ii, jj, labels = all_pairs(smoke_dataset.subjects)
        scores = score_pairs(feats, ii, jj, eng.svm)
        curve = evalharness.roc(scores, labels)
        # decisions at the stored threshold reproduce the curve's rates
        decisions = scores >= eng.threshold
        tpr = decisions[labels == 1].mean()
        fpr = decisions[labels == -1].mean()
        idx = int(np.argmin(np.abs(curve.thresholds - eng.threshold)))
        assert curve.thresholds[idx] == pytest.approx(eng.threshold)
        assert curve.tpr()[idx] == pytest.approx(tpr)
        assert curve.fpr()[idx] == pytest.approx(fpr)

    def test_fused_score_is_sum(self, smoke_dataset):
        cfg = smoke_config(pooling_kinds=("mu", "sigma"), n_patches=4)
        model, _ = train_model(smoke_dataset.images, smoke_dataset.subjects, cfg)
        a, b = smoke_dataset.images[0], smoke_dataset.images[5]
        result = verify_pair(model, a, b, fuse=True)
        assert result["fused_score"] == pytest.approx(
            result["scores"]["mu"] + result["scores"]["sigma"])


class TestThresholdAtFpr:
    def test_threshold_hits_requested_rate(self):
        rng = np.random.default_rng(1)
        scores = np.concatenate([rng.normal(1, 1, 200), rng.normal(-1, 1, 800)])
        labels = np.concatenate([np.ones(200), -np.ones(800)])
        t = threshold_at_fpr(scores, labels, 0.05)
        fpr = np.mean(scores[labels == -1] >= t)
        assert fpr <= 0.05
        # the next lower score level would exceed the budget
        below = np.unique(scores[scores < t])
        if below.size:
            assert np.mean(scores[labels == -1] >= below[-1]) > 0.05 - 1e-12

    def test_impossible_budget_rejects_all(self):
        scores = np.array([1.0, 1.0])
        labels = np.array([1, -1])
        t = threshold_at_fpr(scores, labels, 0.3)
        assert np.all(scores < t)


class TestEstimateCost:
    def test_headline_budget(self):
        report = estimate_cost(P=4, Q=240, d=128, p=100, w=128, h=128)
        assert 2.5e6 <= report.total_flops <= 10e6  # within 2x of 5 MFlops
        assert abs(report.projection_bytes_quantized - 3e6) <= 0.1 * 3e6
        assert report.feature_dim == 24000

    def test_zero_channels_zero_filter_cost(self):
        assert estimate_cost(P=0).filter_flops == 0.0

    def test_terms_scale_linearly(self):
        a = estimate_cost(Q=240)
        b = estimate_cost(Q=480)
        assert b.projection_flops == 2 * a.projection_flops


class TestKfold:
    def test_two_folds_subject_disjoint(self):
        ds = generate_synthetic(SyntheticConfig(subjects=4, images_per_subject=4, seed=2))
        folds = evalharness.subject_folds(ds.subjects, 2, seed=0)
        assert set(folds[0]) | set(folds[1]) == set(range(4))
        assert not set(folds[0]) & set(folds[1])

    def test_protocol_runs_and_summarizes(self):
        ds = generate_synthetic(SyntheticConfig(subjects=6, images_per_subject=4, seed=3))
        cfg = smoke_config(n_patches=4, patch_candidate_cap=24,
                           selection_pos_pairs=200, selection_neg_pairs=600)
        out = kfold_protocol(ds, 3, cfg)
        assert len(out["accuracies"]) == 3
        mean, stderr = evalharness.fold_summary(out["accuracies"])
        assert out["mean"] == pytest.approx(mean)
        assert out["stderr"] == pytest.approx(stderr)
        assert all(0.0 <= a <= 1.0 for a in out["accuracies"])

    def test_needs_enough_subjects(self):
        ds = generate_synthetic(SyntheticConfig(subjects=2, images_per_subject=3, seed=4))
        with pytest.raises(ValueError, match="insufficient-subjects"):
            kfold_protocol(ds, 5, smoke_config())


class TestAgainstPixelBaseline:
    def test_pipeline_beats_raw_pixel_nearest_neighbor(self):
        # margin fixed from a calibration run of the baseline (seed 11)
        ds = generate_synthetic(SyntheticConfig(subjects=12, images_per_subject=5,
                                                seed=11))
        train = ds.subjects < 8
        test = ~train
        cfg = smoke_config(n_channels=3, n_patches=12, patch_candidate_cap=64, C=0.2)
        model, _ = train_model(ds.images[train], ds.subjects[train], cfg)
        eng = model.engines["mu"]
        feats = pipeline.build_face_features(
            ds.images[test], model.bank, model.pool.active_specs(),
            eng.projection_model(), "mu", 0.2)
        ii, jj, labels = all_pairs(ds.subjects[test])
        scores = score_pairs(feats, ii, jj, eng.svm)
        tpr_model = evalharness.tpr_at_fpr(evalharness.roc(scores, labels), 0.01)
        pix = ds.images[test].reshape(test.sum(), -1)
        d = pix[ii] - pix[jj]
        base_scores = -np.sqrt(np.einsum("ij,ij->i", d, d))
        tpr_base = evalharness.tpr_at_fpr(evalharness.roc(base_scores, labels), 0.01)
        assert tpr_model >= tpr_base + 0.05
