"""End-to-end training and verification orchestration.

Training runs the stages in order: receptive maps, channel activation,
patch activation, pooling, per-patch discriminant projection, and consensus
classifier training, then assembles the model container. Each stage failure
is re-raised with the stage name attached. All randomness flows from the
config seed, so a rerun with the same manifest and config produces a
byte-identical model file.
"""

from __future__ import annotations

import csv
import hashlib
import os
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import admm, evalharness, grfbank, lda, pooling, sffs
from .imgcore import read_pgm
from .modelfile import Engine, ModelFile, QuantizedMatrix, quantize_matrix, save_model
from .pairengine import SvmModel, pair_rep_rows, score_pairs
from .patchpool import generate_pool


@dataclass
class PipelineConfig:
    seed: int = 0
    face_size: int = 128
    # channel activation
    channel_smooths: tuple = (0, 3, 5, 7)
    channel_orients: tuple = ("axis", "diagonal")
    n_channels: int = 4
    # patch activation
    patch_stride: int = 4
    min_cell_pixels: int = 30
    n_patches: int = 240
    patch_candidate_cap: int = 256
    # selection
    selection_fpr: float = 0.001
    selection_pos_pairs: int = 2000
    selection_neg_pairs: int = 8000
    sffs_folds: int = 2
    # pooling / descriptors
    pooling_kinds: tuple = ("mu",)
    clip: float = 0.2
    # projection
    energy: float = 0.99
    scatter_pos_pairs: int = 20000
    scatter_neg_pairs: int = 60000
    # classifier training
    C: float = 1.0
    rho: float = 1.0
    blocks: int = 1
    max_rounds: int = 50
    eps_abs: float = 1e-4
    eps_rel: float = 1e-3
    pos_quota: int | None = None
    neg_quota: int | None = None
    rep_kind: str = "abs_diff"
    p_rep: float = 0.5
    decision_fpr: float = 0.01
    quantize: bool = False


def config_to_text(config: PipelineConfig) -> str:
    lines = []
    for f in fields(config):
        value = getattr(config, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name}={value}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> PipelineConfig:
    kwargs = {}
    types = {f.name: f for f in fields(PipelineConfig)}
    for line in text.strip().splitlines():
        if not line or line.startswith("#"):
            continue
        key, _, raw = line.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in types:
            raise ValueError(f"unknown config key {key!r}")
        default = getattr(PipelineConfig(), key)
        if isinstance(default, bool):
            kwargs[key] = raw in ("1", "True", "true")
        elif isinstance(default, int):
            kwargs[key] = int(raw)
        elif isinstance(default, float):
            kwargs[key] = float(raw)
        elif isinstance(default, tuple):
            items = [v for v in raw.split(",") if v]
            kwargs[key] = tuple(int(v) if v.lstrip("-").isdigit() else v for v in items)
        elif default is None:
            kwargs[key] = None if raw in ("None", "") else int(raw)
        else:
            kwargs[key] = raw
    return PipelineConfig(**kwargs)


def config_hash(config: PipelineConfig) -> str:
    return hashlib.sha256(config_to_text(config).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Dataset manifest: CSV of "path,subject" rows.

@dataclass
class DatasetManifest:
    paths: list[str]
    subjects: np.ndarray

    @property
    def n_faces(self) -> int:
        return len(self.paths)

    @property
    def n_pairs(self) -> int:
        n = self.n_faces
        return n * (n - 1) // 2

    def load_faces(self, face_size: int) -> np.ndarray:
        images = np.empty((self.n_faces, face_size, face_size), dtype=np.float64)
        for i, path in enumerate(self.paths):
            img = read_pgm(path)
            if img.shape != (face_size, face_size):
                raise ValueError(
                    f"bad-input-size: {path} is {img.shape[1]}x{img.shape[0]}, "
                    f"expected {face_size}x{face_size}"
                )
            images[i] = img
        return images


def read_manifest(path) -> DatasetManifest:
    paths, subjects = [], []
    base = os.path.dirname(os.path.abspath(path))
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#") or row[0] == "path":
                continue
            img, subject = row[0], row[1]
            if not subject:
                raise ValueError(f"empty subject id for {img}")
            if not os.path.isabs(img):
                img = os.path.join(base, img)
            if not os.path.exists(img):
                raise ValueError(f"missing image file {img}")
            paths.append(img)
            subjects.append(subject)
    _, numeric = np.unique(subjects, return_inverse=True)
    return DatasetManifest(paths, numeric)


def write_manifest(path, image_paths, subjects) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "subject"])
        for img, subject in zip(image_paths, subjects):
            writer.writerow([img, subject])


# ---------------------------------------------------------------------------
# Feature extraction shared by training, evaluation, and verification.

def candidate_bank(config: PipelineConfig) -> grfbank.ChannelBank:
    bank = grfbank.enumerate_bank(tuple(config.channel_smooths),
                                  tuple(config.channel_orients))
    return grfbank.ChannelBank(bank.specs, np.ones(len(bank.specs), dtype=bool))


def channel_meta_features(images: np.ndarray, bank: grfbank.ChannelBank) -> list[np.ndarray]:
    """Per-channel meta-feature matrices (one (n_faces, 544) per active channel)."""
    n = images.shape[0]
    out = [np.empty((n, pooling.META_DIM)) for _ in range(bank.P)]
    for i in range(n):
        maps = grfbank.compute_maps(images[i], bank)
        for c in range(bank.P):
            out[c][i] = pooling.channel_meta_feature(maps.planes[c])
    return out


def patch_descriptor_matrices(
    images: np.ndarray,
    bank: grfbank.ChannelBank,
    specs,
    kind: str,
    clip: float,
) -> list[np.ndarray]:
    """Normalized descriptors for each patch: list of (n_faces, d) matrices."""
    n = images.shape[0]
    dim = pooling.descriptor_dim(kind, bank.P)
    out = [np.empty((n, dim)) for _ in range(len(specs))]
    for i in range(n):
        maps = grfbank.compute_maps(images[i], bank)
        tables = [pooling.build_tables(p) for p in maps.planes]
        rows = pooling.pool_patches_batch(maps, specs, kind, tables)
        rows = pooling.normalize_rows(rows, clip)
        for q in range(len(specs)):
            out[q][i] = rows[q]
    return out


def single_face_features(image: np.ndarray, model: ModelFile, kind: str) -> np.ndarray:
    """Projected, concatenated feature vector of one face for one engine."""
    clip = float(model.header.get("clip", "0.2"))
    maps = grfbank.compute_maps(image, model.bank)
    tables = [pooling.build_tables(p) for p in maps.planes]
    specs = model.pool.active_specs()
    rows = pooling.pool_patches_batch(maps, specs, kind, tables)
    rows = pooling.normalize_rows(rows, clip)
    proj = model.engines[kind].projection_model()
    return np.concatenate(
        [lda.project(rows[q], proj.entries[q]) for q in range(len(specs))]
    )


def build_face_features(
    images: np.ndarray,
    bank: grfbank.ChannelBank,
    specs,
    proj: lda.ProjectionModel,
    kind: str,
    clip: float,
) -> np.ndarray:
    mats = patch_descriptor_matrices(images, bank, specs, kind, clip)
    return lda.project_faces(mats, proj)


# ---------------------------------------------------------------------------
# Training stages.

class StageError(RuntimeError):
    pass


def _stage(name):
    def deco(fn):
        def wrapped(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except Exception as exc:  # noqa: BLE001 - annotate and re-raise
                raise StageError(f"stage {name} failed: {exc}") from exc
        return wrapped
    return deco


def _selection_pairs(subjects, config: PipelineConfig, rng) -> tuple:
    ii, jj, labels = evalharness.all_pairs(subjects)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == -1))
    take_pos = min(n_pos, config.selection_pos_pairs)
    take_neg = min(n_neg, config.selection_neg_pairs)
    if take_pos == n_pos and take_neg == n_neg:
        return ii, jj, labels
    return evalharness.sample_pairs(subjects, take_pos, take_neg, rng)


@_stage("channel-activation")
def select_channels(images, subjects, config: PipelineConfig, rng) -> tuple:
    cand = candidate_bank(config)
    metas = channel_meta_features(images, cand)
    pairs = _selection_pairs(subjects, config, rng)
    result = sffs.sffs_select(
        sffs.CandidateSet(metas, subjects), pairs, config.n_channels,
        fpr_target=config.selection_fpr, n_folds=config.sffs_folds,
        seed=config.seed,
    )
    # carry the selection into the full 112-channel bank
    full = grfbank.enumerate_full_bank()
    spec_to_idx = {s: i for i, s in enumerate(full.specs)}
    chosen = [spec_to_idx[cand.specs[c]] for c in result.selected]
    return full.with_active(chosen), result


@_stage("patch-activation")
def select_patches(images, subjects, bank, config: PipelineConfig, rng) -> tuple:
    pool = generate_pool(config.face_size, config.face_size,
                         config.patch_stride, config.min_cell_pixels)
    n_candidates = len(pool.specs)
    if n_candidates > config.patch_candidate_cap:
        cand_idx = np.sort(rng.choice(n_candidates, size=config.patch_candidate_cap,
                                      replace=False))
    else:
        cand_idx = np.arange(n_candidates)
    specs = [pool.specs[i] for i in cand_idx]
    descs = patch_descriptor_matrices(images, bank, specs, "mu", config.clip)
    pairs = _selection_pairs(subjects, config, rng)
    result = sffs.sffs_select(
        sffs.CandidateSet(descs, subjects), pairs, config.n_patches,
        fpr_target=config.selection_fpr, n_folds=config.sffs_folds,
        seed=config.seed,
    )
    chosen = [int(cand_idx[c]) for c in result.selected]
    return pool.with_active(chosen), result


@_stage("projection-fit")
def fit_patch_projections(descs: list[np.ndarray], subjects, config: PipelineConfig,
                          rng) -> lda.ProjectionModel:
    ii, jj, labels = evalharness.all_pairs(subjects)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == -1))
    take_pos = min(n_pos, config.scatter_pos_pairs)
    take_neg = min(n_neg, config.scatter_neg_pairs)
    if take_pos < n_pos or take_neg < n_neg:
        ii, jj, labels = evalharness.sample_pairs(subjects, take_pos, take_neg, rng)
    entries = []
    for mat in descs:
        scatter = lda.accumulate_scatter(mat, (ii, jj, labels))
        entries.append(lda.fit_projection(scatter, config.energy))
    return lda.ProjectionModel(entries)


@_stage("classifier-training")
def train_engine_svm(features: np.ndarray, subjects, config: PipelineConfig) -> tuple:
    ii, jj, labels = evalharness.all_pairs(subjects)
    reps = pair_rep_rows(features, ii, jj, config.rep_kind, config.p_rep)
    admm_cfg = admm.AdmmConfig(
        C=config.C, rho=config.rho, blocks=config.blocks,
        max_rounds=config.max_rounds, eps_abs=config.eps_abs,
        eps_rel=config.eps_rel, seed=config.seed,
        pos_quota=config.pos_quota, neg_quota=config.neg_quota,
    )
    z, report, _ = admm.train_distributed(reps, labels, admm_cfg)
    svm = SvmModel(w=z.astype(np.float32).astype(np.float64), C=config.C,
                   kind=config.rep_kind, p_rep=config.p_rep)
    scores = reps @ svm.w
    threshold = threshold_at_fpr(scores, labels, config.decision_fpr)
    return svm, threshold, scores, labels, report


def threshold_at_fpr(scores, labels, fpr: float) -> float:
    """Score threshold of the best operating point with FPR <= target.

    TPR and FPR both grow as the threshold drops, so the last compliant
    point maximizes TPR while staying within the FPR budget.
    """
    curve = evalharness.roc(scores, labels)
    ok = curve.fpr() <= fpr
    if not ok.any():
        return float(curve.thresholds[0] + 1.0)
    return float(curve.thresholds[np.flatnonzero(ok)[-1]])


def deployable_projection(matrices) -> lda.ProjectionModel:
    """Projection model exactly as a loaded model file would evaluate it."""
    entries = []
    for mat in matrices:
        dense = (mat.dequantize() if isinstance(mat, QuantizedMatrix)
                 else np.asarray(mat, dtype=np.float64))
        entries.append(lda.ProjectionEntry(dense, np.zeros(dense.shape[1])))
    return lda.ProjectionModel(entries)


def build_engine(kind: str, descs: list[np.ndarray], proj: lda.ProjectionModel,
                 subjects, config: PipelineConfig):
    """Finalize one engine: store matrices at deployment precision, then
    train the classifier and threshold on features of that same precision,
    so decisions replay exactly after a save/load cycle."""
    matrices = [e.matrix.astype(np.float32) for e in proj.entries]
    if config.quantize:
        matrices = [quantize_matrix(m) for m in matrices]
    features = lda.project_faces(descs, deployable_projection(matrices))
    svm, threshold, scores, labels, report = train_engine_svm(
        features, subjects, config)
    return Engine(kind, matrices, svm, threshold), scores, labels, report


def train_model(images: np.ndarray, subjects: np.ndarray,
                config: PipelineConfig) -> tuple[ModelFile, dict]:
    """Run all training stages on loaded faces; returns (model, stage logs)."""
    rng = np.random.default_rng(config.seed)
    logs: dict = {}
    bank, chan_result = select_channels(images, subjects, config, rng)
    logs["channels"] = chan_result
    pool, patch_result = select_patches(images, subjects, bank, config, rng)
    logs["patches"] = patch_result

    header = {
        "format": "grfface-model",
        "face_size": str(config.face_size),
        "clip": repr(config.clip),
        "rep_kind": config.rep_kind,
        "p_rep": repr(config.p_rep),
        "decision_fpr": repr(config.decision_fpr),
        "descriptor_paths": "mu:t2-pair;others:single-stat",
        "diagonal_channels": "kernel-rotation-bilinear",
        "seed": str(config.seed),
        "config_hash": config_hash(config),
    }
    engines: dict[str, Engine] = {}
    engine_scores = {}
    specs = pool.active_specs()
    for kind in config.pooling_kinds:
        descs = patch_descriptor_matrices(images, bank, specs, kind, config.clip)
        proj = fit_patch_projections(descs, subjects, config, rng)
        engine, scores, labels, report = build_engine(kind, descs, proj,
                                                      subjects, config)
        logs[f"svm_{kind}"] = report
        engines[kind] = engine
        engine_scores[kind] = scores
        header[f"threshold_{kind}"] = repr(engine.threshold)
        header[f"mean_p_{kind}"] = repr(proj.total_p / max(len(proj.entries), 1))
    if len(config.pooling_kinds) > 1:
        fused = evalharness.fuse_scores([engine_scores[k] for k in config.pooling_kinds])
        header["threshold_fused"] = repr(threshold_at_fpr(fused, labels, config.decision_fpr))
    model = ModelFile(header, bank, pool, engines)
    model.check_consistent()
    return model, logs


def run_pipeline(manifest: DatasetManifest, config: PipelineConfig,
                 out_path=None) -> tuple[ModelFile, dict]:
    """Train from a dataset manifest; optionally write the model file."""
    try:
        images = manifest.load_faces(config.face_size)
    except Exception as exc:
        raise StageError(f"stage load-faces failed: {exc}") from exc
    model, logs = train_model(images, manifest.subjects, config)
    if out_path is not None:
        save_model(out_path, model)
    return model, logs


# ---------------------------------------------------------------------------
# Verification with a trained model.

def verify_pair(model: ModelFile, image_a: np.ndarray, image_b: np.ndarray,
                fuse: bool = False) -> dict:
    """Score two aligned faces and decide at the stored threshold."""
    size = model.face_size
    for img in (image_a, image_b):
        if img.shape != (size, size):
            raise ValueError(
                f"bad-input-size: got {img.shape[1]}x{img.shape[0]}, "
                f"expected {size}x{size}"
            )
    kinds = list(model.engines)
    scores = {}
    for kind in kinds:
        eng = model.engines[kind]
        fa = single_face_features(image_a, model, kind)
        fb = single_face_features(image_b, model, kind)
        scores[kind] = float(
            score_pairs(np.stack([fa, fb]), [0], [1], eng.svm)[0]
        )
    result = {"scores": scores}
    if fuse or len(kinds) > 1:
        fused = float(sum(scores.values()))
        result["fused_score"] = fused
    if fuse and len(kinds) > 1:
        threshold = model.fused_threshold
        decision = fused >= threshold
    else:
        kind = kinds[0]
        threshold = model.engines[kind].threshold
        decision = scores[kind] >= threshold
    result["threshold"] = threshold
    result["decision"] = "same" if decision else "different"
    return result


def score_manifest(model: ModelFile, manifest: DatasetManifest,
                   fuse: bool = False) -> dict:
    """Score all pairs of a manifest with each trained engine."""
    images = manifest.load_faces(model.face_size)
    ii, jj, labels = evalharness.all_pairs(manifest.subjects)
    per_engine = {}
    for kind, eng in model.engines.items():
        feats = build_face_features(
            images, model.bank, model.pool.active_specs(),
            eng.projection_model(), kind, float(model.header.get("clip", "0.2")),
        )
        per_engine[kind] = score_pairs(feats, ii, jj, eng.svm)
    out = {"pairs": (ii, jj, labels), "scores": per_engine}
    if fuse and len(per_engine) > 1:
        out["fused"] = evalharness.fuse_scores(list(per_engine.values()))
    return out


# ---------------------------------------------------------------------------
# k-fold support (invoked from evalharness.kfold_protocol).

@dataclass
class FoldBasis:
    """Per-face candidate features computed once and shared across folds."""

    images: np.ndarray
    metas: list[np.ndarray]
    cand_bank: grfbank.ChannelBank
    pool: object
    cand_idx: np.ndarray
    desc_cache: dict = field(default_factory=dict)  # channel subset -> descriptors


def prepare_fold_basis(dataset, config: PipelineConfig) -> FoldBasis:
    rng = np.random.default_rng(config.seed)
    cand = candidate_bank(config)
    metas = channel_meta_features(dataset.images, cand)
    pool = generate_pool(config.face_size, config.face_size,
                         config.patch_stride, config.min_cell_pixels)
    n_candidates = len(pool.specs)
    if n_candidates > config.patch_candidate_cap:
        cand_idx = np.sort(rng.choice(n_candidates, size=config.patch_candidate_cap,
                                      replace=False))
    else:
        cand_idx = np.arange(n_candidates)
    return FoldBasis(dataset.images, metas, cand, pool, cand_idx)


def run_fold(dataset, basis: FoldBasis, train_mask, test_mask,
             config: PipelineConfig) -> tuple[float, evalharness.RocCurve]:
    """Train on the train faces, report balanced accuracy on held-out pairs."""
    rng = np.random.default_rng(config.seed)
    tr = np.flatnonzero(train_mask)
    te = np.flatnonzero(test_mask)
    subj_tr = dataset.subjects[tr]
    # channel selection on training faces only
    metas_tr = [m[tr] for m in basis.metas]
    pairs_tr = _selection_pairs(subj_tr, config, rng)
    chan = sffs.sffs_select(
        sffs.CandidateSet(metas_tr, subj_tr), pairs_tr, config.n_channels,
        fpr_target=config.selection_fpr, n_folds=config.sffs_folds, seed=config.seed)
    full = grfbank.enumerate_full_bank()
    spec_to_idx = {s: i for i, s in enumerate(full.specs)}
    bank = full.with_active([spec_to_idx[basis.cand_bank.specs[c]] for c in chan.selected])
    # patch selection on training faces
    cand_specs = [basis.pool.specs[i] for i in basis.cand_idx]
    key = frozenset(chan.selected)
    descs_all = basis.desc_cache.get(key)
    if descs_all is None:
        descs_all = patch_descriptor_matrices(dataset.images, bank, cand_specs, "mu", config.clip)
        basis.desc_cache[key] = descs_all
    descs_tr = [d[tr] for d in descs_all]
    patch = sffs.sffs_select(
        sffs.CandidateSet(descs_tr, subj_tr), pairs_tr, config.n_patches,
        fpr_target=config.selection_fpr, n_folds=config.sffs_folds, seed=config.seed)
    sel_descs = [descs_all[c] for c in patch.selected]
    proj = fit_patch_projections([d[tr] for d in sel_descs], subj_tr, config, rng)
    feats_all = lda.project_faces(sel_descs, proj)
    svm, threshold, tr_scores, tr_labels, _ = train_engine_svm(
        feats_all[tr], subj_tr, config)
    threshold = evalharness.best_threshold(tr_scores, tr_labels)
    # evaluate on held-out pairs
    ii, jj, labels = evalharness.all_pairs(dataset.subjects[te])
    scores = score_pairs(feats_all[te], ii, jj, svm)
    acc = evalharness.balanced_accuracy(scores, labels, threshold)
    return acc, evalharness.roc(scores, labels)


# ---------------------------------------------------------------------------
# Cost model for the extraction path.

@dataclass
class CostReport:
    filter_flops: float
    pooling_flops: float
    projection_flops: float
    normalization_flops: float
    total_flops: float
    feature_dim: int
    projection_bytes_float: int
    projection_bytes_quantized: int


def estimate_cost(P: int = 4, Q: int = 240, d: int = 128, p: int = 100,
                  w: int = 128, h: int = 128, kernel_radius: int = 8,
                  n_tables: int = 2) -> CostReport:
    """Arithmetic and memory budget of single-face feature extraction.

    Multiply-accumulates count as one flop. Pooling is costed with
    summed-area tables: building the tables is linear in the map area and
    each cell statistic is a handful of table lookups.
    """
    taps = 2 * kernel_radius + 1
    filter_flops = float(P * w * h * 2 * taps)  # two separable passes
    table_flops = float(P * w * h * 2 * n_tables)  # two prefix sums per table
    cell_flops = float(P * Q * 16 * (4 * n_tables + 4))  # corner sums + combine
    pooling_flops = table_flops + cell_flops
    projection_flops = float(Q * d * p)
    normalization_flops = float(3 * Q * d)
    total = filter_flops + pooling_flops + projection_flops + normalization_flops
    return CostReport(
        filter_flops=filter_flops,
        pooling_flops=pooling_flops,
        projection_flops=projection_flops,
        normalization_flops=normalization_flops,
        total_flops=total,
        feature_dim=Q * p,
        projection_bytes_float=Q * d * p * 4,
        projection_bytes_quantized=Q * d * p + Q * p * 8,
    )
