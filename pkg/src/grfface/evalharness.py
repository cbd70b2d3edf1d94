"""Verification evaluation: ROC curves, operating-point queries, score
fusion, synthetic identity data, and the k-fold protocol.

The TPR@FPR query is conservative: it returns the best true-positive rate
among operating points whose false-positive rate does not exceed the target,
with no interpolation between points.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


@dataclass
class RocCurve:
    """Threshold sweep summary. ``thresholds`` descend; entry i counts pairs
    scoring >= thresholds[i], so tied scores flip together."""

    thresholds: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    n_pos: int
    n_neg: int

    def tpr(self) -> np.ndarray:
        return self.tp / self.n_pos

    def fpr(self) -> np.ndarray:
        return self.fp / self.n_neg


def roc(scores, labels) -> RocCurve:
    """Build the ROC curve of scored pairs (labels +1 same / -1 different)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == -1))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("degenerate-labels: need both pair labels")
    order = np.argsort(-s, kind="stable")
    ss = s[order]
    yy = y[order]
    # last index of each tied group
    ends = np.flatnonzero(np.diff(ss) != 0)
    ends = np.concatenate([ends, [ss.size - 1]])
    tp = np.cumsum(yy == 1)[ends]
    fp = np.cumsum(yy == -1)[ends]
    return RocCurve(ss[ends], tp, fp, n_pos, n_neg)


def tpr_at_fpr(curve: RocCurve, fpr: float) -> float:
    """Best TPR among operating points with FPR <= target (no interpolation)."""
    if not 0 <= fpr <= 1:
        raise ValueError("fpr target must be in [0, 1]")
    ok = curve.fpr() <= fpr
    if not ok.any():
        return 0.0
    return float(curve.tpr()[ok].max())


def auc(curve: RocCurve) -> float:
    """Area under the curve; tied groups contribute trapezoids."""
    x = np.concatenate([[0.0], curve.fpr()])
    y = np.concatenate([[0.0], curve.tpr()])
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


def fuse_scores(score_lists) -> np.ndarray:
    """Element-wise sum of aligned per-engine score lists."""
    arrays = [np.asarray(s, dtype=np.float64) for s in score_lists]
    length = arrays[0].shape[0]
    for a in arrays:
        if a.shape[0] != length:
            raise ValueError("misaligned-scores: length mismatch")
    return np.sum(arrays, axis=0)


# ---------------------------------------------------------------------------
# Synthetic identity dataset. Each subject is a latent vector rendered as a
# mixture of oriented Gabor-like blobs; images of a subject share the latent
# pattern and differ by gain, additive noise, and a smooth warp.

@dataclass
class SyntheticConfig:
    subjects: int = 40
    images_per_subject: int = 10
    size: int = 128
    blobs: int = 8
    gain_low: float = 0.7
    gain_high: float = 1.3
    noise_sigma: float = 0.03
    warp_amplitude: float = 1.5
    seed: int = 0


@dataclass
class SyntheticDataset:
    config: SyntheticConfig
    images: np.ndarray  # (n, size, size) float64 in [0, 1]
    subjects: np.ndarray  # (n,) subject index per image
    latents: np.ndarray  # (subjects, blobs, 7)

    def __len__(self) -> int:
        return self.images.shape[0]


def _render_identity(latent: np.ndarray, size: int) -> np.ndarray:
    """Render one subject's base pattern from its latent blob parameters."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((size, size), dtype=np.float64)
    for row in latent:
        cx = size * (0.2 + 0.6 * _unit(row[0]))
        cy = size * (0.2 + 0.6 * _unit(row[1]))
        theta = np.pi * _unit(row[2])
        su = size * (0.05 + 0.10 * _unit(row[3]))
        sv = size * (0.03 + 0.07 * _unit(row[4]))
        freq = (0.5 + 2.0 * _unit(row[5])) / su
        amp = 0.4 + 0.6 * _unit(row[6])
        u = (xs - cx) * np.cos(theta) + (ys - cy) * np.sin(theta)
        v = -(xs - cx) * np.sin(theta) + (ys - cy) * np.cos(theta)
        env = np.exp(-(u * u) / (2 * su * su) - (v * v) / (2 * sv * sv))
        img += amp * env * np.cos(2 * np.pi * freq * u)
    lo, hi = img.min(), img.max()
    if hi > lo:
        img = (img - lo) / (hi - lo)
    return 0.1 + 0.8 * img


def _unit(x: float) -> float:
    """Map an unbounded latent coordinate into (0, 1)."""
    return 1.0 / (1.0 + np.exp(-x))


def _smooth_warp(img: np.ndarray, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    """Displace pixels by a low-frequency field of the given amplitude."""
    size = img.shape[0]
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    phases = rng.uniform(0, 2 * np.pi, size=4)
    freqs = rng.uniform(0.5, 1.5, size=4)
    dx = amplitude * (
        np.sin(2 * np.pi * freqs[0] * ys / size + phases[0])
        + np.cos(2 * np.pi * freqs[1] * xs / size + phases[1])
    ) / 2.0
    dy = amplitude * (
        np.sin(2 * np.pi * freqs[2] * xs / size + phases[2])
        + np.cos(2 * np.pi * freqs[3] * ys / size + phases[3])
    ) / 2.0
    if amplitude == 0:
        return img
    gx = np.clip(xs + dx, 0, size - 1)
    gy = np.clip(ys + dy, 0, size - 1)
    x0 = np.floor(gx).astype(int)
    y0 = np.floor(gy).astype(int)
    x1 = np.minimum(x0 + 1, size - 1)
    y1 = np.minimum(y0 + 1, size - 1)
    fx = gx - x0
    fy = gy - y0
    return (
        (1 - fy) * (1 - fx) * img[y0, x0]
        + (1 - fy) * fx * img[y0, x1]
        + fy * (1 - fx) * img[y1, x0]
        + fy * fx * img[y1, x1]
    )


def generate_synthetic(config: SyntheticConfig) -> SyntheticDataset:
    """Deterministic synthetic verification dataset (same seed, same bits)."""
    if config.subjects < 2 or config.images_per_subject < 2:
        raise ValueError("need at least 2 subjects with 2 images each")
    rng = np.random.default_rng(config.seed)
    latents = rng.normal(size=(config.subjects, config.blobs, 7))
    n = config.subjects * config.images_per_subject
    images = np.empty((n, config.size, config.size), dtype=np.float64)
    subjects = np.empty(n, dtype=np.int64)
    idx = 0
    for s in range(config.subjects):
        base = _render_identity(latents[s], config.size)
        for _ in range(config.images_per_subject):
            img = _smooth_warp(base, config.warp_amplitude, rng)
            gain = rng.uniform(config.gain_low, config.gain_high)
            noise = rng.normal(0, 1.0, size=img.shape)
            img = gain * img + config.noise_sigma * noise
            images[idx] = np.clip(img, 0.0, 1.0)
            subjects[idx] = s
            idx += 1
    return SyntheticDataset(config, images, subjects, latents)


def all_pairs(subjects: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All unordered index pairs with labels (+1 same subject, -1 different)."""
    n = subjects.shape[0]
    ii, jj = np.triu_indices(n, k=1)
    labels = np.where(subjects[ii] == subjects[jj], 1, -1)
    return ii, jj, labels


def sample_pairs(
    subjects: np.ndarray,
    n_pos: int,
    n_neg: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seeded pair sample with the requested label counts (without replacement)."""
    ii, jj, labels = all_pairs(subjects)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == -1)
    if n_pos > pos.size or n_neg > neg.size:
        raise ValueError("pair sample larger than pool")
    keep = np.concatenate([
        rng.choice(pos, size=n_pos, replace=False),
        rng.choice(neg, size=n_neg, replace=False),
    ])
    keep.sort()
    return ii[keep], jj[keep], labels[keep]


# ---------------------------------------------------------------------------
# k-fold verification protocol.

def subject_folds(subjects: np.ndarray, k: int, seed: int = 0) -> list[np.ndarray]:
    """Split unique subjects into k disjoint groups (seeded, near-equal)."""
    uniq = np.unique(subjects)
    if uniq.size < k:
        raise ValueError("insufficient-subjects: fewer subjects than folds")
    order = np.random.default_rng(seed).permutation(uniq)
    return [np.sort(chunk) for chunk in np.array_split(order, k)]


def fold_summary(accuracies) -> tuple[float, float]:
    """Mean and standard error of per-fold accuracies."""
    a = np.asarray(accuracies, dtype=np.float64)
    return float(a.mean()), float(a.std(ddof=1) / np.sqrt(a.size))


def balanced_accuracy(scores, labels, threshold: float) -> float:
    s = np.asarray(scores)
    y = np.asarray(labels)
    tpr = np.mean(s[y == 1] >= threshold) if np.any(y == 1) else 0.0
    tnr = np.mean(s[y == -1] < threshold) if np.any(y == -1) else 0.0
    return float((tpr + tnr) / 2.0)


def best_threshold(scores, labels) -> float:
    """Threshold maximizing balanced accuracy on the given (training) scores."""
    s = np.asarray(scores, dtype=np.float64)
    candidates = np.unique(s)
    best_t, best_acc = candidates[0], -1.0
    for t in candidates:
        acc = balanced_accuracy(s, labels, t)
        if acc > best_acc:
            best_acc, best_t = acc, t
    return float(best_t)


def kfold_protocol(dataset: SyntheticDataset, k: int, config) -> dict:
    """Subject-disjoint k-fold verification.

    Per fold the pipeline is trained on the other k-1 folds (channel and
    patch selection, projection and classifier fits, threshold choice) and
    the balanced accuracy plus ROC is measured on the held-out fold's pairs.
    """
    if k < 2:
        raise ValueError("need k >= 2 folds")
    from . import pipeline  # deferred: pipeline builds on this module

    folds = subject_folds(dataset.subjects, k, seed=config.seed)
    accs = []
    rocs = []
    basis = pipeline.prepare_fold_basis(dataset, config)
    for held in range(k):
        test_subj = folds[held]
        test_mask = np.isin(dataset.subjects, test_subj)
        acc, curve = pipeline.run_fold(dataset, basis, ~test_mask, test_mask, config)
        accs.append(acc)
        rocs.append(curve)
    mean, stderr = fold_summary(accs)
    return {"accuracies": accs, "mean": mean, "stderr": stderr, "rocs": rocs}


# ---------------------------------------------------------------------------
# CSV formats shared with the command-line tools.

def write_scores_csv(path, face_a, face_b, labels, scores) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["face_a", "face_b", "label", "score"])
        for a, b, y, s in zip(face_a, face_b, labels, scores):
            writer.writerow([a, b, int(y), repr(float(s))])


def read_scores_csv(path) -> tuple[list, list, np.ndarray, np.ndarray]:
    face_a, face_b, labels, scores = [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            face_a.append(row[0])
            face_b.append(row[1])
            labels.append(int(row[2]))
            scores.append(float(row[3]))
    return face_a, face_b, np.array(labels), np.array(scores)


def write_roc_csv(path, curve: RocCurve) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "fpr", "tpr"])
        for t, f, p in zip(curve.thresholds, curve.fpr(), curve.tpr()):
            writer.writerow([repr(float(t)), repr(float(f)), repr(float(p))])
