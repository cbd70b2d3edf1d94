"""Pair representations, the squared-hinge linear SVM objective, and the
learned similarity between face features.

A pair of face features is collapsed into a single vector coordinate-wise:
``abs_diff`` takes |a_k - b_k|^p, ``product`` takes |a_k * b_k|^p. Both are
exactly symmetric in the two faces. The trained classifier has no bias term;
verification thresholds are chosen at evaluation time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

REP_KINDS = ("abs_diff", "product")


@dataclass
class SvmModel:
    w: np.ndarray
    C: float
    kind: str = "abs_diff"
    p_rep: float = 0.5

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.kind not in REP_KINDS:
            raise ValueError(f"unknown representation kind {self.kind!r}")
        if self.p_rep <= 0:
            raise ValueError("p_rep must be positive")

    @property
    def dim(self) -> int:
        return self.w.shape[0]


def pair_rep(a: np.ndarray, b: np.ndarray, kind: str = "abs_diff", p_rep: float = 0.5) -> np.ndarray:
    """Symmetric pair vector of two equally sized face features."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dim-mismatch: {a.shape} vs {b.shape}")
    if kind == "abs_diff":
        base = np.abs(a - b)
    elif kind == "product":
        base = np.abs(a * b)
    else:
        raise ValueError(f"unknown representation kind {kind!r}")
    return base ** p_rep


def pair_rep_rows(features: np.ndarray, ii, jj, kind: str = "abs_diff", p_rep: float = 0.5) -> np.ndarray:
    """Pair vectors for many index pairs at once; rows follow pair order."""
    return pair_rep(features[np.asarray(ii)], features[np.asarray(jj)], kind, p_rep)


def svm_objective(w: np.ndarray, x: np.ndarray, y: np.ndarray, C: float) -> float:
    """Squared-hinge SVM objective: w'w/2 + C * sum(max(1 - y w'x, 0)^2)."""
    if C <= 0:
        raise ValueError("C must be positive")
    w = np.asarray(w, dtype=np.float64)
    margins = 1.0 - np.asarray(y) * (np.asarray(x) @ w)
    hinge = np.maximum(margins, 0.0)
    return float(0.5 * w @ w + C * np.sum(hinge * hinge))


def similarity(face: np.ndarray, template: np.ndarray, model: SvmModel) -> float:
    """Learned pair score; higher means more likely the same subject."""
    rep = pair_rep(face, template, model.kind, model.p_rep)
    if rep.shape[0] != model.dim:
        raise ValueError(f"dim-mismatch: features {rep.shape[0]}, model {model.dim}")
    return float(model.w @ rep)


def score_pairs(features: np.ndarray, ii, jj, model: SvmModel) -> np.ndarray:
    """Similarity scores for many index pairs of a feature matrix."""
    reps = pair_rep_rows(features, ii, jj, model.kind, model.p_rep)
    if reps.shape[1] != model.dim:
        raise ValueError(f"dim-mismatch: features {reps.shape[1]}, model {model.dim}")
    return reps @ model.w
