"""Patch-level discriminant projections from pairwise scatter matrices.

Scatter matrices are accumulated from labeled face pairs: difference outer
products of same-subject pairs feed S_w, different-subject pairs feed S_b.
The projection maximizes the Rayleigh quotient w'S_b w / w'S_w w via the
whitening route: diagonalize S_w, drop directions below 1e-6 of its largest
eigenvalue, rescale to unit variance, then diagonalize S_b in the whitened
space and keep the leading directions holding the requested eigenvalue
energy (0.99 by default). Retained dimension p varies per patch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_WHITEN_EPS = 1e-6


@dataclass
class ScatterPair:
    s_w: np.ndarray
    s_b: np.ndarray
    n_intra: int
    n_extra: int

    @property
    def dim(self) -> int:
        return self.s_w.shape[0]


@dataclass
class ProjectionEntry:
    matrix: np.ndarray  # (d, p)
    eigenvalues: np.ndarray  # retained spectrum, for audit
    flag: str | None = None

    @property
    def d(self) -> int:
        return self.matrix.shape[0]

    @property
    def p(self) -> int:
        return self.matrix.shape[1]


@dataclass
class ProjectionModel:
    """One projection per active patch, keyed by position in the active list."""

    entries: list[ProjectionEntry]

    @property
    def total_p(self) -> int:
        return sum(e.p for e in self.entries)


def accumulate_scatter(descriptors: np.ndarray, pairs) -> ScatterPair:
    """Sum pairwise difference outer products into S_w (same subject) and
    S_b (different subject).

    ``descriptors`` is (n_faces, d); ``pairs`` is (ii, jj, labels) with
    labels +1 for same-subject pairs and -1 otherwise.
    """
    ii, jj, labels = (np.asarray(a) for a in pairs)
    v = np.asarray(descriptors, dtype=np.float64)
    intra = labels == 1
    extra = labels == -1
    if not intra.any():
        raise ValueError("no-intra-pairs")
    dw = v[ii[intra]] - v[jj[intra]]
    db = v[ii[extra]] - v[jj[extra]]
    s_w = dw.T @ dw
    s_b = db.T @ db if extra.any() else np.zeros_like(s_w)
    # enforce exact symmetry against accumulation round-off
    s_w = (s_w + s_w.T) / 2.0
    s_b = (s_b + s_b.T) / 2.0
    return ScatterPair(s_w, s_b, int(intra.sum()), int(extra.sum()))


def fit_projection(scatter: ScatterPair, energy: float = 0.99) -> ProjectionEntry:
    """Whiten-then-diagonalize discriminant fit with the energy rule."""
    if not 0 < energy <= 1:
        raise ValueError("energy must be in (0, 1]")
    if scatter.dim < 2:
        raise ValueError("scatter dimension must be at least 2")
    flag = None
    lam, U = np.linalg.eigh(scatter.s_w)
    lam_max = lam[-1]
    if lam_max <= 0:
        # S_w carries no variance; rank S_b directly
        flag = "sw-degenerate"
        evals, evecs = np.linalg.eigh(scatter.s_b)
        evals, evecs = evals[::-1], evecs[:, ::-1]
        basis = evecs
    else:
        keep = lam > _WHITEN_EPS * lam_max
        white = U[:, keep] / np.sqrt(lam[keep])
        m = white.T @ scatter.s_b @ white
        m = (m + m.T) / 2.0
        evals, evecs = np.linalg.eigh(m)
        evals, evecs = evals[::-1], evecs[:, ::-1]
        basis = white @ evecs
    evals = np.maximum(evals, 0.0)
    total = evals.sum()
    if total <= 0:
        p = 1
    else:
        p = int(np.searchsorted(np.cumsum(evals), energy * total) + 1)
        p = min(p, evals.size)
    return ProjectionEntry(basis[:, :p].copy(), evals[:p].copy(), flag)


def project(descriptor: np.ndarray, entry: ProjectionEntry) -> np.ndarray:
    """Apply one patch's projection to its descriptor (or descriptor rows)."""
    v = np.asarray(descriptor, dtype=np.float64)
    if v.shape[-1] != entry.d:
        raise ValueError(f"dim-mismatch: descriptor {v.shape[-1]}, projection {entry.d}")
    return v @ entry.matrix


def project_faces(descriptors_per_patch: list[np.ndarray], model: ProjectionModel) -> np.ndarray:
    """Project and concatenate per-patch descriptor matrices into face features.

    ``descriptors_per_patch[q]`` is (n_faces, d_q) for active patch q; the
    result is (n_faces, sum of p_q) in active-patch order.
    """
    if len(descriptors_per_patch) != len(model.entries):
        raise ValueError("dim-mismatch: patch count differs from model")
    return np.concatenate(
        [project(d, e) for d, e in zip(descriptors_per_patch, model.entries)], axis=1
    )
