"""Sequential forward floating search over channels or patches.

The search greedily includes the candidate maximizing the objective J, then
repeatedly removes the least useful member while removal strictly improves
on the best J previously recorded at the smaller size. J is the verification
true-positive rate at a fixed false-positive rate under nearest-neighbor
scoring (negative Euclidean distance over the standardized concatenation of
the selected candidates' features), averaged over two subject-disjoint
folds.

Ties in the argmax are broken toward the lowest candidate index so runs are
deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .evalharness import roc, tpr_at_fpr


@dataclass
class CandidateSet:
    """Per-candidate feature matrices over a fixed face set.

    ``features[c]`` has shape (n_faces, dim_c); ``subjects`` labels each face
    and drives the fold split.
    """

    features: list[np.ndarray]
    subjects: np.ndarray

    def __post_init__(self):
        self.subjects = np.asarray(self.subjects)
        n = self.subjects.shape[0]
        for c, f in enumerate(self.features):
            if f.shape[0] != n:
                raise ValueError(f"candidate {c} has {f.shape[0]} rows, expected {n}")

    def __len__(self) -> int:
        return len(self.features)


@dataclass
class SelectionResult:
    selected: list[int]
    trajectory: list[tuple[int, float]]  # (size, best J recorded at that size)
    fold_j: list[float]  # per-fold J of the final set
    trace: list[str] = field(default_factory=list)
    flag: str | None = None


def _standardized(features: list[np.ndarray]) -> list[np.ndarray]:
    """Z-score each candidate's dimensions over the whole face set."""
    out = []
    for f in features:
        mu = f.mean(axis=0)
        sd = f.std(axis=0)
        sd = np.where(sd < 1e-12, 1.0, sd)
        out.append((f - mu) / sd)
    return out


def _pair_sq_dists(feat: np.ndarray, ii: np.ndarray, jj: np.ndarray) -> np.ndarray:
    d = feat[ii] - feat[jj]
    return np.einsum("ij,ij->i", d, d)


class _Objective:
    """Fold-averaged J with per-candidate pair-distance caching.

    Squared distances add across candidates (disjoint dimensions), so each
    J evaluation reduces to summing cached per-candidate vectors.
    """

    def __init__(self, candidates: CandidateSet, pairs, fpr_target: float,
                 n_folds: int = 2, seed: int = 0):
        ii, jj, labels = (np.asarray(a) for a in pairs)
        if not (np.any(labels == 1) and np.any(labels == -1)):
            raise ValueError("degenerate-pair-set: need both pair labels")
        feats = _standardized(candidates.features)
        if n_folds > 1:
            uniq = np.unique(candidates.subjects)
            order = np.random.default_rng(seed).permutation(uniq)
            groups = np.array_split(order, n_folds)
        else:
            groups = [np.unique(candidates.subjects)]
        self.fold_pairs = []
        for g in groups:
            in_fold = np.isin(candidates.subjects, g)
            keep = in_fold[ii] & in_fold[jj]
            fl = labels[keep]
            if not (np.any(fl == 1) and np.any(fl == -1)):
                raise ValueError("degenerate-pair-set: fold lacks a pair label")
            self.fold_pairs.append((ii[keep], jj[keep], fl))
        # sq_dists[c][f]: squared pair distances of candidate c on fold f
        self.sq_dists = [
            [_pair_sq_dists(f, fi, fj) for (fi, fj, _) in self.fold_pairs]
            for f in feats
        ]
        self.fpr_target = fpr_target

    def fold_js(self, selected) -> list[float]:
        js = []
        for f, (_, _, labels) in enumerate(self.fold_pairs):
            total = self.sq_dists[selected[0]][f].copy()
            for c in selected[1:]:
                total += self.sq_dists[c][f]
            scores = -np.sqrt(total)
            js.append(tpr_at_fpr(roc(scores, labels), self.fpr_target))
        return js

    def __call__(self, selected) -> float:
        return float(np.mean(self.fold_js(selected)))


def objective_j(selected, candidates: CandidateSet, pairs, fpr_target: float = 0.001) -> float:
    """Nearest-neighbor TPR at the target FPR for one candidate subset.

    Evaluated on the full pair list (no folds); pairs are (ii, jj, labels)
    index arrays into the candidate set's faces.
    """
    sel = list(selected)
    if not sel:
        raise ValueError("selected set must be non-empty")
    return _Objective(candidates, pairs, fpr_target, n_folds=1)(sel)


def sffs_select(
    candidates: CandidateSet,
    pairs,
    target_count: int,
    max_steps: int | None = None,
    fpr_target: float = 0.001,
    n_folds: int = 2,
    seed: int = 0,
) -> SelectionResult:
    """Floating search for the best ``target_count`` candidates."""
    n = len(candidates)
    if not 1 <= target_count <= n:
        raise ValueError(f"target_count {target_count} out of range 1..{n}")
    if max_steps is None:
        max_steps = 4 * target_count
    J = _Objective(candidates, pairs, fpr_target, n_folds=n_folds, seed=seed)

    selected: list[int] = []
    best_at: dict[int, float] = {}
    best_set_at: dict[int, list[int]] = {}
    trace: list[str] = []
    steps = 0
    flag = None

    def record(size: int, j: float, sel: list[int]) -> None:
        if j > best_at.get(size, -np.inf):
            best_at[size] = j
            best_set_at[size] = list(sel)

    while len(selected) < target_count:
        if steps >= max_steps:
            flag = "step-budget-exhausted"
            break
        # inclusion
        remaining = [c for c in range(n) if c not in selected]
        best_j, best_c = -np.inf, None
        for c in remaining:
            j = J(selected + [c])
            if j > best_j:  # strict: ties keep the lowest index
                best_j, best_c = j, c
        selected.append(best_c)
        steps += 1
        record(len(selected), best_j, selected)
        trace.append(f"step {len(selected)} include {best_c} {best_j:.6f}")
        # conditional exclusion
        while len(selected) >= 2 and steps < max_steps:
            best_j, worst = -np.inf, None
            for c in sorted(selected):  # ties again resolve to the lowest index
                j = J([s for s in selected if s != c])
                if j > best_j:
                    best_j, worst = j, c
            if best_j > best_at.get(len(selected) - 1, -np.inf):
                selected.remove(worst)
                steps += 1
                record(len(selected), best_j, selected)
                trace.append(f"step {len(selected)} exclude {worst} {best_j:.6f}")
            else:
                break

    if flag == "step-budget-exhausted" and best_set_at:
        size = max(best_set_at)
        selected = best_set_at[size]
    trajectory = sorted(best_at.items())
    return SelectionResult(
        selected=selected,
        trajectory=trajectory,
        fold_j=J.fold_js(selected) if selected else [],
        trace=trace,
        flag=flag,
    )


def write_trace(path, result: SelectionResult) -> None:
    """Line-oriented selection log: "step k action idx J" per event."""
    with open(path, "w") as fh:
        for line in result.trace:
            fh.write(line + "\n")
