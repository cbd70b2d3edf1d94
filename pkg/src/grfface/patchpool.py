"""Over-complete sliding-window patch pool.

Patches carry a fixed 4x4 cell grid. The pool slides windows of nine aspect
ratios over the face at a fixed stride; window sizes per ratio (a:b) are
(4*k*a, 4*k*b) with the base multiplier k running over stride multiples, so
cell boundaries stay on the stride lattice. Windows are kept only when fully
inside the face and when every grid cell holds at least ``min_cell_pixels``
pixels. For a 128x128 face at stride 4 this yields a pool of ~8,400 patches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ASPECT_RATIOS = ((1, 1), (1, 2), (1, 3), (1, 4), (2, 1), (3, 1), (4, 1), (2, 3), (3, 2))

GRID = 4


def near_equal_splits(total: int, parts: int = GRID) -> np.ndarray:
    """Boundaries of ``parts`` near-equal spans; remainder goes to trailing spans."""
    base, rem = divmod(total, parts)
    spans = [base] * (parts - rem) + [base + 1] * rem
    return np.concatenate([[0], np.cumsum(spans)])


@dataclass(frozen=True)
class PatchSpec:
    x: int
    y: int
    w: int
    h: int

    def x_splits(self) -> np.ndarray:
        return self.x + near_equal_splits(self.w)

    def y_splits(self) -> np.ndarray:
        return self.y + near_equal_splits(self.h)

    def cells(self) -> list[tuple[int, int, int, int]]:
        """Half-open (x0, y0, x1, y1) cell rectangles, row-major."""
        xs = self.x_splits()
        ys = self.y_splits()
        return [
            (int(xs[i]), int(ys[j]), int(xs[i + 1]), int(ys[j + 1]))
            for j in range(GRID)
            for i in range(GRID)
        ]


@dataclass
class PatchPool:
    specs: tuple[PatchSpec, ...]
    active: np.ndarray
    face_w: int = 0
    face_h: int = 0

    def __post_init__(self):
        self.active = np.asarray(self.active, dtype=bool)
        if self.active.shape != (len(self.specs),):
            raise ValueError("activation mask length mismatch")

    @property
    def Q(self) -> int:
        return int(self.active.sum())

    def active_specs(self) -> list[PatchSpec]:
        return [s for s, a in zip(self.specs, self.active) if a]

    def with_active(self, indices) -> "PatchPool":
        mask = np.zeros(len(self.specs), dtype=bool)
        mask[list(indices)] = True
        return PatchPool(self.specs, mask, self.face_w, self.face_h)


def generate_pool(
    face_w: int,
    face_h: int,
    stride: int,
    min_cell_pixels: int,
    ratios=ASPECT_RATIOS,
    scales=None,
) -> PatchPool:
    """Enumerate the patch pool for a face of the given size.

    ``scales`` overrides the default base-unit schedule (units u produce
    windows (u*a, u*b) per ratio a:b); by default u runs over 4*stride,
    8*stride, ... while windows still fit.
    """
    if face_w < 32 or face_h < 32:
        raise ValueError("face too small for patch pool")
    if stride < 1:
        raise ValueError("stride must be positive")
    sizes = set()
    for a, b in ratios:
        if scales is not None:
            units = list(scales)
        else:
            units = []
            u = 4 * stride
            while u * a <= face_w and u * b <= face_h:
                units.append(u)
                u += 4 * stride
        for u in units:
            w, h = u * a, u * b
            if w > face_w or h > face_h:
                continue
            # smallest cell under the near-equal split is floor(w/4) x floor(h/4)
            if (w // GRID) * (h // GRID) < min_cell_pixels:
                continue
            sizes.add((w, h))
    specs = []
    for (w, h) in sorted(sizes):
        for y in range(0, face_h - h + 1, stride):
            for x in range(0, face_w - w + 1, stride):
                specs.append(PatchSpec(x, y, w, h))
    if not specs:
        raise ValueError("empty-pool")
    return PatchPool(tuple(specs), np.zeros(len(specs), dtype=bool), face_w, face_h)


# ---------------------------------------------------------------------------
# Text serialization, embedded in the model file.

_POOL_HEADER = "PATCHPOOL v1"


def pool_to_text(pool: PatchPool) -> str:
    lines = [_POOL_HEADER, f"{pool.face_w} {pool.face_h} {len(pool.specs)}"]
    for spec, act in zip(pool.specs, pool.active):
        lines.append(f"{spec.x} {spec.y} {spec.w} {spec.h} {int(act)}")
    return "\n".join(lines) + "\n"


def pool_from_text(text: str) -> PatchPool:
    lines = text.strip().split("\n")
    if lines[0] != _POOL_HEADER:
        raise ValueError(f"bad pool header {lines[0]!r}")
    face_w, face_h, count = (int(v) for v in lines[1].split())
    specs = []
    active = []
    for line in lines[2 : 2 + count]:
        x, y, w, h, a = (int(v) for v in line.split())
        specs.append(PatchSpec(x, y, w, h))
        active.append(bool(a))
    return PatchPool(tuple(specs), np.array(active, dtype=bool), face_w, face_h)
