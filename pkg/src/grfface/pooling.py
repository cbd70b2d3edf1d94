"""Cell pooling: channel meta-features, patch descriptors, normalization.

Two descriptor layouts exist side by side:

* the T2 pair layout keeps two values per cell, sum(|v|+v) and sum(|v|-v),
  giving 32 dims per channel per patch (used for channel/patch activation
  and as the final descriptor of the "mu" engine);
* the single-statistic layout keeps one value per cell (max, mean, standard
  deviation, or centered first moment), 16 dims per channel, used by the
  max/sigma/moment engines.

Both layouts are channel-major with row-major cells. Statistics other than
max are evaluated from per-channel summed-area tables so cost per cell is
constant; ``ChannelTables`` carries integrals of L, |L|, L^2, x*L, y*L and
x*y*L for one response plane.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .grfbank import ReceptiveMaps
from .imgcore import IntegralImage
from .patchpool import GRID, PatchSpec, near_equal_splits

POOLING_KINDS = ("max", "mu", "sigma", "moment")

META_DIM = 544  # 32 * (1 + 16): two T2 values per cell, 4x4 grid plus 4x4 sub-cells


def t2_cell(values) -> tuple[float, float]:
    """T2 transform of one cell: (sum(|v|+v), sum(|v|-v))."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty-cell")
    a = np.abs(v).sum()
    s = v.sum()
    return float(a + s), float(a - s)


@dataclass
class ChannelTables:
    """Summed-area tables of one response plane and its derived products."""

    i_val: IntegralImage
    i_abs: IntegralImage
    i_sq: IntegralImage
    i_xv: IntegralImage
    i_yv: IntegralImage
    i_xyv: IntegralImage


def build_tables(plane: np.ndarray) -> ChannelTables:
    h, w = plane.shape
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)[:, None]
    return ChannelTables(
        i_val=IntegralImage(plane),
        i_abs=IntegralImage(np.abs(plane)),
        i_sq=IntegralImage(plane * plane),
        i_xv=IntegralImage(plane * xs),
        i_yv=IntegralImage(plane * ys),
        i_xyv=IntegralImage(plane * xs * ys),
    )


def _grid_cells(x0: int, y0: int, w: int, h: int, parts: int) -> list[tuple[int, int, int, int]]:
    xs = x0 + near_equal_splits(w, parts)
    ys = y0 + near_equal_splits(h, parts)
    return [
        (int(xs[i]), int(ys[j]), int(xs[i + 1]), int(ys[j + 1]))
        for j in range(parts)
        for i in range(parts)
    ]


def channel_meta_feature(plane: np.ndarray) -> np.ndarray:
    """544-dim two-layer T2 meta feature of one full-face response plane.

    Layer 1: 4x4 grid over the whole plane, two T2 values per cell (32 dims).
    Layer 2: each cell subdivided into 4x4 sub-cells pooled from the raw
    plane (512 dims). Layer 1 comes first; cells and sub-cells row-major.
    """
    h, w = plane.shape
    if h < 16 or w < 16:
        raise ValueError(f"map-too-small: {w}x{h}, need at least 16x16")
    out = np.empty(META_DIM, dtype=np.float64)
    cells = _grid_cells(0, 0, w, h, GRID)
    pos = 0
    for (cx0, cy0, cx1, cy1) in cells:
        p, n = t2_cell(plane[cy0:cy1, cx0:cx1])
        out[pos], out[pos + 1] = p, n
        pos += 2
    for (cx0, cy0, cx1, cy1) in cells:
        for (sx0, sy0, sx1, sy1) in _grid_cells(cx0, cy0, cx1 - cx0, cy1 - cy0, GRID):
            p, n = t2_cell(plane[sy0:sy1, sx0:sx1])
            out[pos], out[pos + 1] = p, n
            pos += 2
    return out


def _check_patch(maps: ReceptiveMaps, patch: PatchSpec) -> None:
    h, w = maps.planes.shape[1:]
    if patch.x < 0 or patch.y < 0 or patch.x + patch.w > w or patch.y + patch.h > h:
        raise ValueError(
            f"patch-out-of-bounds: ({patch.x},{patch.y},{patch.w},{patch.h}) on {w}x{h}"
        )


def _cell_stat(kind: str, tables: ChannelTables, plane, cell) -> float:
    x0, y0, x1, y1 = cell
    if kind == "max":
        return float(plane[y0:y1, x0:x1].max())
    area = (x1 - x0) * (y1 - y0)
    s = tables.i_val.rect_sum(x0, y0, x1, y1)
    if kind == "mu":
        return s / area
    if kind == "sigma":
        sq = tables.i_sq.rect_sum(x0, y0, x1, y1)
        mu = s / area
        return float(np.sqrt(max(sq / area - mu * mu, 0.0)))
    if kind == "moment":
        # centroid of the integer pixel coordinates of the cell
        xc = (x0 + x1 - 1) / 2.0
        yc = (y0 + y1 - 1) / 2.0
        sxy = tables.i_xyv.rect_sum(x0, y0, x1, y1)
        sx = tables.i_xv.rect_sum(x0, y0, x1, y1)
        sy = tables.i_yv.rect_sum(x0, y0, x1, y1)
        return sxy - yc * sx - xc * sy + xc * yc * s
    raise ValueError(f"unknown pooling kind {kind!r}")


def pool_patch(
    maps: ReceptiveMaps,
    patch: PatchSpec,
    kind: str,
    tables: list[ChannelTables] | None = None,
) -> np.ndarray:
    """Single-statistic patch descriptor: one value per cell per channel
    (16 * P dims, channel-major)."""
    if kind not in POOLING_KINDS:
        raise ValueError(f"unknown pooling kind {kind!r}")
    if kind != "max" and tables is None:
        raise ValueError(f"{kind}-pooling requires integral tables")
    _check_patch(maps, patch)
    cells = patch.cells()
    P = maps.planes.shape[0]
    out = np.empty(P * len(cells), dtype=np.float64)
    for c in range(P):
        tab = tables[c] if tables is not None else None
        for k, cell in enumerate(cells):
            out[c * len(cells) + k] = _cell_stat(kind, tab, maps.planes[c], cell)
    return out


def t2_patch_descriptor(
    maps: ReceptiveMaps, patch: PatchSpec, tables: list[ChannelTables]
) -> np.ndarray:
    """T2-pair patch descriptor: (pos, neg) per cell per channel (32 * P dims)."""
    _check_patch(maps, patch)
    cells = patch.cells()
    P = maps.planes.shape[0]
    out = np.empty(P * len(cells) * 2, dtype=np.float64)
    pos = 0
    for c in range(P):
        tab = tables[c]
        for (x0, y0, x1, y1) in cells:
            s = tab.i_val.rect_sum(x0, y0, x1, y1)
            a = tab.i_abs.rect_sum(x0, y0, x1, y1)
            out[pos], out[pos + 1] = a + s, a - s
            pos += 2
    return out


def descriptor_dim(kind: str, P: int) -> int:
    """Descriptor length for one patch: the mu engine keeps the T2 pair."""
    return (32 if kind == "mu" else 16) * P


def patch_descriptor(
    maps: ReceptiveMaps,
    patch: PatchSpec,
    kind: str,
    tables: list[ChannelTables] | None = None,
) -> np.ndarray:
    """Descriptor for one patch under one engine's layout (see module doc)."""
    if kind == "mu":
        return t2_patch_descriptor(maps, patch, tables)
    return pool_patch(maps, patch, kind, tables)


def normalize_sift(descriptor: np.ndarray, clip: float = 0.2) -> np.ndarray:
    """L2-normalize, clamp magnitudes to ``clip``, and renormalize.

    An all-zero descriptor stays all-zero.
    """
    if not 0 < clip <= 1:
        raise ValueError("clip must be in (0, 1]")
    v = np.asarray(descriptor, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm == 0:
        return np.zeros_like(v)
    v = v / norm
    v = np.clip(v, -clip, clip)
    norm = np.linalg.norm(v)
    if norm == 0:
        return np.zeros_like(v)
    return v / norm


# ---------------------------------------------------------------------------
# Vectorized pooling over a whole patch set (fast path; matches pool_patch /
# t2_patch_descriptor bit-for-bit is not required, 1e-9 relative is).

def _cells_of_specs(specs) -> np.ndarray:
    """(n_patches*16, 4) array of cell rectangles, patch-major row-major."""
    return np.array([cell for spec in specs for cell in spec.cells()], dtype=np.int64)


def _rect_sums(table: np.ndarray, cells: np.ndarray) -> np.ndarray:
    x0, y0, x1, y1 = cells[:, 0], cells[:, 1], cells[:, 2], cells[:, 3]
    return table[y1, x1] - table[y0, x1] - table[y1, x0] + table[y0, x0]


def pool_patches_batch(
    maps: ReceptiveMaps,
    specs,
    kind: str,
    tables: list[ChannelTables],
) -> np.ndarray:
    """Descriptors for many patches at once; rows follow ``specs`` order."""
    specs = list(specs)
    cells = _cells_of_specs(specs)
    n, P = len(specs), maps.planes.shape[0]
    ncell = GRID * GRID
    area = ((cells[:, 2] - cells[:, 0]) * (cells[:, 3] - cells[:, 1])).astype(np.float64)
    if kind == "mu":
        out = np.empty((n, P * ncell * 2), dtype=np.float64)
        for c in range(P):
            s = _rect_sums(tables[c].i_val.table, cells)
            a = _rect_sums(tables[c].i_abs.table, cells)
            pair = np.stack([a + s, a - s], axis=-1).reshape(n, ncell * 2)
            out[:, c * ncell * 2 : (c + 1) * ncell * 2] = pair
        return out
    out = np.empty((n, P * ncell), dtype=np.float64)
    if kind == "max":
        for c in range(P):
            plane = maps.planes[c]
            vals = np.array(
                [plane[y0:y1, x0:x1].max() for x0, y0, x1, y1 in cells]
            )
            out[:, c * ncell : (c + 1) * ncell] = vals.reshape(n, ncell)
        return out
    for c in range(P):
        t = tables[c]
        s = _rect_sums(t.i_val.table, cells)
        if kind == "sigma":
            sq = _rect_sums(t.i_sq.table, cells)
            mu = s / area
            vals = np.sqrt(np.maximum(sq / area - mu * mu, 0.0))
        elif kind == "moment":
            xc = (cells[:, 0] + cells[:, 2] - 1) / 2.0
            yc = (cells[:, 1] + cells[:, 3] - 1) / 2.0
            vals = (
                _rect_sums(t.i_xyv.table, cells)
                - yc * _rect_sums(t.i_xv.table, cells)
                - xc * _rect_sums(t.i_yv.table, cells)
                + xc * yc * s
            )
        else:
            raise ValueError(f"unknown pooling kind {kind!r}")
        out[:, c * ncell : (c + 1) * ncell] = vals.reshape(n, ncell)
    return out


def normalize_rows(matrix: np.ndarray, clip: float = 0.2) -> np.ndarray:
    """Row-wise SIFT-style normalization (vectorized normalize_sift)."""
    v = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    safe = np.where(norms == 0, 1.0, norms)
    v = np.clip(v / safe, -clip, clip)
    norms2 = np.linalg.norm(v, axis=1, keepdims=True)
    safe2 = np.where(norms2 == 0, 1.0, norms2)
    return np.where(norms == 0, 0.0, v / safe2)


# ---------------------------------------------------------------------------
# Debug descriptor dump: "FDSC", u32 patch count, per patch u32 dim + f32s.

_FDSC_MAGIC = b"FDSC"


def write_descriptor_dump(path, descriptors) -> None:
    with open(path, "wb") as fh:
        fh.write(_FDSC_MAGIC)
        fh.write(struct.pack("<I", len(descriptors)))
        for vec in descriptors:
            arr = np.ascontiguousarray(vec, dtype="<f4")
            fh.write(struct.pack("<I", arr.size))
            fh.write(arr.tobytes())


def read_descriptor_dump(path) -> list[np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(4) != _FDSC_MAGIC:
            raise ValueError("not a descriptor dump")
        (count,) = struct.unpack("<I", fh.read(4))
        out = []
        for _ in range(count):
            (dim,) = struct.unpack("<I", fh.read(4))
            out.append(np.frombuffer(fh.read(4 * dim), dtype="<f4").astype(np.float64))
    return out
