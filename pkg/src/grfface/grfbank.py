"""Gaussian receptive-field channel bank.

A channel is a Gaussian-derivative filter G_{m,n} at one smoothing size and
one orientation. Derivative orders satisfy 0 < m+n <= 4 (14 combinations),
smoothing sizes are {0, 3, 5, 7} pixels (0 = no smoothing, pure finite
differences), and each axis-aligned channel is paired with a 45-degree
rotated one, for 14 * 4 * 2 = 112 channels in the full bank.

Kernel conventions:

* smoothing size s > 0 maps to sigma = s / 3, so the sampled Gaussian keeps
  essentially all of its mass inside the stated size;
* the zeroth-order factor is the sampled Gaussian normalized to unit sum,
  and derivative factors are its analytic derivatives (Hermite polynomial
  times Gaussian) under the same normalization;
* s = 0 channels use the central-difference stencil [-1/2, 0, 1/2] applied
  once per derivative order;
* rotated channels resample the axis-aligned taps at 45 degrees with
  bilinear interpolation on a support enlarged by sqrt(2), then restore
  zero sum (odd total order) or the original absolute tap sum (even order).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import ceil, sqrt

import numpy as np
from scipy import ndimage

from .imgcore import Kernel2D, convolve

SMOOTH_SIZES = (0, 3, 5, 7)
ORIENTATIONS = ("axis", "diagonal")

# (m, n) with 0 < m+n <= 4, lexicographic; m differentiates x, n differentiates y
DERIV_ORDERS = tuple(
    (m, n) for m in range(5) for n in range(5) if 0 < m + n <= 4
)


@dataclass(frozen=True)
class ChannelSpec:
    m: int
    n: int
    smooth_size: int
    orientation: str

    def __post_init__(self):
        if not 0 < self.m + self.n <= 4 or self.m < 0 or self.n < 0:
            raise ValueError(f"invalid-derivative-order: m={self.m} n={self.n}")
        if self.smooth_size not in SMOOTH_SIZES:
            raise ValueError(f"invalid smooth size {self.smooth_size}")
        if self.orientation not in ORIENTATIONS:
            raise ValueError(f"invalid orientation {self.orientation!r}")


@dataclass
class ChannelBank:
    """Ordered channel family with an activation mask."""

    specs: tuple[ChannelSpec, ...]
    active: np.ndarray

    def __post_init__(self):
        self.active = np.asarray(self.active, dtype=bool)
        if self.active.shape != (len(self.specs),):
            raise ValueError("activation mask length mismatch")

    @property
    def P(self) -> int:
        return int(self.active.sum())

    def active_specs(self) -> list[ChannelSpec]:
        return [s for s, a in zip(self.specs, self.active) if a]

    def with_active(self, indices) -> "ChannelBank":
        mask = np.zeros(len(self.specs), dtype=bool)
        mask[list(indices)] = True
        return ChannelBank(self.specs, mask)


@dataclass
class ReceptiveMaps:
    """Per-channel response planes of one face, in bank order."""

    planes: np.ndarray  # (P, h, w)
    face: object = None


def enumerate_bank(smooth_sizes=SMOOTH_SIZES, orientations=ORIENTATIONS) -> ChannelBank:
    """Enumerate channels orientation-major, then smooth size, then (m, n)."""
    specs = tuple(
        ChannelSpec(m, n, s, o)
        for o in orientations
        for s in smooth_sizes
        for (m, n) in DERIV_ORDERS
    )
    return ChannelBank(specs, np.zeros(len(specs), dtype=bool))


def enumerate_full_bank() -> ChannelBank:
    """The full 112-channel family, all channels inactive."""
    return enumerate_bank()


def _fd_taps(order: int) -> np.ndarray:
    """Central-difference stencil of the given order ([-1/2, 0, 1/2] composed)."""
    taps = np.array([1.0])
    base = np.array([-0.5, 0.0, 0.5])
    for _ in range(order):
        taps = np.convolve(taps, base)
    return taps


def _hermite_taps(order: int, sigma: float, radius: int) -> np.ndarray:
    """Sampled analytic derivative of the unit-sum normalized Gaussian."""
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    norm = g.sum()
    if order == 0:
        return g / norm
    t = x / (sigma * sqrt(2.0))
    coeffs = np.zeros(order + 1)
    coeffs[order] = 1.0
    herm = np.polynomial.hermite.hermval(t, coeffs)
    scale = (-1.0 / (sigma * sqrt(2.0))) ** order
    return scale * herm * g / norm


def _rotate_taps_45(taps: np.ndarray) -> np.ndarray:
    """Resample taps rotated by 45 degrees (bilinear, zero outside support)."""
    r = taps.shape[0] // 2
    rd = ceil(r * sqrt(2.0))
    out = np.zeros((2 * rd + 1, 2 * rd + 1), dtype=np.float64)
    c = 1.0 / sqrt(2.0)
    ys, xs = np.mgrid[-rd : rd + 1, -rd : rd + 1]
    # source coordinates: rotate each target point back by -45 degrees
    u = c * (xs + ys)
    v = c * (ys - xs)
    gx = u + r
    gy = v + r
    x0 = np.floor(gx).astype(int)
    y0 = np.floor(gy).astype(int)
    fx = gx - x0
    fy = gy - y0
    side = taps.shape[0]

    def sample(yy, xx):
        val = np.zeros_like(out)
        ok = (yy >= 0) & (yy < side) & (xx >= 0) & (xx < side)
        val[ok] = taps[yy[ok], xx[ok]]
        return val

    out = (
        (1 - fy) * (1 - fx) * sample(y0, x0)
        + (1 - fy) * fx * sample(y0, x0 + 1)
        + fy * (1 - fx) * sample(y0 + 1, x0)
        + fy * fx * sample(y0 + 1, x0 + 1)
    )
    return out


@lru_cache(maxsize=None)
def _build_kernel_cached(m: int, n: int, smooth_size: int, orientation: str) -> Kernel2D:
    if smooth_size == 0:
        fx = _fd_taps(m)
        fy = _fd_taps(n)
        # pad the shorter factor so the kernel stays square
        radius = max(m, n)
        fx = np.pad(fx, (radius - m, radius - m))
        fy = np.pad(fy, (radius - n, radius - n))
    else:
        sigma = smooth_size / 3.0
        radius = ceil(3.0 * sigma) + ceil((m + n) / 2)
        fx = _hermite_taps(m, sigma, radius)
        fy = _hermite_taps(n, sigma, radius)
    axis_taps = np.outer(fy, fx)
    if orientation == "axis":
        return Kernel2D(axis_taps, factors=(fy, fx))
    rotated = _rotate_taps_45(axis_taps)
    if (m + n) % 2 == 1:
        total = rotated.sum()
        mass = np.abs(rotated).sum()
        if mass > 0:
            rotated = rotated - total * np.abs(rotated) / mass
    else:
        mass = np.abs(rotated).sum()
        if mass > 0:
            rotated = rotated * (np.abs(axis_taps).sum() / mass)
    return Kernel2D(rotated)


def build_kernel(spec: ChannelSpec) -> Kernel2D:
    """Construct the sampled filter for one channel."""
    return _build_kernel_cached(spec.m, spec.n, spec.smooth_size, spec.orientation)


def compute_maps(face: np.ndarray, bank: ChannelBank, border: str = "replicate") -> ReceptiveMaps:
    """Filter a face with every active channel of the bank.

    Axis-aligned channels share their horizontal pass across channels with
    equal (smooth size, m); rotated channels convolve directly. Results are
    identical to per-channel convolution with :func:`build_kernel` taps.
    """
    if bank.P == 0:
        raise ValueError("no-active-channels")
    mode = {"replicate": "nearest", "reflect": "reflect"}[border]
    rows_cache: dict[tuple[int, int], np.ndarray] = {}
    planes = []
    for spec in bank.active_specs():
        kern = build_kernel(spec)
        if kern.factors is not None:
            fy, fx = kern.factors
            key = (spec.smooth_size, spec.m)
            rows = rows_cache.get(key)
            if rows is None:
                rows = ndimage.convolve1d(face, fx, axis=1, mode=mode)
                rows_cache[key] = rows
            planes.append(ndimage.convolve1d(rows, fy, axis=0, mode=mode))
        else:
            planes.append(convolve(face, kern, border=border))
    return ReceptiveMaps(np.stack(planes))


# ---------------------------------------------------------------------------
# Text serialization, embedded in the model file.

_BANK_HEADER = "GRFBANK v1"


def bank_to_text(bank: ChannelBank) -> str:
    lines = [_BANK_HEADER, str(len(bank.specs))]
    for spec, act in zip(bank.specs, bank.active):
        lines.append(
            f"{spec.m} {spec.n} {spec.smooth_size} {spec.orientation} {int(act)}"
        )
    return "\n".join(lines) + "\n"


def bank_from_text(text: str) -> ChannelBank:
    lines = text.strip().split("\n")
    if lines[0] != _BANK_HEADER:
        raise ValueError(f"bad bank header {lines[0]!r}")
    count = int(lines[1])
    specs = []
    active = []
    for line in lines[2 : 2 + count]:
        m, n, s, o, a = line.split()
        specs.append(ChannelSpec(int(m), int(n), int(s), o))
        active.append(bool(int(a)))
    return ChannelBank(tuple(specs), np.array(active, dtype=bool))
