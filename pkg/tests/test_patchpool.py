import numpy as np
import pytest

from grfface.patchpool import (
    ASPECT_RATIOS,
    PatchPool,
    PatchSpec,
    generate_pool,
    near_equal_splits,
    pool_from_text,
    pool_to_text,
)


def bruteforce_pool(face_w, face_h, stride, min_cell_pixels):
    """Independent enumerator applying the same schedule and constraints."""
    found = set()
    for a, b in ASPECT_RATIOS:
        k = 1
        while True:
            u = 4 * stride * k
            w, h = u * a, u * b
            if w > face_w or h > face_h:
                break
            if (w // 4) * (h // 4) >= min_cell_pixels:
                y = 0
                while y + h <= face_h:
                    x = 0
                    while x + w <= face_w:
                        found.add((x, y, w, h))
                        x += stride
                    y += stride
            k += 1
    return found


class TestSplits:
    def test_near_equal_remainder_trails(self):
        assert list(near_equal_splits(10)) == [0, 2, 4, 7, 10]
        assert list(near_equal_splits(8)) == [0, 2, 4, 6, 8]
        assert list(near_equal_splits(7)) == [0, 1, 3, 5, 7]

    def test_cells_cover_patch_exactly(self):
        spec = PatchSpec(3, 5, 13, 22)
        cells = spec.cells()
        assert len(cells) == 16
        area = sum((x1 - x0) * (y1 - y0) for x0, y0, x1, y1 in cells)
        assert area == 13 * 22
        # cells stay inside the patch
        for x0, y0, x1, y1 in cells:
            assert 3 <= x0 < x1 <= 16
            assert 5 <= y0 < y1 <= 27


class TestGeneratePool:
    def test_headline_pool_size(self):
        pool = generate_pool(128, 128, 4, 30)
        assert 8000 <= len(pool.specs) <= 12000

    def test_single_full_window(self):
        pool = generate_pool(32, 32, 32, 1, ratios=((1, 1),), scales=[32])
        assert len(pool.specs) == 1
        spec = pool.specs[0]
        assert (spec.x, spec.y, spec.w, spec.h) == (0, 0, 32, 32)

    def test_matches_bruteforce_enumerator(self):
        pool = generate_pool(64, 64, 8, 30)
        got = {(s.x, s.y, s.w, s.h) for s in pool.specs}
        assert got == bruteforce_pool(64, 64, 8, 30)
        assert len(pool.specs) == len(got)

    def test_every_patch_revalidates(self):
        pool = generate_pool(128, 128, 4, 30)
        for spec in pool.specs[:: max(len(pool.specs) // 500, 1)]:
            assert spec.x >= 0 and spec.y >= 0
            assert spec.x + spec.w <= 128 and spec.y + spec.h <= 128
            smallest = min(
                (x1 - x0) * (y1 - y0) for x0, y0, x1, y1 in spec.cells()
            )
            assert smallest >= 30

    def test_canonical_order_and_determinism(self):
        a = generate_pool(96, 96, 8, 30)
        b = generate_pool(96, 96, 8, 30)
        assert a.specs == b.specs
        keys = [(s.w, s.h, s.y, s.x) for s in a.specs]
        assert keys == sorted(keys)

    def test_specs_unique(self):
        pool = generate_pool(128, 128, 8, 30)
        assert len(set(pool.specs)) == len(pool.specs)

    def test_empty_pool_raises(self):
        with pytest.raises(ValueError, match="empty-pool"):
            generate_pool(64, 64, 4, 10**6)

    def test_active_mask_counting(self):
        pool = generate_pool(64, 64, 8, 30)
        assert pool.Q == 0
        pool2 = pool.with_active([0, 5, 6])
        assert pool2.Q == 3
        assert [s for s in pool2.active_specs()] == [
            pool.specs[0], pool.specs[5], pool.specs[6]
        ]


class TestSerialization:
    def test_text_round_trip(self):
        pool = generate_pool(64, 64, 8, 30).with_active([1, 2])
        back = pool_from_text(pool_to_text(pool))
        assert back.specs == pool.specs
        assert np.array_equal(back.active, pool.active)
        assert (back.face_w, back.face_h) == (64, 64)
