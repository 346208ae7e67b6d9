"""Patching pipeline against exhaustive / per-pixel oracles."""

import colorsys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bubblekd.errors import ContractError, DataError, DegenerateInputError, ParameterError
from bubblekd.preprocess import (
    AIR_BUBBLES,
    ARTIFACT_FREE,
    BACKGROUND,
    PatchRecord,
    SourceImage,
    augment,
    augment_array,
    denormalize_array,
    extract_patches,
    foreground_mask,
    load_dataset,
    normalize,
    normalize_array,
    otsu_threshold,
    rgb_to_hsv,
    value_channel_u8,
    write_dataset,
)


def brute_otsu(hist):
    """Exhaustive search over all 256 thresholds, loop-based."""
    hist = [float(v) for v in hist]
    total = sum(hist)
    best_t, best_var = 0, -1.0
    for t in range(256):
        w0 = sum(hist[: t + 1]) / total
        w1 = 1.0 - w0
        if w0 == 0 or w1 == 0:
            var = 0.0
        else:
            mu0 = sum(i * hist[i] for i in range(t + 1)) / (w0 * total)
            mu1 = sum(i * hist[i] for i in range(t + 1, 256)) / (w1 * total)
            var = w0 * w1 * (mu0 - mu1) ** 2
        if var > best_var:
            best_var, best_t = var, t
    return best_t


class TestRgbToHsv:
    def test_white(self):
        out = rgb_to_hsv(np.full((1, 1, 3), 255, dtype=np.uint8))[0, 0]
        assert out[2] == 1.0 and out[1] == 0.0

    def test_black(self):
        out = rgb_to_hsv(np.zeros((1, 1, 3), dtype=np.uint8))[0, 0]
        assert out[2] == 0.0 and out[1] == 0.0

    def test_pure_red(self):
        img = np.zeros((1, 1, 3), dtype=np.uint8)
        img[0, 0, 0] = 255
        h, s, v = rgb_to_hsv(img)[0, 0]
        assert h == 0.0 and s == 1.0 and v == 1.0

    @given(st.integers(0, 255), st.integers(0, 255), st.integers(0, 255))
    @settings(max_examples=150, deadline=None)
    def test_matches_stdlib_oracle(self, r, g, b):
        img = np.array([[[r, g, b]]], dtype=np.uint8)
        h, s, v = rgb_to_hsv(img)[0, 0]
        oh, os_, ov = colorsys.rgb_to_hsv(r / 255, g / 255, b / 255)
        assert abs(v - ov) < 1e-12
        assert abs(s - os_) < 1e-12
        assert abs(h - oh * 360.0) % 360.0 < 1e-9


class TestOtsu:
    def test_two_modes(self):
        hist = np.zeros(256)
        hist[50] = 500
        hist[200] = 500
        t = otsu_threshold(hist)
        assert 50 <= t < 200
        assert t == brute_otsu(hist)

    def test_adjacent_bins(self):
        hist = np.zeros(256)
        hist[100] = 10
        hist[101] = 10
        assert otsu_threshold(hist) == 100

    def test_constant_rejected(self):
        hist = np.zeros(256)
        hist[42] = 1000
        with pytest.raises(DegenerateInputError):
            otsu_threshold(hist)

    def test_bad_shape_rejected(self):
        with pytest.raises(ContractError):
            otsu_threshold(np.ones(128))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=120, deadline=None)
    def test_equals_exhaustive_search(self, seed):
        rng = np.random.default_rng(seed)
        hist = np.zeros(256)
        n_bins = int(rng.integers(2, 30))
        bins = rng.choice(256, size=n_bins, replace=False)
        hist[bins] = rng.integers(1, 1000, size=n_bins)
        assert otsu_threshold(hist) == brute_otsu(hist)


class TestForegroundMask:
    def _disk_image(self, size=128, radius=40, dark=60, light=250):
        yy, xx = np.mgrid[0:size, 0:size]
        disk = (yy - size // 2) ** 2 + (xx - size // 2) ** 2 <= radius**2
        img = np.full((size, size, 3), light, dtype=np.uint8)
        img[disk] = dark
        return img, disk

    def test_dark_disk_on_white(self):
        img, disk = self._disk_image()
        fg = foreground_mask(img)
        disagreement = np.mean(fg != disk)
        assert disagreement < 0.01

    def test_all_white_rejected(self):
        img = np.full((32, 32, 3), 255, dtype=np.uint8)
        with pytest.raises(DegenerateInputError):
            foreground_mask(img)

    def test_inversion_flips_mask(self):
        img, _ = self._disk_image()
        fg = foreground_mask(img)
        fg_inv = foreground_mask(255 - img)
        assert np.array_equal(fg, ~fg_inv)


def brute_extract(image, mask, patch_size, overlap=0.70, fg_threshold=0.70):
    """Per-pixel counting oracle for the grid-cell labeling rules."""
    fg = foreground_mask(image)
    h, w = mask.shape
    out = []
    for gy in range(h // patch_size):
        for gx in range(w // patch_size):
            free = bubble = fgc = 0
            for dy in range(patch_size):
                for dx in range(patch_size):
                    y, x = gy * patch_size + dy, gx * patch_size + dx
                    if mask[y, x] == ARTIFACT_FREE:
                        free += 1
                    elif mask[y, x] == AIR_BUBBLES:
                        bubble += 1
                    if fg[y, x]:
                        fgc += 1
            area = patch_size * patch_size
            hit_free = free / area >= overlap
            hit_bubble = bubble / area >= overlap
            if hit_free == hit_bubble:
                continue
            if fgc / area < fg_threshold:
                continue
            out.append((gy, gx, 1 if hit_bubble else 0))
    return out


def _textured_source(rng, size=96, source_id="img"):
    """Random rectangle annotations over a dark field with a light border."""
    img = np.full((size, size, 3), 245, dtype=np.uint8)
    border = 8
    inner = slice(border, size - border)
    tissue = rng.integers(90, 150, size=(size, size, 3))
    img[inner, inner] = tissue[inner, inner]
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[inner, inner] = ARTIFACT_FREE
    for _ in range(int(rng.integers(1, 4))):
        y0, x0 = rng.integers(0, size - 20, size=2)
        hgt, wdt = rng.integers(12, 48, size=2)
        mask[y0 : y0 + hgt, x0 : x0 + wdt] = AIR_BUBBLES
    return SourceImage(source_id=source_id, image=img, mask=mask)


class TestExtractPatches:
    def test_fully_annotated_image(self):
        img = np.full((448, 448, 3), 100, dtype=np.uint8)
        img[0, 0] = 255  # two populated V bins so Otsu is defined
        mask = np.full((448, 448), AIR_BUBBLES, dtype=np.uint8)
        recs = extract_patches(SourceImage("a", img, mask), 224)
        assert len(recs) == 4
        assert all(r.label == 1 for r in recs)

    def test_overlap_boundary_at_70_percent(self):
        size, ps = 40, 10  # one row of 4 cells examined
        img = np.full((size, size, 3), 80, dtype=np.uint8)
        img[0, 0] = 255
        base = np.full((size, size), ARTIFACT_FREE, dtype=np.uint8)

        def cell_label_count(cover_px):
            mask = base.copy()
            # cover the first `cover_px` pixels of cell (0,0) with bubbles
            flat = np.zeros(ps * ps, dtype=bool)
            flat[:cover_px] = True
            mask[:ps, :ps][flat.reshape(ps, ps)] = AIR_BUBBLES
            recs = extract_patches(SourceImage("b", img, mask), ps)
            by_cell = {(r.grid_y, r.grid_x): r.label for r in recs}
            return by_cell.get((0, 0))

        assert cell_label_count(69) is None  # 69% in neither class's reach
        assert cell_label_count(70) == 1  # exactly 70% makes the cut

    def test_requires_annotation(self):
        img = np.full((64, 64, 3), 100, dtype=np.uint8)
        img[0, 0] = 255
        with pytest.raises(ContractError):
            extract_patches(SourceImage("c", img, None), 32)

    def test_partial_edge_cells_discarded(self):
        img = np.full((70, 70, 3), 60, dtype=np.uint8)
        img[0, 0] = 255
        mask = np.full((70, 70), ARTIFACT_FREE, dtype=np.uint8)
        recs = extract_patches(SourceImage("d", img, mask), 32)
        assert {(r.grid_y, r.grid_x) for r in recs} == {(0, 0), (0, 1), (1, 0), (1, 1)}
        assert all(r.rect[2] <= 70 and r.rect[3] <= 70 for r in recs)

    @pytest.mark.parametrize("seed", range(12))
    def test_matches_brute_force_oracle(self, seed):
        rng = np.random.default_rng(seed)
        src = _textured_source(rng)
        recs = extract_patches(src, 16)
        got = sorted((r.grid_y, r.grid_x, r.label) for r in recs)
        assert got == sorted(brute_extract(src.image, src.mask, 16))

    def test_patch_payload_matches_rect(self):
        rng = np.random.default_rng(3)
        src = _textured_source(rng)
        for r in extract_patches(src, 16):
            top, left, bottom, right = r.rect
            assert np.array_equal(r.pixels, src.image[top:bottom, left:right])

    def test_no_overlapping_rectangles(self):
        rng = np.random.default_rng(4)
        src = _textured_source(rng)
        recs = extract_patches(src, 16)
        seen = set()
        for r in recs:
            assert r.rect not in seen
            seen.add(r.rect)
            assert (r.rect[2] - r.rect[0]) == 16 and (r.rect[3] - r.rect[1]) == 16


class TestNormalize:
    def test_zero_mean_unit_std_keeps_unit_interval(self):
        px = np.arange(0, 256, dtype=np.uint8).reshape(16, 16)[:, :, None].repeat(3, axis=2)
        out = normalize_array(px, mean=(0, 0, 0), std=(1, 1, 1))
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_constant_patch_at_mean_is_zero(self):
        px = np.full((8, 8, 3), 128, dtype=np.uint8)
        mean = (128 / 255,) * 3
        out = normalize_array(px, mean=mean, std=(0.5, 0.5, 0.5))
        assert np.allclose(out, 0.0, atol=1e-6)

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        px = rng.integers(0, 256, size=(8, 8, 3)).astype(np.uint8)
        back = denormalize_array(normalize_array(px, dtype=np.float64))
        assert np.allclose(back, px, atol=1e-6)

    def test_zero_std_rejected(self):
        with pytest.raises(ParameterError):
            normalize_array(np.zeros((2, 2, 3), dtype=np.uint8), std=(0.0, 1.0, 1.0))

    def test_record_wrapper_returns_tensor(self):
        rec = PatchRecord("s", 0, 0, (0, 0, 4, 4), 0,
                          np.zeros((4, 4, 3), dtype=np.uint8), 1.0, 1.0)
        out = normalize(rec)
        assert out.shape == (4, 4, 3)


class TestAugment:
    def test_double_hflip_is_identity(self):
        rng = np.random.default_rng(0)
        px = rng.integers(0, 256, size=(8, 8, 3)).astype(np.uint8)
        assert np.array_equal(px[:, ::-1][:, ::-1], px)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_pixel_multiset_preserved(self, seed):
        rng = np.random.default_rng(seed)
        px = rng.integers(0, 256, size=(8, 8, 3)).astype(np.uint8)
        out = augment_array(px, np.random.default_rng(seed + 1))
        assert sorted(px.reshape(-1, 3).tolist()) == sorted(out.reshape(-1, 3).tolist())

    def test_fixed_seed_reproducible(self):
        rng_a = np.random.default_rng(99)
        rng_b = np.random.default_rng(99)
        px = np.random.default_rng(0).integers(0, 256, size=(8, 8, 3)).astype(np.uint8)
        outs_a = [augment_array(px, rng_a) for _ in range(10)]
        outs_b = [augment_array(px, rng_b) for _ in range(10)]
        for a, b in zip(outs_a, outs_b):
            assert np.array_equal(a, b)

    def test_label_unchanged(self):
        rec = PatchRecord("s", 0, 0, (0, 0, 4, 4), 1,
                          np.zeros((4, 4, 3), dtype=np.uint8), 1.0, 1.0)
        assert augment(rec, np.random.default_rng(0)).label == 1


class TestDatasetLayout:
    def _records(self, rng, source_id, n, label):
        out = []
        for i in range(n):
            px = rng.integers(0, 256, size=(16, 16, 3)).astype(np.uint8)
            out.append(PatchRecord(source_id, i, 0, (i * 16, 0, (i + 1) * 16, 16),
                                   label, px, 0.9, 0.95))
        return out

    def test_write_load_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        datasets = {
            "train": self._records(rng, "train_0000", 3, 0) + self._records(rng, "train_0001", 2, 1),
            "val": self._records(rng, "val_0000", 2, 1),
        }
        write_dataset(datasets, tmp_path)
        back = load_dataset(tmp_path)
        assert len(back["train"]) == 5 and len(back["val"]) == 2
        assert back["train"].label_counts() == {0: 3, 1: 2}
        orig = {(r.source_id, r.grid_y, r.grid_x): r for r in datasets["train"]}
        for r in back["train"].records:
            assert np.array_equal(r.pixels, orig[(r.source_id, r.grid_y, r.grid_x)].pixels)

    def test_leakage_detected(self, tmp_path):
        rng = np.random.default_rng(2)
        datasets = {
            "train": self._records(rng, "shared", 2, 0),
            "val": self._records(rng, "shared", 1, 0),
        }
        write_dataset(datasets, tmp_path)
        with pytest.raises(DataError, match="shared"):
            load_dataset(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path / "nope")
