"""Synthetic corpus generator: determinism, mask geometry, pipeline fit."""

import math

import numpy as np
import pytest

from bubblekd.errors import ConfigError
from bubblekd.preprocess import AIR_BUBBLES, ARTIFACT_FREE, BACKGROUND, extract_patches
from bubblekd.seeding import substream
from bubblekd.synthdata import (
    SynthConfig,
    corpus_entries,
    generate_corpus,
    generate_image,
    load_corpus_image,
)


class TestGenerateImage:
    def test_zero_density_has_no_bubbles(self):
        cfg = SynthConfig(bubble_count_min=0, bubble_count_max=0)
        src = generate_image(cfg, np.random.default_rng(0))
        assert not np.any(src.mask == AIR_BUBBLES)

    def test_same_seed_same_bytes(self):
        cfg = SynthConfig()
        a = generate_image(cfg, np.random.default_rng(5))
        b = generate_image(cfg, np.random.default_rng(5))
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.mask, b.mask)

    def test_disk_area_matches_rasterization(self):
        r = 50
        cfg = SynthConfig(bubble_count_min=1, bubble_count_max=1,
                          bubble_radius_min=r, bubble_radius_max=r)
        src = generate_image(cfg, np.random.default_rng(7))
        count = int((src.mask == AIR_BUBBLES).sum())
        assert abs(count - math.pi * r * r) / (math.pi * r * r) < 0.01

    def test_margin_is_background(self):
        cfg = SynthConfig()
        src = generate_image(cfg, np.random.default_rng(1))
        m, s = cfg.margin, cfg.image_size
        assert np.all(src.mask[:m, :] == BACKGROUND)
        assert np.all(src.mask[:, :m] == BACKGROUND)
        assert np.all(src.mask[s - m :, :] == BACKGROUND)
        interior = src.mask[m : s - m, m : s - m]
        assert np.all((interior == ARTIFACT_FREE) | (interior == AIR_BUBBLES))

    def test_bubbles_brighter_than_tissue_with_darker_rim(self):
        cfg = SynthConfig(bubble_count_min=1, bubble_count_max=1)
        src = generate_image(cfg, np.random.default_rng(3))
        img = src.image.astype(float).mean(axis=-1)
        bubble = src.mask == AIR_BUBBLES
        tissue = src.mask == ARTIFACT_FREE
        assert img[bubble].mean() > img[tissue].mean()
        assert img[bubble].min() < img[tissue].min()  # rim dips darker

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            SynthConfig(image_size=16, margin=8)
        with pytest.raises(ConfigError):
            SynthConfig(bubble_radius_min=50, bubble_radius_max=40)
        with pytest.raises(ConfigError):
            SynthConfig(bubble_contrast=1.5)


class TestGenerateCorpus:
    def test_file_counts_and_layout(self, tmp_path):
        cfg = SynthConfig(train_images=10, val_images=3, test_images=3,
                          image_size=96, margin=8,
                          bubble_radius_min=16, bubble_radius_max=24)
        entries = generate_corpus(cfg, tmp_path)
        assert len(entries) == 16
        pngs = sorted(p.name for p in tmp_path.rglob("*.png"))
        assert len(pngs) == 32  # image + mask per entry
        assert (tmp_path / "train" / "train_0000.png").exists()
        assert (tmp_path / "train" / "train_0000_mask.png").exists()
        assert len(corpus_entries(tmp_path)) == 16

    def test_regeneration_is_byte_identical(self, tmp_path):
        cfg = SynthConfig(train_images=2, val_images=1, test_images=1,
                          image_size=96, margin=8,
                          bubble_radius_min=16, bubble_radius_max=24)
        generate_corpus(cfg, tmp_path / "a")
        generate_corpus(cfg, tmp_path / "b")
        for rel in sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*")):
            pa, pb = tmp_path / "a" / rel, tmp_path / "b" / rel
            if pa.is_file():
                assert pa.read_bytes() == pb.read_bytes(), rel

    def test_pipeline_yields_both_classes(self, tmp_path):
        cfg = SynthConfig(train_images=4, val_images=1, test_images=1)
        generate_corpus(cfg, tmp_path)
        counts = {0: 0, 1: 0}
        for e in corpus_entries(tmp_path):
            src = load_corpus_image(tmp_path, e["split"], e["source_id"])
            for rec in extract_patches(src, 32):
                counts[rec.label] += 1
        assert counts[0] > 0 and counts[1] > 0

    def test_split_seeds_are_independent(self, tmp_path):
        # identical indices across splits must not produce identical images
        cfg = SynthConfig(train_images=1, val_images=1, test_images=1)
        generate_corpus(cfg, tmp_path)
        a = load_corpus_image(tmp_path, "train", "train_0000")
        b = load_corpus_image(tmp_path, "val", "val_0000")
        assert not np.array_equal(a.image, b.image)
