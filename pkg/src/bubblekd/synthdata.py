"""Synthetic stained-tissue images with air-bubble style artifacts.

Each image is a near-white border (glass) around a pink-purple textured
field (artifact-free tissue, mask code 1). Bubbles are rendered as
alpha-blended brightened disks with a darker rim (mask code 2); the
blend weight is the difficulty knob: fainter bubbles are harder to
tell from tissue at patch scale. The annotation mask is derived from
the same geometry that drives the rendering, so it is pixel-exact.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError
from .preprocess import AIR_BUBBLES, ARTIFACT_FREE, SourceImage
from .seeding import substream

GLASS_RGB = (0.965, 0.955, 0.970)
TISSUE_RGB = (0.80, 0.55, 0.72)  # pale pink-purple
BUBBLE_RGB = (0.93, 0.88, 0.93)  # brightened, washed-out target color


@dataclass(frozen=True)
class SynthConfig:
    train_images: int = 60
    val_images: int = 15
    test_images: int = 15
    image_size: int = 256
    margin: int = 16
    bubble_count_min: int = 1
    bubble_count_max: int = 3
    bubble_radius_min: int = 40
    bubble_radius_max: int = 72
    bubble_contrast: float = 0.5  # blend weight toward BUBBLE_RGB; lower is harder
    rim_width: int = 5
    rim_strength: float = 0.35
    noise_cells: int = 8  # low-frequency value-noise grid resolution
    noise_amp: float = 0.06
    pixel_jitter: float = 0.015
    brightness_jitter: float = 0.04  # per-image multiplicative value spread
    seed: int = 0

    def __post_init__(self):
        if min(self.train_images, self.val_images, self.test_images) < 0:
            raise ConfigError("image counts must be nonnegative")
        if self.image_size <= 2 * self.margin:
            raise ConfigError("margin leaves no tissue interior")
        if self.bubble_count_min > self.bubble_count_max:
            raise ConfigError("bubble_count_min exceeds bubble_count_max")
        if self.bubble_radius_min > self.bubble_radius_max:
            raise ConfigError("bubble_radius_min exceeds bubble_radius_max")
        if not 0.0 <= self.bubble_contrast <= 1.0:
            raise ConfigError("bubble_contrast must be in [0, 1]")

    def counts(self) -> dict[str, int]:
        return {"train": self.train_images, "val": self.val_images, "test": self.test_images}


def _value_noise(rng: np.random.Generator, size: int, cells: int, amp: float) -> np.ndarray:
    """Bilinearly upsampled low-frequency noise field in [-amp, amp]."""
    grid = rng.uniform(-1.0, 1.0, size=(cells + 1, cells + 1))
    coords = np.linspace(0, cells, size)
    i0 = np.clip(coords.astype(int), 0, cells - 1)
    frac = coords - i0
    rows = grid[i0] * (1 - frac)[:, None] + grid[i0 + 1] * frac[:, None]
    field = rows[:, i0] * (1 - frac)[None, :] + rows[:, i0 + 1] * frac[None, :]
    return field * amp


def generate_image(cfg: SynthConfig, rng: np.random.Generator, source_id: str = "synthetic") -> SourceImage:
    """One rendered image plus its pixel-exact annotation mask."""
    s = cfg.image_size
    m = cfg.margin

    canvas = np.empty((s, s, 3), dtype=np.float64)
    canvas[:] = GLASS_RGB
    canvas += rng.normal(0, 0.004, size=(s, s, 3))

    mask = np.zeros((s, s), dtype=np.uint8)
    mask[m : s - m, m : s - m] = ARTIFACT_FREE

    # stained-tissue texture: low-frequency luminance field + pixel jitter,
    # scaled by a per-image brightness factor
    brightness = 1.0 + rng.uniform(-cfg.brightness_jitter, cfg.brightness_jitter)
    noise = _value_noise(rng, s, cfg.noise_cells, cfg.noise_amp)
    jitter = rng.normal(0, cfg.pixel_jitter, size=(s, s))
    lum = brightness * (1.0 + noise + jitter)
    tissue = np.asarray(TISSUE_RGB)[None, None, :] * lum[..., None]
    inner = slice(m, s - m)
    canvas[inner, inner] = tissue[inner, inner]

    yy, xx = np.mgrid[0:s, 0:s]
    n_bubbles = int(rng.integers(cfg.bubble_count_min, cfg.bubble_count_max + 1))
    for _ in range(n_bubbles):
        r = int(rng.integers(cfg.bubble_radius_min, cfg.bubble_radius_max + 1))
        lo, hi = m + r, s - m - r
        if lo >= hi:
            continue  # bubble cannot fit inside the tissue region
        cy = int(rng.integers(lo, hi))
        cx = int(rng.integers(lo, hi))
        dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        disk = dist <= r
        mask[disk] = AIR_BUBBLES
        # fainted interior: blend toward the washed-out bubble color
        a = cfg.bubble_contrast
        target = np.asarray(BUBBLE_RGB)[None, :] * lum[disk][:, None]
        canvas[disk] = (1 - a) * canvas[disk] + a * target
        # darker rim, strongest at the boundary
        rim = disk & (dist >= r - cfg.rim_width)
        fade = (dist[rim] - (r - cfg.rim_width)) / cfg.rim_width
        canvas[rim] *= (1.0 - cfg.rim_strength * fade)[:, None]

    img = np.clip(np.rint(canvas * 255.0), 0, 255).astype(np.uint8)
    return SourceImage(source_id=source_id, image=img, mask=mask)


def generate_corpus(cfg: SynthConfig, root) -> list[dict]:
    """Write per-split image/mask PNG pairs and a corpus manifest.

    Per-image seeds derive from cfg.seed, the split name, and the image
    index, so any subset regenerates identically.
    """
    root = Path(root)
    entries = []
    for split, count in cfg.counts().items():
        split_dir = root / split
        split_dir.mkdir(parents=True, exist_ok=True)
        for i in range(count):
            source_id = f"{split}_{i:04d}"
            rng = substream(cfg.seed, "synth", split, i)
            src = generate_image(cfg, rng, source_id=source_id)
            img_path = split_dir / f"{source_id}.png"
            mask_path = split_dir / f"{source_id}_mask.png"
            try:
                Image.fromarray(src.image, mode="RGB").save(img_path)
                Image.fromarray(src.mask, mode="L").save(mask_path)
            except OSError as exc:
                raise DataError(f"failed writing {img_path}: {exc}") from exc
            entries.append({"source_id": source_id, "split": split,
                            "image": img_path.name, "mask": mask_path.name})
    with open(root / "manifest.tsv", "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t")
        writer.writerow(["source_id", "split", "image", "mask"])
        for e in entries:
            writer.writerow([e["source_id"], e["split"], e["image"], e["mask"]])
    return entries


def load_corpus_image(root, split: str, source_id: str) -> SourceImage:
    root = Path(root)
    img_path = root / split / f"{source_id}.png"
    mask_path = root / split / f"{source_id}_mask.png"
    if not img_path.exists() or not mask_path.exists():
        raise DataError(f"missing image/mask pair for {source_id} under {root / split}")
    image = np.asarray(Image.open(img_path).convert("RGB"))
    mask = np.asarray(Image.open(mask_path).convert("L"))
    return SourceImage(source_id=source_id, image=image, mask=mask)


def corpus_entries(root) -> list[dict]:
    root = Path(root)
    manifest = root / "manifest.tsv"
    if not manifest.exists():
        raise DataError(f"no manifest.tsv under {root}")
    with open(manifest, newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        return list(reader)
