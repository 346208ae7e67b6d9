"""Foreground segmentation and grid patching of annotated RGB images.

The pipeline: RGB -> HSV, Otsu threshold on the value channel (tissue
is the darker side, glass background the brighter), then a
non-overlapping square grid anchored at the image origin. A grid cell
becomes a labeled patch only if it overlaps exactly one annotation
class by at least the overlap threshold and contains enough foreground.
Partial cells at the right/bottom edges are discarded.

Annotation mask codes: 0 background, 1 artifact-free tissue,
2 air bubbles. Emitted labels: 0 artifact-free, 1 air bubbles.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ContractError, DataError, DegenerateInputError, ParameterError
from .tensor import Tensor

BACKGROUND, ARTIFACT_FREE, AIR_BUBBLES = 0, 1, 2
CLASS_DIRS = {0: "artifact_free", 1: "air_bubbles"}
SPLITS = ("train", "val", "test")

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

MANIFEST_COLUMNS = ("source_id", "split", "grid_y", "grid_x", "label",
                    "overlap_fraction", "foreground_fraction")


@dataclass
class SourceImage:
    source_id: str
    image: np.ndarray  # (H, W, 3) uint8
    mask: np.ndarray | None = None  # (H, W) uint8 annotation codes

    def __post_init__(self):
        img = np.asarray(self.image)
        if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
            raise DataError(f"{self.source_id}: expected 8-bit RGB (H, W, 3), got "
                            f"{img.shape} {img.dtype}")
        if self.mask is not None:
            m = np.asarray(self.mask)
            if m.shape != img.shape[:2]:
                raise DataError(f"{self.source_id}: mask extents {m.shape} do not match "
                                f"image {img.shape[:2]}")


@dataclass
class PatchRecord:
    source_id: str
    grid_y: int
    grid_x: int
    rect: tuple[int, int, int, int]  # (top, left, bottom, right), exclusive end
    label: int  # 0 artifact-free, 1 air bubbles
    pixels: np.ndarray  # (P, P, 3) uint8
    overlap_fraction: float
    foreground_fraction: float


@dataclass
class PatchDataset:
    split: str
    records: list[PatchRecord] = field(default_factory=list)
    manifest_path: str | None = None

    def __len__(self) -> int:
        return len(self.records)

    def label_counts(self) -> dict[int, int]:
        out = {0: 0, 1: 0}
        for r in self.records:
            out[r.label] += 1
        return out


# -- color space ---------------------------------------------------------------


def rgb_to_hsv(image: np.ndarray) -> np.ndarray:
    """8-bit RGB to float HSV: H in [0, 360), S and V in [0, 1]."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise DataError(f"rgb_to_hsv expects uint8, got {img.dtype}")
    rgb = img.astype(np.float64) / 255.0
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    delta = v - rgb.min(axis=-1)
    s = np.where(v > 0, delta / np.where(v > 0, v, 1), 0.0)
    h = np.zeros_like(v)
    nz = delta > 0
    rmax = nz & (v == r)
    gmax = nz & ~rmax & (v == g)
    bmax = nz & ~rmax & ~gmax
    h[rmax] = ((g - b)[rmax] / delta[rmax]) % 6
    h[gmax] = (b - r)[gmax] / delta[gmax] + 2
    h[bmax] = (r - g)[bmax] / delta[bmax] + 4
    return np.stack([h * 60.0, s, v], axis=-1)


def value_channel_u8(image: np.ndarray) -> np.ndarray:
    """HSV value channel scaled to 0..255 integers (bit-exact histograms)."""
    # V = max(R, G, B), already 0..255 for uint8 input
    return np.asarray(image).max(axis=-1)


# -- Otsu ----------------------------------------------------------------------


def otsu_threshold(hist) -> int:
    """Threshold t in [0, 255] maximizing between-class variance.

    The class split is {values <= t} vs {values > t}; ties resolve to
    the lowest t. Equivalent to exhaustive search over all 256
    candidates (cumulative-moment form).
    """
    hist = np.asarray(hist, dtype=np.float64)
    if hist.shape != (256,):
        raise ContractError(f"expected a 256-bin histogram, got shape {hist.shape}")
    if np.count_nonzero(hist) < 2:
        raise DegenerateInputError("histogram has fewer than two populated bins")
    total = hist.sum()
    p = hist / total
    levels = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(p)
    m0 = np.cumsum(p * levels)
    mu = m0[-1]
    w1 = 1.0 - w0
    # between-class variance w0*w1*(mu0 - mu1)^2, zero where a class is empty
    valid = (w0 > 0) & (w1 > 0)
    var = np.zeros(256)
    var[valid] = (mu * w0[valid] - m0[valid]) ** 2 / (w0[valid] * w1[valid])
    return int(np.argmax(var))


def foreground_mask(image: np.ndarray | SourceImage) -> np.ndarray:
    """Boolean tissue mask: value channel on the darker side of Otsu."""
    img = image.image if isinstance(image, SourceImage) else image
    v = value_channel_u8(img)
    hist = np.bincount(v.reshape(-1), minlength=256)
    t = otsu_threshold(hist)
    return v <= t


# -- patch extraction ------------------------------------------------------------


def extract_patches(
    source: SourceImage,
    patch_size: int,
    overlap_threshold: float = 0.70,
    foreground_threshold: float = 0.70,
) -> list[PatchRecord]:
    """Grid cells meeting the single-class overlap and foreground rules.

    A cell is emitted iff exactly one class k in {artifact-free,
    air-bubbles} satisfies |cell intersect R_k| / patch_size^2 >=
    overlap_threshold, and the cell's Otsu-foreground fraction >=
    foreground_threshold.
    """
    if source.mask is None:
        raise ContractError(f"{source.source_id}: extract_patches needs an annotation mask")
    img = source.image
    h, w = img.shape[:2]
    if patch_size > min(h, w):
        raise ContractError(f"patch size {patch_size} exceeds image extents {h}x{w}")
    if not 0 < overlap_threshold <= 1 or not 0 <= foreground_threshold <= 1:
        raise ParameterError("thresholds must lie in (0, 1]")

    fg = foreground_mask(img)
    mask = np.asarray(source.mask)
    gy_n, gx_n = h // patch_size, w // patch_size
    area = float(patch_size * patch_size)

    ch, cw = gy_n * patch_size, gx_n * patch_size
    cells = lambda a: a[:ch, :cw].reshape(gy_n, patch_size, gx_n, patch_size)
    free_counts = cells(mask == ARTIFACT_FREE).sum(axis=(1, 3))
    bubble_counts = cells(mask == AIR_BUBBLES).sum(axis=(1, 3))
    fg_counts = cells(fg).sum(axis=(1, 3))

    records = []
    for gy in range(gy_n):
        for gx in range(gx_n):
            free_frac = free_counts[gy, gx] / area
            bubble_frac = bubble_counts[gy, gx] / area
            fg_frac = fg_counts[gy, gx] / area
            hit_free = free_frac >= overlap_threshold
            hit_bubble = bubble_frac >= overlap_threshold
            if hit_free == hit_bubble:  # zero or both classes qualify
                continue
            if fg_frac < foreground_threshold:
                continue
            label = 1 if hit_bubble else 0
            top, left = gy * patch_size, gx * patch_size
            records.append(PatchRecord(
                source_id=source.source_id,
                grid_y=gy,
                grid_x=gx,
                rect=(top, left, top + patch_size, left + patch_size),
                label=label,
                pixels=img[top : top + patch_size, left : left + patch_size].copy(),
                overlap_fraction=float(bubble_frac if label else free_frac),
                foreground_fraction=float(fg_frac),
            ))
    return records


# -- normalization and augmentation ------------------------------------------------


def normalize_array(pixels: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD,
                    dtype=np.float32) -> np.ndarray:
    """(pixels/255 - mean) / std per channel."""
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if np.any(std <= 0):
        raise ParameterError("std components must be positive")
    return ((np.asarray(pixels).astype(np.float64) / 255.0 - mean) / std).astype(dtype)


def denormalize_array(values: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    return (np.asarray(values, dtype=np.float64) * std + mean) * 255.0


def normalize(patch: PatchRecord, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> Tensor:
    return Tensor(normalize_array(patch.pixels, mean, std))


def augment_array(pixels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal/vertical flips and a k*90 degree rotation."""
    out = pixels
    if rng.random() < 0.5:
        out = out[:, ::-1]
    if rng.random() < 0.5:
        out = out[::-1, :]
    k = int(rng.integers(0, 4))
    if k:
        out = np.rot90(out, k, axes=(0, 1))
    return np.ascontiguousarray(out)


def augment(patch: PatchRecord, rng: np.random.Generator) -> PatchRecord:
    """Geometric augmentation; label and provenance unchanged."""
    return replace(patch, pixels=augment_array(patch.pixels, rng))


# -- dataset layout -------------------------------------------------------------------


def patch_filename(record: PatchRecord) -> str:
    return f"patch_{record.source_id}_{record.grid_y}_{record.grid_x}.png"


def write_dataset(datasets: dict[str, list[PatchRecord]], root) -> Path:
    """Emit <root>/<split>/<class>/patch_*.png plus one manifest.tsv."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for split, records in datasets.items():
        if split not in SPLITS:
            raise ContractError(f"unknown split {split!r}")
        for rec in records:
            cls_dir = root / split / CLASS_DIRS[rec.label]
            cls_dir.mkdir(parents=True, exist_ok=True)
            Image.fromarray(rec.pixels, mode="RGB").save(cls_dir / patch_filename(rec))
            rows.append([rec.source_id, split, rec.grid_y, rec.grid_x, rec.label,
                         f"{rec.overlap_fraction:.6f}", f"{rec.foreground_fraction:.6f}"])
    manifest = root / "manifest.tsv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t")
        writer.writerow(MANIFEST_COLUMNS)
        writer.writerows(rows)
    return manifest


def load_dataset(root) -> dict[str, PatchDataset]:
    """Read a dataset layout back; enforces the split-leakage invariant."""
    root = Path(root)
    manifest = root / "manifest.tsv"
    if not manifest.exists():
        raise DataError(f"no manifest.tsv under {root}")
    datasets: dict[str, PatchDataset] = {}
    source_split: dict[str, str] = {}
    with open(manifest, newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader)
        if tuple(header) != MANIFEST_COLUMNS:
            raise DataError(f"unexpected manifest columns {header}")
        for row in reader:
            source_id, split, gy, gx, label = row[0], row[1], int(row[2]), int(row[3]), int(row[4])
            if source_id in source_split and source_split[source_id] != split:
                raise DataError(
                    f"source {source_id} appears in splits {source_split[source_id]} and {split}"
                )
            source_split[source_id] = split
            rec = PatchRecord(
                source_id=source_id, grid_y=gy, grid_x=gx,
                rect=(0, 0, 0, 0), label=label, pixels=None,  # filled below
                overlap_fraction=float(row[5]), foreground_fraction=float(row[6]),
            )
            path = root / split / CLASS_DIRS[label] / patch_filename(rec)
            if not path.exists():
                raise DataError(f"manifest references missing patch {path}")
            rec.pixels = np.asarray(Image.open(path).convert("RGB"))
            ps = rec.pixels.shape[0]
            rec.rect = (gy * ps, gx * ps, (gy + 1) * ps, (gx + 1) * ps)
            datasets.setdefault(split, PatchDataset(split=split, manifest_path=str(manifest)))
            datasets[split].records.append(rec)
    return datasets
