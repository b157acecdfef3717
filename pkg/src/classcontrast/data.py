"""Image batches, manifest loading and the synthetic shapes dataset.

Manifests are plain text, one record per line::

    id<TAB>relative_path<TAB>label

Paths are resolved relative to the manifest's directory. Pixels are always
kept in [0, 1]; model-specific normalization happens inside the classifier
handle.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

logger = logging.getLogger(__name__)

SHAPES = ("disk", "square", "triangle", "ring", "cross")
COLORS = ((0.85, 0.25, 0.2), (0.2, 0.35, 0.85))
CLASS_NAMES = tuple(f"{c}_{s}" for c in ("red", "blue") for s in SHAPES)


@dataclass
class ImageBatch:
    pixels: np.ndarray  # (N, C, H, W) in [0, 1]
    labels: np.ndarray  # (N,) int
    ids: list[str]

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.ids = list(self.ids)
        if self.pixels.ndim != 4:
            raise ValueError(f"pixels must be (N, C, H, W), got shape {self.pixels.shape}")
        n = self.pixels.shape[0]
        if len(self.labels) != n or len(self.ids) != n:
            raise ValueError(
                f"batch size mismatch: {n} images, {len(self.labels)} labels, {len(self.ids)} ids"
            )
        if n and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        if len(set(self.ids)) != n:
            raise ValueError("image ids must be unique")

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, index) -> ImageBatch:
        if isinstance(index, (int, np.integer)):
            index = [int(index)]
        index = np.arange(len(self))[index]
        return ImageBatch(self.pixels[index], self.labels[index], [self.ids[i] for i in index])

    def check_labels(self, num_classes: int) -> None:
        if len(self) and (self.labels.min() < 0 or self.labels.max() >= num_classes):
            raise ValueError(f"labels must lie in [0, {num_classes})")

    @staticmethod
    def concat(batches: Sequence[ImageBatch]) -> ImageBatch:
        batches = [b for b in batches if len(b)]
        if not batches:
            return ImageBatch(np.zeros((0, 3, 1, 1)), np.zeros(0, dtype=np.int64), [])
        return ImageBatch(
            np.concatenate([b.pixels for b in batches]),
            np.concatenate([b.labels for b in batches]),
            [i for b in batches for i in b.ids],
        )


@dataclass
class ManifestRecord:
    id: str
    path: Path
    label: int


def read_manifest(manifest_path) -> list[ManifestRecord]:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    records = []
    seen = set()
    for lineno, line in enumerate(manifest_path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{manifest_path}:{lineno}: expected 3 tab-separated fields")
        image_id, rel, label = parts
        if image_id in seen:
            raise ValueError(f"{manifest_path}:{lineno}: duplicate id {image_id!r}")
        seen.add(image_id)
        records.append(ManifestRecord(image_id, root / rel, int(label)))
    return records


def write_manifest(manifest_path, records: Sequence[tuple[str, str, int]]) -> None:
    lines = [f"{i}\t{p}\t{int(label)}" for i, p, label in records]
    Path(manifest_path).write_text("".join(line + "\n" for line in lines))


def read_image(path) -> np.ndarray:
    """Read an image file into a (C, H, W) float array in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


@dataclass
class DatasetStream:
    """Deterministic batched iteration over a manifest.

    Missing files raise; unreadable files are skipped and counted in
    ``skipped`` (reset on every pass).
    """

    records: list[ManifestRecord]
    batch_size: int = 64
    shuffle: bool = False
    seed: int = 0
    limit: int | None = None
    skipped: list[str] = field(default_factory=list)

    def order(self) -> list[ManifestRecord]:
        records = list(self.records)
        if self.shuffle:
            perm = np.random.default_rng(self.seed).permutation(len(records))
            records = [records[i] for i in perm]
        if self.limit is not None:
            records = records[: self.limit]
        return records

    def __iter__(self) -> Iterator[ImageBatch]:
        self.skipped = []
        chunk: list[tuple[ManifestRecord, np.ndarray]] = []
        for rec in self.order():
            if not rec.path.exists():
                raise FileNotFoundError(f"image for id {rec.id!r} not found: {rec.path}")
            try:
                arr = read_image(rec.path)
            except (UnidentifiedImageError, OSError) as exc:
                logger.warning("skipping corrupt image %s (%s)", rec.id, exc)
                self.skipped.append(rec.id)
                continue
            chunk.append((rec, arr))
            if len(chunk) == self.batch_size:
                yield _to_batch(chunk)
                chunk = []
        if chunk:
            yield _to_batch(chunk)

    def load_all(self) -> ImageBatch:
        return ImageBatch.concat(list(self))


def _to_batch(chunk) -> ImageBatch:
    return ImageBatch(
        np.stack([a for _, a in chunk]),
        np.array([r.label for r, _ in chunk]),
        [r.id for r, _ in chunk],
    )


def load_dataset(manifest_path, batch_size=64, shuffle=False, seed=0, limit=None) -> DatasetStream:
    return DatasetStream(read_manifest(manifest_path), batch_size, shuffle, seed, limit)


# --- synthetic shapes -------------------------------------------------------


def _shape_mask(shape: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    if shape == "disk":
        return dy**2 + dx**2 <= r**2
    if shape == "square":
        return (np.abs(dy) <= 0.8 * r) & (np.abs(dx) <= 0.8 * r)
    if shape == "triangle":
        # apex up, base at cy + 0.8r
        inside = (dy <= 0.8 * r) & (dy >= -r)
        half_width = (dy + r) / 1.8 * 1.0
        return inside & (np.abs(dx) <= half_width)
    if shape == "ring":
        d2 = dy**2 + dx**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if shape == "cross":
        w = 0.3 * r
        return ((np.abs(dy) <= w) & (np.abs(dx) <= r)) | ((np.abs(dx) <= w) & (np.abs(dy) <= r))
    raise ValueError(f"unknown shape {shape!r}")


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.uniform(0.3, 0.7, size=(3, 4, 4))
    coarse = coarse.mean(0, keepdims=True) * 0.6 + coarse * 0.4
    img = Image.fromarray((coarse.transpose(1, 2, 0) * 255).astype(np.uint8))
    img = img.resize((size, size), Image.BILINEAR)
    return np.asarray(img, dtype=np.float64).transpose(2, 0, 1) / 255.0


def render_shape_image(rng: np.random.Generator, label: int, size: int = 32,
                       distractor_prob: float = 0.6) -> np.ndarray:
    """One synthetic image: a coloured shape of class ``label`` on a textured
    background, optionally with a smaller, fainter shape of another class."""
    img = _background(rng, size)
    objects = [(label, rng.uniform(0.2, 0.3) * size, 1.0)]
    if rng.random() < distractor_prob:
        other = int(rng.integers(len(CLASS_NAMES) - 1))
        other += other >= label
        objects.append((other, rng.uniform(0.17, 0.27) * size, rng.uniform(0.6, 1.0)))
    placed: list[tuple[float, float, float]] = []
    for cls, r, strength in objects:
        for _ in range(50):
            cy, cx = rng.uniform(r, size - r, size=2)
            if all((cy - py) ** 2 + (cx - px) ** 2 > (r + pr - 1) ** 2 for py, px, pr in placed):
                break
        placed.append((cy, cx, r))
        color = np.asarray(COLORS[cls // len(SHAPES)]) + rng.normal(0, 0.1, size=3)
        mask = _shape_mask(SHAPES[cls % len(SHAPES)], size, cy, cx, r)
        img = np.where(mask, (1 - strength) * img + strength * color[:, None, None], img)
    img = img + rng.normal(0, 0.05, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def synthesize(n: int, seed: int = 0, size: int = 32, prefix: str = "img",
               distractor_prob: float = 0.6) -> ImageBatch:
    rng = np.random.default_rng(seed)
    labels = rng.integers(len(CLASS_NAMES), size=n)
    pixels = np.stack([render_shape_image(rng, int(y), size, distractor_prob) for y in labels]) if n else np.zeros((0, 3, size, size))
    # quantize like a PNG round trip so in-memory and on-disk data agree
    pixels = np.round(pixels * 255.0) / 255.0
    return ImageBatch(pixels, labels, [f"{prefix}{i:05d}" for i in range(n)])


def write_dataset(batch: ImageBatch, root, split: str) -> Path:
    """Write a batch as PNG files plus ``<split>.tsv`` under ``root``."""
    root = Path(root)
    (root / split).mkdir(parents=True, exist_ok=True)
    records = []
    for pix, label, image_id in zip(batch.pixels, batch.labels, batch.ids):
        rel = f"{split}/{image_id}.png"
        arr = np.round(pix.transpose(1, 2, 0) * 255.0).astype(np.uint8)
        Image.fromarray(arr).save(root / rel)
        records.append((image_id, rel, int(label)))
    manifest = root / f"{split}.tsv"
    write_manifest(manifest, records)
    return manifest
