"""Dataset manifests, the seeded 80/20 split, batching and synthetic fundus images."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .image_prep import Image8, luma
from .tensor_core import STREAM_SPLIT, Rng, rng_shuffle

log = logging.getLogger(__name__)

LABELS = ("healthy", "dr_signs")
LABEL_INDEX = {name: i for i, name in enumerate(LABELS)}
IMAGE_SUFFIXES = (".ppm", ".pgm", ".png")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    path: str
    label: str

    @property
    def label_index(self) -> int:
        return LABEL_INDEX[self.label]


@dataclass
class DatasetManifest:
    entries: list[Sample]
    name: str = ""
    # directory that relative entry paths resolve against
    root: str = "."

    def __len__(self) -> int:
        return len(self.entries)

    def resolve(self, sample: Sample) -> Path:
        return Path(self.root) / sample.path

    def labels(self) -> np.ndarray:
        return np.array([s.label_index for s in self.entries], dtype=np.int64)


def load_manifest(path, name: str | None = None) -> DatasetManifest:
    """Parse a ``path,label`` CSV; the header line is optional."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    entries: list[Sample] = []
    seen: set[str] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if rows and [c.strip() for c in rows[0]] == ["path", "label"]:
        rows = rows[1:]
    for rownum, row in enumerate(rows, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 2:
            raise ManifestError(f"row {rownum}: expected 2 fields 'path,label', got {len(row)}")
        img, label = row[0].strip(), row[1].strip()
        if not img:
            raise ManifestError(f"row {rownum}: empty path")
        if label not in LABEL_INDEX:
            raise ManifestError(f"row {rownum}: unknown label {label!r} (expected one of {LABELS})")
        if img in seen:
            raise ManifestError(f"row {rownum}: duplicate path {img!r}")
        seen.add(img)
        entries.append(Sample(img, label))
    return DatasetManifest(entries, name or path.stem, str(path.parent))


def write_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label"])
        for s in manifest.entries:
            w.writerow([s.path, s.label])


@dataclass(frozen=True)
class SplitAssignment:
    train: list[int]
    test: list[int]
    seed: int


def split_80_20(manifest_or_n, seed: int) -> SplitAssignment:
    """Seeded permutation; the first ``floor(0.8 N)`` indices train, the rest test."""
    n = manifest_or_n if isinstance(manifest_or_n, int) else len(manifest_or_n)
    if n < 2:
        raise ValueError(f"need at least 2 samples to split, got {n}")
    perm = rng_shuffle(Rng(seed, STREAM_SPLIT), n)
    n_train = (4 * n) // 5
    return SplitAssignment(perm[:n_train], perm[n_train:], seed)


def write_split(split: SplitAssignment, path) -> None:
    part = {i: "train" for i in split.train}
    part.update({i: "test" for i in split.test})
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "partition"])
        for i in sorted(part):
            w.writerow([i, part[i]])


def read_split(path) -> SplitAssignment:
    train, test = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for rownum, row in enumerate(csv.DictReader(fh), start=1):
            try:
                idx = int(row["index"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"split row {rownum}: bad index") from exc
            if row.get("partition") == "train":
                train.append(idx)
            elif row.get("partition") == "test":
                test.append(idx)
            else:
                raise ManifestError(f"split row {rownum}: partition must be train or test")
    return SplitAssignment(train, test, seed=-1)


def make_batches(indices, batch_size: int) -> list[list[int]]:
    """Consecutive chunks of ``batch_size``; the last one may be shorter."""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    indices = list(indices)
    return [indices[i:i + batch_size] for i in range(0, len(indices), batch_size)]


# -- directory ingestion -----------------------------------------------------

@dataclass
class SubdirRule:
    """Label by the first path component; ``None`` excludes a directory."""

    mapping: dict[str, str | None]

    def label_for(self, rel: Path) -> str | None:
        if len(rel.parts) < 2:
            return None
        return self.mapping.get(rel.parts[0])


@dataclass
class ListRule:
    """Files whose name appears in ``listed`` get ``listed_label``; all others ``other_label``."""

    listed: frozenset[str]
    listed_label: str = "healthy"
    other_label: str | None = "dr_signs"

    @classmethod
    def from_file(cls, path, **kw) -> "ListRule":
        names = set()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line and not line.startswith("#"):
                    names.add(Path(line).name)
        return cls(frozenset(names), **kw)

    def label_for(self, rel: Path) -> str | None:
        name = rel.name
        stem = rel.stem
        if name in self.listed or stem in self.listed:
            return self.listed_label
        return self.other_label


# good -> healthy, bad -> dr_signs, outlier excluded
DRIMDB_RULE = SubdirRule({"good": "healthy", "bad": "dr_signs", "outlier": None})


def ingest_directory(root, rule, name: str = "") -> DatasetManifest:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    files = sorted(
        p.relative_to(root).as_posix()
        for p in root.rglob("*")
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    )
    entries, skipped = [], 0
    for rel in files:
        label = rule.label_for(Path(rel))
        if label is None:
            skipped += 1
            continue
        if label not in LABEL_INDEX:
            raise ManifestError(f"labeling rule produced unknown label {label!r} for {rel}")
        entries.append(Sample(rel, label))
    if skipped:
        log.warning("skipped %d unlabeled images under %s", skipped, root)
    if not entries:
        raise ManifestError(f"no labeled images found under {root}")
    return DatasetManifest(entries, name or root.name, str(root))


# -- synthetic fundus images -------------------------------------------------

BRIGHT = 240


def synth_fundus(label: str, seed: int, size: int = 128) -> Image8:
    """Black frame with a shaded orange retina disc; ``dr_signs`` adds 3-8 bright blobs."""
    if label not in LABEL_INDEX:
        raise ValueError(f"unknown label {label!r}")
    if size < 32:
        raise ValueError("synthetic images need size >= 32")
    rng = Rng(seed, 7, LABEL_INDEX[label], size)
    c = (size - 1) / 2.0
    radius = 0.42 * size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    r = np.hypot(xx - c, yy - c) / radius
    inside = r <= 1.0
    shade = np.clip(1.0 - 0.45 * r ** 2, 0.0, 1.0)
    base = np.array([190.0, 95.0, 45.0])
    img = shade[..., None] * base + rng.normal((size, size, 3), std=6.0)
    # a darker optic-disc-free vessel-like texture keeps healthy images non-trivial
    img += (8.0 * np.sin(xx / 3.1) * np.cos(yy / 4.3))[..., None]
    img = np.clip(img, 0.0, 215.0)
    img[~inside] = 0.0

    if label == "dr_signs":
        count = 3 + rng.below(6)
        blob_r = max(2.0, size / 40.0)
        centers: list[tuple[float, float]] = []
        misses = 0
        while len(centers) < count:
            # small discs cannot hold 8 widely spaced blobs; tighten after repeated misses
            tight = misses >= 200
            if misses >= 2000:
                centers, misses = [], 200
            reach = radius - (blob_r + 2 if tight else 2 * blob_r + 2)
            gap = 2 * blob_r + 2 if tight else 3 * blob_r + 2
            ang = rng.uniform() * 2 * math.pi
            dist = math.sqrt(rng.uniform()) * reach
            cx, cy = c + dist * math.cos(ang), c + dist * math.sin(ang)
            if all(math.hypot(cx - px, cy - py) > gap for px, py in centers):
                centers.append((cx, cy))
            else:
                misses += 1
        for cx, cy in centers:
            blob = np.hypot(xx - cx, yy - cy) <= blob_r
            img[blob] = (255.0, 250.0, 215.0)
    return Image8.from_array(np.floor(img + 0.5))


def bright_clusters(img: Image8, threshold: int = BRIGHT) -> list[int]:
    """Sizes of 4-connected clusters whose luma exceeds ``threshold``."""
    labels, n = ndimage.label(luma(img) > threshold,
                              structure=np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], bool))
    return np.bincount(labels.ravel(), minlength=n + 1)[1:].tolist()


def synth_dataset(root, n_healthy: int, n_dr: int, seed: int = 0, size: int = 128) -> DatasetManifest:
    """Write synthetic images plus ``manifest.csv`` under ``root``."""
    from .image_prep import write_image

    root = Path(root)
    os.makedirs(root / "img", exist_ok=True)
    entries = []
    for label, count in (("healthy", n_healthy), ("dr_signs", n_dr)):
        for i in range(count):
            rel = f"img/{label}_{i:03d}.ppm"
            write_image(root / rel, synth_fundus(label, seed * 100003 + i, size))
            entries.append(Sample(rel, label))
    manifest = DatasetManifest(entries, "synthetic", str(root))
    write_manifest(manifest, root / "manifest.csv")
    return manifest
