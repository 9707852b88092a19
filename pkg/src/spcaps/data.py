"""Datasets: the synthetic shape classes and directory ingestion."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .slic import Segmentation, SlicParams, segment
from .synth import CLASS_NAMES, shape_image
from .tensorio import FormatError, Image, read_ppm, write_pgm, write_ppm

log = logging.getLogger(__name__)


@dataclass(eq=False)
class Sample:
    image: Image
    label: int
    fg_mask: np.ndarray | None = None  # known foreground, synthetic data only
    _segs: dict = field(default_factory=dict, repr=False)

    def segmentation(self, params: SlicParams) -> Segmentation:
        """SLIC labels for this image, computed once per parameter set."""
        seg = self._segs.get(params)
        if seg is None:
            seg = self._segs[params] = segment(self.image, params)
        return seg


@dataclass
class Dataset:
    samples: list
    class_names: tuple
    provenance: str = ""
    split: str = "all"
    skipped: int = 0

    def __post_init__(self):
        J = len(self.class_names)
        shapes = {s.image.data.shape for s in self.samples}
        if len(shapes) > 1:
            raise ValueError(f"images must share one size, got {sorted(shapes)}")
        for s in self.samples:
            if not 0 <= s.label < J:
                raise ValueError(f"label {s.label} outside [0, {J})")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def images(self, idx=None) -> np.ndarray:
        idx = range(len(self.samples)) if idx is None else idx
        return np.stack([self.samples[i].image.data for i in idx])

    def subset(self, idx, split: str) -> "Dataset":
        return Dataset([self.samples[i] for i in idx], self.class_names, self.provenance, split)


def synth_dataset(n_per_class: int, seed: int = 0, size: int = 64) -> Dataset:
    """Four shape classes on textured backgrounds, interleaved by class."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n_per_class):
        for label in range(len(CLASS_NAMES)):
            img, mask, _ = shape_image(rng, label, size)
            samples.append(Sample(Image.rgb(img), label, mask))
    return Dataset(samples, CLASS_NAMES, f"synthetic seed={seed}")


def stratified_split(dataset: Dataset, val_fraction: float = 0.25, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Hold out ``round(val_fraction * n_c)`` samples of every class."""
    if not 0 <= val_fraction < 1:
        raise ValueError("val_fraction must be in [0, 1)")
    rng = np.random.default_rng(seed)
    labels = dataset.labels
    train_idx, val_idx = [], []
    for c in range(dataset.n_classes):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_val = int(round(val_fraction * len(idx)))
        val_idx.extend(idx[:n_val].tolist())
        train_idx.extend(idx[n_val:].tolist())
    return dataset.subset(sorted(train_idx), "train"), dataset.subset(sorted(val_idx), "val")


def center_crop_resize(data: np.ndarray, size: int) -> np.ndarray:
    """Largest centered square, then nearest-neighbour resampling to ``size``."""
    h, w = data.shape[:2]
    side = min(h, w)
    y0, x0 = (h - side) // 2, (w - side) // 2
    crop = data[y0 : y0 + side, x0 : x0 + side]
    if side == size:
        return crop.copy()
    idx = ((np.arange(size) + 0.5) * side / size).astype(np.int64)
    return crop[idx][:, idx]


def ingest_dir(path, size: int = 64) -> Dataset:
    """One subdirectory per class, labels in sorted name order, PPM files only."""
    root = Path(path)
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if len(dirs) < 2:
        raise ValueError(f"{root}: need at least 2 class subdirectories")
    samples, skipped = [], 0
    for label, d in enumerate(dirs):
        files = sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() == ".ppm")
        if not files:
            raise ValueError(f"{d}: no PPM files")
        n_ok = 0
        for f in files:
            try:
                img = read_ppm(f)
            except (OSError, FormatError) as exc:
                log.warning("skipping %s: %s", f, exc)
                skipped += 1
                continue
            samples.append(Sample(Image.rgb(center_crop_resize(img.data, size)), label))
            n_ok += 1
        if n_ok == 0:
            raise ValueError(f"{d}: no readable PPM files")
    ds = Dataset(samples, tuple(d.name for d in dirs), str(root))
    ds.skipped = skipped
    return ds


def write_dataset(dataset: Dataset, out) -> None:
    """Write class folders of PPMs (plus foreground masks as PGM when known)."""
    out = Path(out)
    counters = [0] * dataset.n_classes
    for s in dataset.samples:
        d = out / f"{s.label}_{dataset.class_names[s.label]}"
        d.mkdir(parents=True, exist_ok=True)
        stem = f"{counters[s.label]:05d}"
        counters[s.label] += 1
        write_ppm(s.image, d / f"{stem}.ppm")
        if s.fg_mask is not None:
            write_pgm(Image.gray(s.fg_mask.astype(np.uint8) * 255), d / f"{stem}.mask.pgm")
