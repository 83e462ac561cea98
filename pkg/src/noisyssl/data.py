"""Datasets, synthetic image generation and symmetric label-noise injection.

Images live in a single float32 array of shape (N, H, W, C) with intensities in
[0, 1].  Clean labels are kept next to the observed (possibly flipped) labels so
evaluation code can measure memorization and selection quality; training code
only ever sees a :class:`TrainView`.
"""
from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
SYNTHETIC = "synthetic"


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray
    clean_label: int
    id: str


@dataclass(frozen=True)
class NoiseSpec:
    noise_rate: float
    num_classes: int
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError(f"noise_rate must lie in [0, 1], got {self.noise_rate}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")


@dataclass(frozen=True)
class CorruptionRecord:
    id: str
    clean_label: int
    observed_label: int
    is_corrupted: bool

    def __post_init__(self):
        if self.is_corrupted != (self.observed_label != self.clean_label):
            raise ValueError(f"inconsistent corruption flag for sample {self.id!r}")


@dataclass(frozen=True, eq=False)
class DatasetSplit:
    """An ordered, immutable set of labeled images plus their corruption bookkeeping.

    ``observed_labels`` equals ``clean_labels`` until noise is injected.
    ``paths`` holds the source file of each image, or ``"synthetic"``.
    """

    pixels: np.ndarray
    clean_labels: np.ndarray
    observed_labels: np.ndarray
    ids: tuple[str, ...]
    num_classes: int
    name: str = "train"
    paths: tuple[str, ...] = ()
    class_names: tuple[str, ...] = ()
    noise: NoiseSpec | None = None

    def __post_init__(self):
        n = len(self.ids)
        if self.pixels.ndim != 4:
            raise DatasetError(f"pixels must be (N, H, W, C), got shape {self.pixels.shape}")
        if len(self.pixels) != n or len(self.clean_labels) != n or len(self.observed_labels) != n:
            raise DatasetError("pixels, labels and ids must have equal length")
        if len(set(self.ids)) != n:
            raise DatasetError(f"sample ids are not unique within split {self.name!r}")
        if n and (self.clean_labels.min() < 0 or self.clean_labels.max() >= self.num_classes):
            raise DatasetError("clean label outside [0, num_classes)")
        if not self.paths:
            object.__setattr__(self, "paths", (SYNTHETIC,) * n)
        for arr in (self.pixels, self.clean_labels, self.observed_labels):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(self.pixels[i], int(self.clean_labels[i]), self.ids[i])

    def __iter__(self) -> Iterator[LabeledImage]:
        return (self[i] for i in range(len(self)))

    @property
    def images(self) -> list[LabeledImage]:
        return list(self)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.pixels.shape[1:])

    @property
    def is_corrupted(self) -> np.ndarray:
        return self.observed_labels != self.clean_labels

    @property
    def records(self) -> list[CorruptionRecord]:
        flags = self.is_corrupted
        return [
            CorruptionRecord(self.ids[i], int(self.clean_labels[i]),
                             int(self.observed_labels[i]), bool(flags[i]))
            for i in range(len(self))
        ]

    def trainer_view(self) -> "TrainView":
        return TrainView(self.pixels, self.observed_labels, self.ids, self.num_classes)

    def with_observed_labels(self, observed: np.ndarray, noise: NoiseSpec | None = None) -> "DatasetSplit":
        observed = np.asarray(observed, dtype=np.int64)
        if observed.shape != self.clean_labels.shape:
            raise DatasetError("observed label array does not match split size")
        return replace(self, observed_labels=observed, noise=noise)


@dataclass(frozen=True, eq=False)
class TrainView:
    """What a trainer is allowed to see: pixels, observed labels, ids. No ground truth."""

    pixels: np.ndarray
    labels: np.ndarray
    ids: tuple[str, ...]
    num_classes: int

    def __len__(self) -> int:
        return len(self.ids)


def as_trainer_view(data: DatasetSplit | TrainView) -> TrainView:
    if isinstance(data, TrainView):
        return data
    return data.trainer_view()


# --------------------------------------------------------------------------- loading


def _read_image(path: Path, size: tuple[int, int], mode: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert(mode).resize((size[1], size[0]), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise DatasetError(f"cannot read image file {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def load_image_folder(
    root: str | Path,
    image_size: tuple[int, int],
    class_names: Sequence[str] | None = None,
    name: str = "train",
    mode: str = "RGB",
    workers: int = 4,
) -> DatasetSplit:
    """Load a ``root/<class_name>/<file>`` image tree.

    Labels are the index of the class directory in ``class_names`` (sorted
    subdirectory names by default).  Files are ordered lexicographically by
    their path relative to ``root``, so repeated loads are identical.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    if class_names is None:
        class_names = sorted(p.name for p in root.iterdir() if p.is_dir())
    if len(class_names) < 2:
        raise DatasetError(f"need at least two class directories under {root}")

    files: list[tuple[Path, int]] = []
    for label, cname in enumerate(class_names):
        cdir = root / cname
        if not cdir.is_dir():
            raise DatasetError(f"class directory {cdir} is missing")
        found = sorted(p for p in cdir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not found:
            raise DatasetError(f"class directory {cdir} contains no PNG/JPEG files")
        files.extend((p, label) for p in found)
    files.sort(key=lambda item: item[0].relative_to(root).as_posix())

    # map() keeps submission order, so the result is independent of worker count.
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        arrays = list(pool.map(lambda item: _read_image(item[0], image_size, mode), files))

    rel = tuple(p.relative_to(root).as_posix() for p, _ in files)
    labels = np.array([lab for _, lab in files], dtype=np.int64)
    return DatasetSplit(
        pixels=np.stack(arrays).astype(np.float32),
        clean_labels=labels,
        observed_labels=labels.copy(),
        ids=rel,
        num_classes=len(class_names),
        name=name,
        paths=rel,
        class_names=tuple(class_names),
    )


# --------------------------------------------------------------------------- synthetic data


def _class_layouts(num_classes: int, blobs: int = 3) -> np.ndarray:
    # Fixed per class, independent of the dataset seed, so train and test
    # splits generated with different seeds share class identity.
    rng = np.random.default_rng(20231)
    layouts = np.empty((num_classes, blobs, 2))
    for k in range(num_classes):
        while True:
            pts = rng.uniform(0.2, 0.8, size=(blobs, 2))
            d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
            if d[np.triu_indices(blobs, 1)].min() > 0.25:
                break
        layouts[k] = pts
    return layouts


def make_synthetic_dataset(
    num_classes: int,
    per_class: int,
    image_size: tuple[int, int] = (32, 32),
    seed: int = 0,
    channels: int = 3,
    name: str = "train",
    pixel_noise: float = 0.12,
) -> DatasetSplit:
    """Generate class-conditional textured images.

    Each class has its own grating orientation and a fixed, asymmetric layout of
    Gaussian blobs.  Phase, frequency, blob jitter, contrast, tint and additive
    pixel noise vary per image.  Deterministic given ``seed``.
    """
    if num_classes < 2 or per_class < 1:
        raise DatasetError("need num_classes >= 2 and per_class >= 1")
    h, w = image_size
    if h < 4 or w < 4 or channels not in (1, 3):
        raise DatasetError(f"invalid image size {image_size} / channels {channels}")

    rng = np.random.default_rng(seed)
    layouts = _class_layouts(num_classes)
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    n = num_classes * per_class
    labels = np.repeat(np.arange(num_classes), per_class)
    out = np.empty((n, h, w, channels), dtype=np.float32)

    for i, k in enumerate(labels):
        theta = np.pi * k / num_classes + rng.normal(0, 0.08)
        freq = rng.uniform(3.0, 5.0)
        phase = rng.uniform(0, 2 * np.pi)
        grating = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        blobs = np.zeros((h, w))
        for cy, cx in layouts[k] + rng.normal(0, 0.03, size=layouts[k].shape):
            blobs += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.07**2))
        img = 0.5 + rng.uniform(0.12, 0.22) * grating + rng.uniform(0.3, 0.45) * blobs - 0.15
        img = img[:, :, None]
        if channels == 3:
            tint = rng.uniform(0.75, 1.0, size=3)
            img = img * tint + (1 - tint) * 0.5
        img = img + rng.normal(0, pixel_noise, size=img.shape)
        out[i] = np.clip(img, 0.0, 1.0)

    ids = tuple(f"{name}-{i:06d}" for i in range(n))
    return DatasetSplit(
        pixels=out,
        clean_labels=labels.astype(np.int64),
        observed_labels=labels.astype(np.int64),
        ids=ids,
        num_classes=num_classes,
        name=name,
        class_names=tuple(f"class{k}" for k in range(num_classes)),
    )


# --------------------------------------------------------------------------- label noise


def transition_matrix(spec: NoiseSpec) -> np.ndarray:
    k, p = spec.num_classes, spec.noise_rate
    mat = np.full((k, k), p / (k - 1))
    np.fill_diagonal(mat, 1.0 - p)
    return mat


def _sample_uniforms(seed: int, sample_id: str) -> tuple[float, float]:
    # Keyed by (seed, id): a sample's fate does not depend on its position.
    digest = hashlib.blake2b(f"{seed}\x00{sample_id}".encode(), digest_size=16).digest()
    a = int.from_bytes(digest[:8], "little") >> 11
    b = int.from_bytes(digest[8:], "little") >> 11
    return a / 2.0**53, b / 2.0**53


def inject_symmetric_noise(split: DatasetSplit, spec: NoiseSpec) -> DatasetSplit:
    """Flip each label with probability ``spec.noise_rate`` to a uniformly chosen other class."""
    if split.name == "test":
        raise DatasetError("refusing to corrupt labels of a test split")
    if spec.num_classes != split.num_classes:
        raise DatasetError(
            f"noise spec has {spec.num_classes} classes but split has {split.num_classes}")
    k = spec.num_classes
    observed = split.clean_labels.copy()
    for i, sid in enumerate(split.ids):
        u_flip, u_class = _sample_uniforms(spec.seed, sid)
        if u_flip < spec.noise_rate:
            shift = 1 + min(int(u_class * (k - 1)), k - 2)
            observed[i] = (split.clean_labels[i] + shift) % k
    return split.with_observed_labels(observed, noise=spec)


# --------------------------------------------------------------------------- record files


def save_records(split: DatasetSplit, path: str | Path) -> None:
    """Write one JSON object per sample so a noise realization can be reused."""
    with open(path, "w") as fh:
        for rec, src in zip(split.records, split.paths):
            fh.write(json.dumps({
                "id": rec.id,
                "clean_label": rec.clean_label,
                "observed_label": rec.observed_label,
                "is_corrupted": rec.is_corrupted,
                "path": src,
            }) + "\n")


def load_records(path: str | Path) -> list[CorruptionRecord]:
    records = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                records.append(CorruptionRecord(row["id"], row["clean_label"],
                                                row["observed_label"], row["is_corrupted"]))
    return records


def apply_records(split: DatasetSplit, records: Sequence[CorruptionRecord]) -> DatasetSplit:
    """Re-impose a saved noise realization on a freshly loaded split."""
    by_id = {r.id: r for r in records}
    missing = [sid for sid in split.ids if sid not in by_id]
    if missing or len(by_id) != len(split):
        raise DatasetError(f"record file does not match split (e.g. missing {missing[:3]})")
    observed = np.empty(len(split), dtype=np.int64)
    for i, sid in enumerate(split.ids):
        rec = by_id[sid]
        if rec.clean_label != split.clean_labels[i]:
            raise DatasetError(f"clean label mismatch for sample {sid!r}")
        observed[i] = rec.observed_label
    return split.with_observed_labels(observed)


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 4
    train_per_class: int = 500
    test_per_class: int = 250
    image_size: tuple[int, int] = (32, 32)
    channels: int = 3
    pixel_noise: float = 0.12


def make_synthetic_splits(spec: SyntheticSpec, seed: int) -> tuple[DatasetSplit, DatasetSplit]:
    common = dict(image_size=tuple(spec.image_size), channels=spec.channels,
                  pixel_noise=spec.pixel_noise)
    train = make_synthetic_dataset(spec.num_classes, spec.train_per_class, seed=seed,
                                   name="train", **common)
    test = make_synthetic_dataset(spec.num_classes, spec.test_per_class, seed=seed + 7919,
                                  name="test", **common)
    return train, test
