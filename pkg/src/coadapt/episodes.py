"""Datasets, synthetic generators and the N-way k-shot episode sampler."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.6, 0.2, 0.2)

FSD_MAGIC = b"FSD1"
FSD_VERSION = 1
_HEADER = struct.Struct("<4s8I")
_PRECISION = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class DatasetError(ValueError):
    """Invalid dataset construction or an episode request it cannot satisfy."""


class DatasetFormatError(DatasetError):
    """Base class for malformed dataset files."""


class BadMagicError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class CSVFormatError(DatasetFormatError):
    pass


class SplitOverlapError(DatasetError):
    """Two splits share a class id."""


@dataclass(frozen=True, eq=False)
class Dataset:
    """Items as one stacked array plus a parallel array of integer class ids.

    ``features`` is ``[N, D]`` for vector payloads or ``[N, H, W, C]`` for images.
    """

    features: np.ndarray
    labels: np.ndarray
    split_tag: str | None = None
    class_index: dict[int, np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        feats = np.asarray(self.features)
        labels = np.asarray(self.labels, dtype=np.int64)
        if feats.ndim not in (2, 4):
            raise DatasetError(f"features must be [N, D] or [N, H, W, C], got shape {feats.shape}")
        if labels.shape != (feats.shape[0],):
            raise DatasetError(f"labels shape {labels.shape} does not match {feats.shape[0]} items")
        if self.split_tag is not None and self.split_tag not in SPLITS:
            raise DatasetError(f"unknown split tag {self.split_tag!r}")
        feats = feats.copy()
        feats.flags.writeable = False
        labels = labels.copy()
        labels.flags.writeable = False
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        index = {int(c): np.flatnonzero(labels == c) for c in np.unique(labels)}
        object.__setattr__(self, "class_index", index)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def classes(self) -> list[int]:
        return sorted(self.class_index)

    @property
    def item_shape(self) -> tuple[int, ...]:
        return self.features.shape[1:]

    @property
    def is_image(self) -> bool:
        return self.features.ndim == 4

    def min_class_size(self) -> int:
        return min(len(v) for v in self.class_index.values()) if self.class_index else 0

    def subset(self, classes, split_tag: str | None = None) -> Dataset:
        keep = np.isin(self.labels, np.asarray(list(classes), dtype=np.int64))
        return Dataset(self.features[keep], self.labels[keep], split_tag)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.split_tag == other.split_tag
            and self.features.dtype == other.features.dtype
            and np.array_equal(self.labels, other.labels)
            and self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
        )


@dataclass(frozen=True, eq=False)
class Episode:
    """One N-way k-shot task.

    ``query`` rows are grouped by class position; ``query_labels`` are
    episode-local positions in ``[0, n)``.
    """

    support: np.ndarray
    query: np.ndarray
    query_labels: np.ndarray
    classes: tuple[int, ...]
    support_index: np.ndarray
    query_index: np.ndarray

    @property
    def way(self) -> int:
        return self.support.shape[0]

    @property
    def shot(self) -> int:
        return self.support.shape[1]


# ----------------------------------------------------------------- generators


def _sphere_means(rng: np.random.Generator, classes: int, dim: int) -> np.ndarray:
    raw = rng.standard_normal((classes, dim))
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)


def _check_sizes(classes: int, per_class: int):
    if classes < 5:
        raise DatasetError(f"need at least 5 classes, got {classes}")
    if per_class < 20:
        raise DatasetError(f"need at least 20 items per class, got {per_class}")


def generate_blobs(classes: int, dim: int, per_class: int, sigma: float, seed: int) -> Dataset:
    """Isotropic Gaussian blobs around class means on the unit hypersphere.

    Items are ordered class by class.  ``sigma=0`` places every item on its mean.
    """
    _check_sizes(classes, per_class)
    if dim < 1:
        raise DatasetError(f"dim must be positive, got {dim}")
    if sigma < 0:
        raise DatasetError(f"sigma must be non-negative, got {sigma}")
    rng = np.random.default_rng(seed)
    means = _sphere_means(rng, classes, dim)
    labels = np.repeat(np.arange(classes), per_class)
    noise = rng.standard_normal((classes * per_class, dim))
    return Dataset(means[labels] + sigma * noise, labels)


def generate_distractor(
    classes: int,
    signal_dim: int,
    distractor_dim: int,
    per_class: int,
    sigma_signal: float,
    sigma_distractor: float,
    seed: int,
) -> Dataset:
    """Blobs in the first ``signal_dim`` coordinates, class-independent noise after.

    The distractor block is the same distribution for every class, with a
    larger spread than the signal, so raw distances are dominated by features
    that carry no class information.  With ``distractor_dim=0`` the result is
    identical to :func:`generate_blobs` on the signal block.
    """
    _check_sizes(classes, per_class)
    if signal_dim < 1:
        raise DatasetError(f"signal_dim must be positive, got {signal_dim}")
    if distractor_dim != 0 and distractor_dim < signal_dim:
        raise DatasetError(f"distractor_dim ({distractor_dim}) must be 0 or >= signal_dim ({signal_dim})")
    if sigma_signal < 0 or sigma_distractor < 0:
        raise DatasetError("noise scales must be non-negative")
    rng = np.random.default_rng(seed)
    means = _sphere_means(rng, classes, signal_dim)
    labels = np.repeat(np.arange(classes), per_class)
    signal = means[labels] + sigma_signal * rng.standard_normal((classes * per_class, signal_dim))
    distract = sigma_distractor * rng.standard_normal((classes * per_class, distractor_dim))
    return Dataset(np.concatenate([signal, distract], axis=1), labels)


def split_classes(ds: Dataset, seed: int, fractions=SPLIT_FRACTIONS) -> tuple[Dataset, Dataset, Dataset]:
    """Shuffle class ids with ``seed`` and cut them into train/val/test by ``fractions``."""
    classes = np.array(ds.classes)
    order = np.random.default_rng(seed).permutation(classes)
    n_train = int(round(fractions[0] * len(order)))
    n_val = int(round(fractions[1] * len(order)))
    parts = (order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :])
    if any(len(p) == 0 for p in parts):
        raise DatasetError(f"{len(order)} classes are too few for a three-way split")
    return tuple(ds.subset(sorted(p.tolist()), tag) for p, tag in zip(parts, SPLITS))


def check_disjoint(*datasets: Dataset) -> None:
    for i, a in enumerate(datasets):
        for b in datasets[i + 1 :]:
            shared = set(a.class_index) & set(b.class_index)
            if shared:
                raise SplitOverlapError(
                    f"splits {a.split_tag!r} and {b.split_tag!r} share classes {sorted(shared)[:5]}"
                )


# -------------------------------------------------------------------- sampling


def sample_episode(ds: Dataset, n: int, k: int, q: int, rng: np.random.Generator) -> Episode:
    """Draw ``n`` classes, then ``k`` support and ``q`` query items per class, all without replacement."""
    if n < 1 or k < 1 or q < 1:
        raise DatasetError(f"way/shot/query must be positive, got n={n}, k={k}, q={q}")
    if len(ds.class_index) < n:
        raise DatasetError(f"{n}-way episodes need {n} classes, dataset has {len(ds.class_index)}")
    smallest = ds.min_class_size()
    if smallest < k + q:
        raise DatasetError(f"k+q={k + q} items per class requested, smallest class has {smallest}")
    classes = rng.choice(np.array(ds.classes), size=n, replace=False)
    support_idx = np.empty((n, k), dtype=np.int64)
    query_idx = np.empty((n, q), dtype=np.int64)
    for pos, c in enumerate(classes):
        picks = rng.choice(ds.class_index[int(c)], size=k + q, replace=False)
        support_idx[pos] = picks[:k]
        query_idx[pos] = picks[k:]
    support = ds.features[support_idx]
    query = ds.features[query_idx.reshape(-1)]
    labels = np.repeat(np.arange(n), q)
    return Episode(support, query, labels, tuple(int(c) for c in classes), support_idx, query_idx.reshape(-1))


# ------------------------------------------------------------------------- I/O


def save_dataset(ds: Dataset, path) -> None:
    feats = ds.features
    if feats.dtype == np.float32:
        code = 4
    elif feats.dtype == np.float64:
        code = 8
    else:
        raise DatasetError(f"unsupported payload dtype {feats.dtype}")
    if ds.is_image:
        feature_dim, (h, w, c) = 0, feats.shape[1:]
    else:
        feature_dim, h, w, c = feats.shape[1], 0, 0, 0
    header = _HEADER.pack(FSD_MAGIC, FSD_VERSION, len(ds), feature_dim, h, w, c, len(ds.class_index), code)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(ds.labels.astype("<u4").tobytes())
        fh.write(np.ascontiguousarray(feats, dtype=_PRECISION[code]).tobytes())


def _split_from_name(path: Path) -> str | None:
    stem = path.stem
    return stem if stem in SPLITS else None


def load_dataset(path, split_tag: str | None = None) -> Dataset:
    """Read an FSD1 container, or a ``label,f1,...,fD`` CSV when the suffix is ``.csv``."""
    path = Path(path)
    tag = split_tag if split_tag is not None else _split_from_name(path)
    if path.suffix.lower() == ".csv":
        return _load_csv(path, tag)
    raw = path.read_bytes()
    if raw[:4] != FSD_MAGIC:
        raise BadMagicError(f"{path}: expected magic {FSD_MAGIC!r}, found {raw[:4]!r}")
    if len(raw) < _HEADER.size:
        raise TruncatedFileError(f"{path}: header needs {_HEADER.size} bytes, file has {len(raw)}")
    _, version, count, feature_dim, h, w, c, class_count, code = _HEADER.unpack_from(raw)
    if version != FSD_VERSION:
        raise DatasetFormatError(f"{path}: unsupported FSD version {version}")
    if code not in _PRECISION:
        raise DatasetFormatError(f"{path}: unknown precision code {code}")
    item_shape = (feature_dim,) if feature_dim else (h, w, c)
    per_item = int(np.prod(item_shape))
    need = _HEADER.size + 4 * count + code * count * per_item
    if len(raw) < need:
        raise TruncatedFileError(f"{path}: expected {need} bytes, file has {len(raw)}")
    labels = np.frombuffer(raw, dtype="<u4", count=count, offset=_HEADER.size).astype(np.int64)
    payload = np.frombuffer(raw, dtype=_PRECISION[code], count=count * per_item, offset=_HEADER.size + 4 * count)
    ds = Dataset(payload.reshape((count, *item_shape)).astype(_PRECISION[code].newbyteorder("=")), labels, tag)
    if len(ds.class_index) != class_count:
        raise DatasetFormatError(f"{path}: header declares {class_count} classes, payload has {len(ds.class_index)}")
    return ds


def _load_csv(path: Path, tag: str | None) -> Dataset:
    labels, rows = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (lineno == 1 and row[0].strip().lower() == "label"):
                continue
            try:
                labels.append(int(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError:
                raise CSVFormatError(f"{path}:{lineno}: non-numeric cell in {row!r}") from None
            if rows and len(rows[-1]) != len(rows[0]):
                raise CSVFormatError(f"{path}:{lineno}: expected {len(rows[0])} features, got {len(rows[-1])}")
    if not rows or not rows[0]:
        raise CSVFormatError(f"{path}: no feature rows")
    return Dataset(np.array(rows, dtype=np.float64), np.array(labels), tag)


def load_splits(directory) -> tuple[Dataset, Dataset, Dataset]:
    """Load ``train.fsd``, ``val.fsd`` and ``test.fsd`` and assert their class sets are disjoint."""
    directory = Path(directory)
    splits = tuple(load_dataset(directory / f"{tag}.fsd", tag) for tag in SPLITS)
    check_disjoint(*splits)
    return splits
