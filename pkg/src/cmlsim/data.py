"""Dataset ingestion and partitioning.

Covers the IDX image format, numeric CSV tables, two deterministic synthetic
corpora (a 28x28 digit-image stand-in and an imbalanced binary health-style
table), user partitioning schemes, and the knowledge slices used by the
evaluation-quality experiments.

Loaders fail loudly with located errors; they never silently truncate.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .rng import stream

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    """Malformed input file or invalid partition/slice request."""


@dataclass(frozen=True)
class Dataset:
    """Feature matrix plus labels. Class labels are integers in [0, K)."""

    inputs: np.ndarray
    labels: np.ndarray
    name: str = "dataset"

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)
        if x.ndim != 2:
            raise DataError("inputs must be a 2-D sample-by-feature matrix")
        if x.shape[0] != y.shape[0]:
            raise DataError(
                f"{self.name}: {x.shape[0]} input rows but {y.shape[0]} labels"
            )
        if not np.all(np.isfinite(x)):
            raise DataError(f"{self.name}: non-finite feature values")
        if np.issubdtype(y.dtype, np.integer) and y.size and y.min() < 0:
            raise DataError(f"{self.name}: negative class label")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_features(self) -> int:
        return self.inputs.shape[1]

    @property
    def n_classes(self) -> int:
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise DataError(f"{self.name}: labels are not class indices")
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, indices, name: str | None = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], name or self.name)


@dataclass(frozen=True)
class Partition:
    """Per-user sample indices into one dataset; disjoint by construction."""

    assignments: tuple[np.ndarray, ...]

    def __post_init__(self):
        cleaned = tuple(np.asarray(a, dtype=np.int64) for a in self.assignments)
        object.__setattr__(self, "assignments", cleaned)
        seen: set[int] = set()
        for user, idx in enumerate(cleaned):
            overlap = seen.intersection(idx.tolist())
            if overlap:
                raise DataError(f"partition: user {user} reuses sample index {min(overlap)}")
            seen.update(idx.tolist())

    @property
    def n_users(self) -> int:
        return len(self.assignments)


# ---------------------------------------------------------------------------
# IDX (MNIST-format) files
# ---------------------------------------------------------------------------


def _read_exact(fh, count: int, path: str, offset: int) -> bytes:
    buf = fh.read(count)
    if len(buf) != count:
        raise DataError(
            f"{path}: truncated file, wanted {count} bytes at offset {offset}, got {len(buf)}"
        )
    return buf


def load_mnist_idx(images_path: str, labels_path: str) -> Dataset:
    """Load an IDX image/label file pair into pixels scaled to [0, 1].

    Images: big-endian magic 0x00000803, dims [n, rows, cols], unsigned
    bytes. Labels: magic 0x00000801, [n], unsigned bytes.
    """
    with open(images_path, "rb") as fh:
        magic, n_images, rows, cols = struct.unpack(
            ">IIII", _read_exact(fh, 16, images_path, 0)
        )
        if magic != IMAGES_MAGIC:
            raise DataError(
                f"{images_path}: bad images magic 0x{magic:08x} at offset 0, "
                f"expected 0x{IMAGES_MAGIC:08x}"
            )
        raw = _read_exact(fh, n_images * rows * cols, images_path, 16)
        if fh.read(1):
            raise DataError(f"{images_path}: trailing bytes after {n_images} images")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n_images, rows * cols)

    with open(labels_path, "rb") as fh:
        magic, n_labels = struct.unpack(">II", _read_exact(fh, 8, labels_path, 0))
        if magic != LABELS_MAGIC:
            raise DataError(
                f"{labels_path}: bad labels magic 0x{magic:08x} at offset 0, "
                f"expected 0x{LABELS_MAGIC:08x}"
            )
        raw = _read_exact(fh, n_labels, labels_path, 8)
        if fh.read(1):
            raise DataError(f"{labels_path}: trailing bytes after {n_labels} labels")
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    if n_images != n_labels:
        raise DataError(
            f"{images_path}: {n_images} images but {labels_path} has {n_labels} labels"
        )
    return Dataset(images.astype(np.float64) / 255.0, labels, name="mnist")


# ---------------------------------------------------------------------------
# CSV tables
# ---------------------------------------------------------------------------


def load_tabular_csv(path: str, label_column: str, normalize: bool = False) -> Dataset:
    """Load a numeric CSV with a header row; one column holds the labels.

    Integer-valued label columns become class indices. With ``normalize``
    each feature column is z-scored.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, expected a header row") from None
        if label_column not in header:
            raise DataError(f"{path}: no column named {label_column!r} in header")
        label_idx = header.index(label_column)

        rows: list[list[float]] = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(
                    f"{path}:{line_no}: row has {len(row)} cells, header has {len(header)}"
                )
            parsed = []
            for col_no, cell in enumerate(row):
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise DataError(
                        f"{path}:{line_no}: non-numeric cell {cell!r} in column "
                        f"{header[col_no]!r}"
                    ) from None
            rows.append(parsed)

    if not rows:
        raise DataError(f"{path}: no data rows")
    table = np.asarray(rows, dtype=np.float64)
    labels = table[:, label_idx]
    features = np.delete(table, label_idx, axis=1)
    if np.all(labels == np.floor(labels)):
        labels = labels.astype(np.int64)
    if normalize:
        mean = features.mean(axis=0)
        sd = features.std(axis=0)
        sd[sd == 0.0] = 1.0
        features = (features - mean) / sd
    return Dataset(features, labels, name=path)


# ---------------------------------------------------------------------------
# Synthetic corpora
# ---------------------------------------------------------------------------


def make_image_corpus(n_samples: int, rng_seed: int, name: str = "digits28") -> Dataset:
    """Deterministic 28x28 ten-class digit images (784 features).

    Built by upscaling the classic 8x8 digit set and applying seeded
    translations and pixel noise, so any number of distinct samples can be
    drawn. Serves as the desk-scale stand-in when no real IDX files are
    configured.
    """
    from sklearn.datasets import load_digits

    base_images, base_labels = load_digits(return_X_y=True)
    base_images = base_images.reshape(-1, 8, 8) / 16.0
    rng = stream(rng_seed, "image-corpus", name)

    picks = rng.integers(0, base_images.shape[0], size=n_samples)
    offsets = rng.integers(0, 5, size=(n_samples, 2))  # 24x24 inside 28x28
    noise = rng.normal(0.0, 0.02, size=(n_samples, 28, 28))

    out = np.zeros((n_samples, 28, 28))
    for i in range(n_samples):
        big = np.kron(base_images[picks[i]], np.ones((3, 3)))
        r, c = offsets[i]
        out[i, r : r + 24, c : c + 24] = big
    out = np.clip(out + noise, 0.0, 1.0)
    return Dataset(out.reshape(n_samples, 784), base_labels[picks].astype(np.int64), name)


def make_health_table(
    n_samples: int = 768,
    n_features: int = 8,
    positive_fraction: float = 0.32,
    rng_seed: int = 7,
) -> Dataset:
    """Imbalanced binary table shaped like the diabetes benchmark.

    Exactly round(n * positive_fraction) rows carry label 1; features are
    class-conditional Gaussians with enough overlap that the task is
    learnable but not trivial.
    """
    rng = stream(rng_seed, "health-table")
    n_pos = int(round(n_samples * positive_fraction))
    labels = np.zeros(n_samples, dtype=np.int64)
    labels[:n_pos] = 1
    rng.shuffle(labels)

    shift = rng.normal(0.9, 0.25, size=n_features)
    scale = rng.uniform(0.8, 1.6, size=n_features)
    features = rng.normal(0.0, 1.0, size=(n_samples, n_features)) * scale
    features[labels == 1] += shift
    return Dataset(features, labels, name="health-table")


# ---------------------------------------------------------------------------
# Splits and partitions
# ---------------------------------------------------------------------------


def _largest_remainder(counts: np.ndarray, fraction: float, total: int) -> np.ndarray:
    """Per-class counts summing exactly to `total`, proportional to `counts`."""
    exact = counts * fraction
    alloc = np.floor(exact).astype(np.int64)
    short = total - int(alloc.sum())
    if short > 0:
        order = np.argsort(-(exact - alloc), kind="stable")
        alloc[order[:short]] += 1
    return alloc


def split_train_test(
    dataset: Dataset, train_fraction: float, rng_seed: int
) -> tuple[Dataset, Dataset]:
    """Stratified train/test split preserving class proportions."""
    if not 0.0 < train_fraction < 1.0:
        raise DataError("train fraction must be in (0, 1)")
    y = dataset.labels
    n_train_total = int(round(len(dataset) * train_fraction))
    classes, counts = np.unique(y, return_counts=True)
    per_class = _largest_remainder(counts, train_fraction, n_train_total)

    rng = stream(rng_seed, "split", dataset.name)
    train_idx, test_idx = [], []
    for cls, take in zip(classes, per_class):
        members = np.flatnonzero(y == cls)
        members = members[rng.permutation(members.size)]
        train_idx.append(members[:take])
        test_idx.append(members[take:])
    train = np.sort(np.concatenate(train_idx))
    test = np.sort(np.concatenate(test_idx))
    return (
        dataset.subset(train, f"{dataset.name}-train"),
        dataset.subset(test, f"{dataset.name}-test"),
    )


def partition_iid(dataset: Dataset, n_users: int, rng_seed: int) -> Partition:
    """Shuffle then deal round-robin; user sizes differ by at most one."""
    if n_users < 1:
        raise DataError("need at least one user")
    rng = stream(rng_seed, "partition-iid", dataset.name)
    order = rng.permutation(len(dataset))
    return Partition(tuple(np.sort(order[k::n_users]) for k in range(n_users)))


def partition_by_label(dataset: Dataset, n_users: int) -> Partition:
    """Sort by label, cut into contiguous equal-size chunks.

    Each user's samples come from a narrow label range; with K classes and
    n_users a multiple of K on a balanced set, each class is split across
    exactly n_users/K users.
    """
    if n_users < 1:
        raise DataError("need at least one user")
    if n_users > len(dataset):
        raise DataError(
            f"cannot give {n_users} users non-empty shards of {len(dataset)} samples"
        )
    order = np.argsort(dataset.labels, kind="stable")
    return Partition(tuple(np.sort(chunk) for chunk in np.array_split(order, n_users)))


def partition_fixed_sizes(dataset: Dataset, sizes: list[int], rng_seed: int) -> Partition:
    """IID partition with prescribed per-user sample counts."""
    if sum(sizes) > len(dataset):
        raise DataError(f"sizes sum to {sum(sizes)}, dataset has {len(dataset)}")
    if any(s < 1 for s in sizes):
        raise DataError("all user sizes must be positive")
    rng = stream(rng_seed, "partition-sizes", dataset.name)
    order = rng.permutation(len(dataset))
    out, pos = [], 0
    for s in sizes:
        out.append(np.sort(order[pos : pos + s]))
        pos += s
    return Partition(tuple(out))


def knowledge_slice(dataset: Dataset, mode: str, degree, rng_seed: int) -> Dataset:
    """Local dataset of a test subject at a given knowledge degree.

    ``labels_prefix`` keeps every sample whose label is below ``degree``
    (an integer in [1, K]); slices grow monotonically with the degree.
    ``iid_fraction`` draws round(N * degree) samples, stratified so each
    class contributes in proportion to its frequency.
    """
    if mode == "labels_prefix":
        k = dataset.n_classes
        degree = int(degree)
        if not 1 <= degree <= k:
            raise DataError(f"labels_prefix degree must be in [1, {k}], got {degree}")
        idx = np.flatnonzero(dataset.labels < degree)
        return dataset.subset(idx, f"{dataset.name}-labels<{degree}")
    if mode == "iid_fraction":
        degree = float(degree)
        if not 0.0 < degree <= 1.0:
            raise DataError(f"iid_fraction degree must be in (0, 1], got {degree}")
        total = int(round(len(dataset) * degree))
        if total < 1:
            raise DataError(f"iid_fraction degree {degree} selects no samples")
        classes, counts = np.unique(dataset.labels, return_counts=True)
        per_class = _largest_remainder(counts, degree, total)
        rng = stream(rng_seed, "knowledge", dataset.name, str(degree))
        picked = []
        for cls, take in zip(classes, per_class):
            members = np.flatnonzero(dataset.labels == cls)
            picked.append(rng.choice(members, size=take, replace=False))
        idx = np.sort(np.concatenate(picked))
        return dataset.subset(idx, f"{dataset.name}-frac{degree}")
    raise DataError(f"unknown knowledge mode {mode!r}")


def seeded_subset(dataset: Dataset, cap: int, rng_seed: int) -> Dataset:
    """Deterministic subsample used to cap evaluation batches."""
    if cap >= len(dataset):
        return dataset
    rng = stream(rng_seed, "subset-cap", dataset.name, cap)
    idx = np.sort(rng.choice(len(dataset), size=cap, replace=False))
    return dataset.subset(idx, f"{dataset.name}-cap{cap}")
