"""Datasets: synthetic generators, CSV/IDX loaders, splits and forget/remain partitions."""

import csv
import dataclasses
import io
import math
import os
import struct
from typing import Optional, Sequence

import numpy as np

from .errors import BadRatio, CountMismatch, EmptyDataset, InvariantViolation, ParseError
from .fileio import atomic_write
from .seeding import stream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclasses.dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    provenance: dict = dataclasses.field(default_factory=dict)
    classes: Optional[int] = None

    def __post_init__(self):
        X = np.array(self.features, dtype=np.float64, copy=True)
        if X.ndim == 1:
            X = X[:, None]
        y = np.array(self.labels, copy=True)
        if y.size and not np.issubdtype(y.dtype, np.integer):
            if not np.all(y == np.round(y)):
                raise InvariantViolation("labels must be integers")
        y = y.astype(np.int64).reshape(-1)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise InvariantViolation(f"{X.shape[0]} feature rows but {y.shape[0]} labels")
        if X.shape[0] < 1:
            raise EmptyDataset("dataset has no samples")
        if not np.all(np.isfinite(X)):
            raise InvariantViolation("non-finite features")
        classes = int(y.max()) + 1 if self.classes is None else int(self.classes)
        if y.min() < 0 or y.max() >= classes:
            raise InvariantViolation(f"labels outside [0, {classes})")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "provenance", dict(self.provenance))

    def __len__(self):
        return self.features.shape[0]

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def subset(self, indices, name=None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.features[idx],
            self.labels[idx],
            name or self.name,
            {**self.provenance, "parent": self.name},
            self.classes,
        )

    def same_data(self, other: "Dataset") -> bool:
        return (
            self.features.tobytes() == other.features.tobytes()
            and self.labels.tobytes() == other.labels.tobytes()
            and self.features.shape == other.features.shape
        )

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.same_data(other) and self.classes == other.classes


@dataclasses.dataclass(frozen=True, eq=False)
class Partition:
    """Forget/remain split of ``n`` training indices."""

    forget_indices: np.ndarray
    remain_indices: np.ndarray

    def __post_init__(self):
        f = np.unique(np.asarray(self.forget_indices, dtype=np.int64))
        r = np.unique(np.asarray(self.remain_indices, dtype=np.int64))
        if np.intersect1d(f, r).size:
            raise InvariantViolation("forget and remain sets overlap")
        f.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "forget_indices", f)
        object.__setattr__(self, "remain_indices", r)

    @property
    def n(self) -> int:
        return self.forget_indices.size + self.remain_indices.size

    def __eq__(self, other):
        if not isinstance(other, Partition):
            return NotImplemented
        return np.array_equal(self.forget_indices, other.forget_indices) and np.array_equal(
            self.remain_indices, other.remain_indices
        )


# ---------------------------------------------------------------------------
# generators


def _lattice_centers(classes: int, d: int) -> np.ndarray:
    """Class ``c`` sits at the base-``m`` digits of ``c`` (first ``d`` coordinates)."""
    m = 2
    while m ** d < classes:
        m += 1
    centers = np.zeros((classes, d))
    for c in range(classes):
        k = c
        for j in range(d):
            centers[c, j] = k % m
            k //= m
    return centers


def gen_blobs(n: int, d: int, classes: int, spread: float, seed: int) -> Dataset:
    """Gaussian blobs with std ``spread`` around unit-lattice class centers.

    Class sizes differ by at most one.
    """
    if n < classes:
        raise ValueError("need at least one sample per class")
    if not spread > 0:
        raise ValueError("spread must be positive")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    centers = _lattice_centers(classes, d)
    X = centers[labels] + spread * rng.standard_normal((n, d))
    return Dataset(X, labels, f"blobs-{n}x{d}-c{classes}",
                   {"generator": "blobs", "seed": seed, "spread": spread}, classes)


def gen_moons(n: int, noise: float, seed: int) -> Dataset:
    """Two interleaving half circles in 2-D."""
    if n < 2:
        raise ValueError("need at least two samples")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    rng.shuffle(labels)
    t = rng.uniform(0.0, np.pi, n)
    X = np.where(
        labels[:, None] == 0,
        np.column_stack([np.cos(t), np.sin(t)]),
        np.column_stack([1.0 - np.cos(t), 0.5 - np.sin(t)]),
    )
    X = X + noise * rng.standard_normal((n, 2))
    return Dataset(X, labels, f"moons-{n}", {"generator": "moons", "seed": seed, "noise": noise}, 2)


def with_label_noise(dataset: Dataset, fraction: float, seed: int):
    """Reassign ``round(fraction * n)`` labels to a different random class.

    Returns ``(noisy_dataset, flipped_indices)``.
    """
    rng = np.random.default_rng(seed)
    k = round_half_away(fraction * dataset.n)
    idx = np.sort(rng.choice(dataset.n, size=k, replace=False))
    y = dataset.labels.copy()
    shift = rng.integers(1, dataset.classes, size=k)
    y[idx] = (y[idx] + shift) % dataset.classes
    noisy = Dataset(dataset.features, y, dataset.name + "-noisy",
                    {**dataset.provenance, "label_noise": fraction}, dataset.classes)
    return noisy, idx


# ---------------------------------------------------------------------------
# CSV


def _parse_float(cell: str, line: int, column: int) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise ParseError(f"non-numeric cell {cell!r}", line, column) from None
    if not math.isfinite(value):
        raise ParseError(f"non-finite cell {cell!r}", line, column)
    return value


def load_csv(path, label_column) -> Dataset:
    """Read a numeric CSV with a header row.

    ``label_column`` is a header name or a 0-based column index.  Labels are
    remapped to ``0..Y-1`` in order of first appearance.
    """
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise EmptyDataset(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if isinstance(label_column, str) and not label_column.isdigit():
        if label_column not in header:
            raise ParseError(f"label column {label_column!r} not in header", 1)
        lc = header.index(label_column)
    else:
        lc = int(label_column)
        if not 0 <= lc < len(header):
            raise ParseError(f"label column index {lc} out of range", 1)
    feats, raw_labels = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} cells, got {len(row)}", lineno)
        values = [_parse_float(c.strip(), lineno, j + 1) for j, c in enumerate(row)]
        raw_labels.append(values[lc])
        feats.append(values[:lc] + values[lc + 1:])
    if not feats:
        raise EmptyDataset(f"{path}: no data rows")
    mapping = {}
    labels = [mapping.setdefault(v, len(mapping)) for v in raw_labels]
    name = os.path.splitext(os.path.basename(os.fspath(path)))[0]
    return Dataset(np.array(feats), np.array(labels), name,
                   {"csv": os.fspath(path), "label_values": list(mapping)}, len(mapping))


def save_csv(dataset: Dataset, path, label_column: str = "label") -> None:
    """Write features as ``f0..f{d-1}`` then the label column (exact float reprs)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"f{j}" for j in range(dataset.d)] + [label_column])
    for x, y in zip(dataset.features, dataset.labels):
        w.writerow([repr(float(v)) for v in x] + [int(y)])
    atomic_write(path, buf.getvalue().encode())


# ---------------------------------------------------------------------------
# IDX


def _read_idx(path, magic: int, ndim: int):
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4 + 4 * ndim:
        raise ParseError(f"{path}: truncated IDX header")
    (got,) = struct.unpack(">I", data[:4])
    if got != magic:
        raise ParseError(f"{path}: bad IDX magic 0x{got:08x} (expected 0x{magic:08x})")
    dims = struct.unpack(f">{ndim}I", data[4:4 + 4 * ndim])
    body = data[4 + 4 * ndim:]
    size = int(np.prod(dims))
    if len(body) != size:
        raise ParseError(f"{path}: expected {size} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label pair; pixels scaled to [0, 1] and flattened."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatch(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if images.shape[0] == 0:
        raise EmptyDataset("IDX files contain no items")
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    return Dataset(X, y, os.path.basename(os.fspath(images_path)),
                   {"idx_images": os.fspath(images_path), "idx_labels": os.fspath(labels_path)},
                   max(int(y.max()) + 1, 2))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images ``(n, rows, cols)`` and labels ``(n,)`` as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    atomic_write(images_path, struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape) + images.tobytes())
    atomic_write(labels_path, struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]) + labels.tobytes())


# ---------------------------------------------------------------------------
# splitting


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def split(dataset: Dataset, fractions: Sequence[float], seed: int):
    """Shuffle and cut into ``len(fractions)`` parts (usually train/val/test).

    The last part takes whatever rounding leaves over.
    """
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.size < 1 or np.any(fr <= 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError("fractions must be positive and sum to 1")
    perm = np.random.default_rng(seed).permutation(dataset.n)
    sizes = [round_half_away(f * dataset.n) for f in fr[:-1]]
    if sum(sizes) >= dataset.n:
        raise ValueError("split leaves nothing for the last part")
    bounds = np.cumsum([0] + sizes + [dataset.n - sum(sizes)])
    names = ["train", "val", "test"] if fr.size == 3 else [f"part{i}" for i in range(fr.size)]
    parts = []
    for i in range(fr.size):
        idx = np.sort(perm[bounds[i]:bounds[i + 1]])
        if idx.size == 0:
            raise EmptyDataset(f"split part {names[i]} is empty")
        parts.append(dataset.subset(idx, f"{dataset.name}/{names[i]}"))
    return tuple(parts)


def forget_count(ratio: float, n: int) -> int:
    return max(1, round_half_away(ratio * n))


def make_partition(n_or_dataset, ratio: Optional[float] = None, indices=None, seed: int = 0) -> Partition:
    """Pick the forget set: ``round(ratio * n)`` random indices, or explicit ``indices``."""
    n = n_or_dataset.n if isinstance(n_or_dataset, Dataset) else int(n_or_dataset)
    everything = np.arange(n)
    if indices is not None:
        idx = np.unique(np.asarray(indices, dtype=np.int64))
        if idx.size == 0 or idx.min() < 0 or idx.max() >= n:
            raise BadRatio(f"forget indices must be a nonempty subset of [0, {n})")
        return Partition(idx, np.setdiff1d(everything, idx))
    if ratio is None or not 0.0 < ratio < 1.0:
        raise BadRatio(f"unlearning ratio must lie in (0, 1), got {ratio!r}")
    k = forget_count(ratio, n)
    if k >= n:
        raise BadRatio(f"ratio {ratio} would forget all {n} samples")
    forget = np.sort(stream(seed, "partition").choice(n, size=k, replace=False))
    return Partition(forget, np.setdiff1d(everything, forget))
