"""Datasets: IDX and CSV ingestion, synthetic generators, splitting and batching.

Class labels are stored 1-based (``1..n_classes``).
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._rng import as_generator, stream
from .model import Activation


class FormatError(ValueError):
    """Malformed input file."""


@dataclass(frozen=True)
class Normalization:
    mean: np.ndarray
    scale: np.ndarray

    def apply(self, X):
        return (np.asarray(X, dtype=float) - self.mean) / self.scale

    def invert(self, Z):
        return np.asarray(Z, dtype=float) * self.scale + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}


@dataclass
class Dataset:
    features: np.ndarray
    targets: np.ndarray
    n_classes: int | None = None
    name: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=float))
        if self.features.shape[0] == 0:
            self.features = self.features.reshape(0, self.features.shape[-1])
        if not np.all(np.isfinite(self.features)):
            raise ValueError(f"dataset {self.name!r} has non-finite features")
        if self.n_classes is not None:
            targets = np.asarray(self.targets).reshape(-1)
            if targets.size and (np.any(targets != np.round(targets)) or targets.min() < 1 or targets.max() > self.n_classes):
                raise ValueError(f"labels of {self.name!r} must lie in 1..{self.n_classes}")
            self.targets = targets.astype(int)
        else:
            targets = np.asarray(self.targets, dtype=float)
            self.targets = targets.reshape(targets.shape[0], -1) if targets.size else targets.reshape(0, 1)
            if not np.all(np.isfinite(self.targets)):
                raise ValueError(f"dataset {self.name!r} has non-finite targets")
        if self.targets.shape[0] != self.features.shape[0]:
            raise ValueError("features and targets disagree on the number of rows")

    @property
    def p(self) -> int:
        return self.features.shape[0]

    @property
    def d_x(self) -> int:
        return self.features.shape[1]

    @property
    def d_y(self) -> int:
        return self.n_classes if self.is_classification else self.targets.shape[1]

    @property
    def is_classification(self) -> bool:
        return self.n_classes is not None

    def subset(self, idx, name: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(
            self.features[idx], self.targets[idx], self.n_classes,
            self.name if name is None else name, dict(self.metadata),
        )

    def with_bias(self) -> "Dataset":
        """Append a constant-1 feature, the only way a hidden bias enters the model."""
        meta = dict(self.metadata, bias_feature=True)
        feats = np.hstack([self.features, np.ones((self.p, 1))])
        return Dataset(feats, self.targets, self.n_classes, self.name, meta)


# ---------------------------------------------------------------------------
# IDX

_IDX_IMAGES = 0x00000803
_IDX_LABELS = 0x00000801


def _read_idx(path, expected_magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated at byte 0, no magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic at byte 0: expected 0x{expected_magic:08x}, found 0x{magic:08x}")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError(f"{path}: truncated header, need {header_end} bytes, file has {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    size = int(np.prod(dims))
    if len(raw) < header_end + size:
        raise FormatError(
            f"{path}: truncated payload at byte {len(raw)}, expected {header_end + size} bytes for dims {dims}"
        )
    if len(raw) > header_end + size:
        raise FormatError(f"{path}: {len(raw) - header_end - size} trailing bytes after offset {header_end + size}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header_end).reshape(dims)


def load_idx(images_path, labels_path, n_classes: int = 10, name: str = "idx") -> Dataset:
    """Read an IDX image/label pair, scaling pixels to ``[0, 1]``."""
    images = _read_idx(images_path, _IDX_IMAGES, 3)
    labels = _read_idx(labels_path, _IDX_LABELS, 1)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"{images_path} holds {images.shape[0]} images but {labels_path} holds {labels.shape[0]} labels"
        )
    if labels.size and labels.max() >= n_classes:
        raise FormatError(f"{labels_path}: label {labels.max()} outside 0..{n_classes - 1}")
    feats = images.reshape(images.shape[0], -1).astype(float) / 255.0
    return Dataset(
        feats, labels.astype(int) + 1, n_classes, name,
        {"source": "idx", "pixel_scaling": "x/255", "image_shape": list(images.shape[1:])},
    )


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (3-D images or 1-D labels)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = {3: _IDX_IMAGES, 1: _IDX_LABELS}[array.ndim]
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


# ---------------------------------------------------------------------------
# CSV


def zscore(X) -> Normalization:
    X = np.asarray(X, dtype=float)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    # constant columns are only centered
    scale = np.where(std > 0, std, 1.0)
    return Normalization(mean, scale)


def load_csv_regression(path, target_columns, name: str | None = None) -> Dataset:
    """Numeric CSV with header; named columns become targets, the rest z-scored features."""
    target_columns = [target_columns] if isinstance(target_columns, str) else list(target_columns)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        rows = []
        for r, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}: row {r} has {len(row)} cells, header has {len(header)}")
            values = []
            for c, cell in enumerate(row):
                try:
                    values.append(float(cell))
                except ValueError:
                    raise FormatError(f"{path}: row {r}, column {header[c]!r}: non-numeric value {cell!r}") from None
            rows.append(values)
    missing = [t for t in target_columns if t not in header]
    if missing:
        raise FormatError(f"{path}: target column(s) {missing} not in header {header}")
    if not rows:
        raise FormatError(f"{path}: no data rows")
    table = np.array(rows)
    t_idx = [header.index(t) for t in target_columns]
    f_idx = [k for k in range(len(header)) if k not in t_idx]
    norm = zscore(table[:, f_idx])
    return Dataset(
        norm.apply(table[:, f_idx]), table[:, t_idx], None, name or Path(path).stem,
        {
            "source": "csv",
            "feature_columns": [header[k] for k in f_idx],
            "target_columns": target_columns,
            "normalization": norm.to_dict(),
        },
    )


# ---------------------------------------------------------------------------
# synthetic


@dataclass(frozen=True)
class TeacherSpec:
    n_teacher: int = 16
    d_x: int = 4
    d_y: int = 1
    activation: str = "relu"
    weight_scale: float = 1.0
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if min(self.n_teacher, self.d_x, self.d_y) < 1:
            raise ValueError("teacher dimensions must be >= 1")
        if self.weight_scale <= 0 or self.noise_std < 0:
            raise ValueError("weight_scale must be positive and noise_std non-negative")


class TeacherDistribution:
    """Data distribution ``x ~ N(0, scale^2 I)``, ``y = f_teacher(x) + noise``."""

    def __init__(self, spec: TeacherSpec, input_scale: float = 1.0):
        self.spec = spec
        self.input_scale = input_scale
        gen = stream(spec.seed, 10)
        self.a = gen.normal(0.0, spec.weight_scale, (spec.n_teacher, spec.d_y))
        self.b = gen.normal(0.0, spec.weight_scale / np.sqrt(spec.d_x), (spec.n_teacher, spec.d_x))
        self.activation = Activation(spec.activation)

    def mean_function(self, X) -> np.ndarray:
        return self.activation(np.asarray(X) @ self.b.T) @ self.a / self.spec.n_teacher

    def sample(self, p: int, rng) -> tuple[np.ndarray, np.ndarray]:
        gen = as_generator(rng)
        X = gen.normal(0.0, self.input_scale, (p, self.spec.d_x))
        Y = self.mean_function(X) + gen.normal(0.0, self.spec.noise_std, (p, self.spec.d_y))
        return X, Y


def synth_teacher_regression(spec: TeacherSpec, p: int, input_scale: float, rng) -> Dataset:
    teacher = TeacherDistribution(spec, input_scale)
    X, Y = teacher.sample(p, rng)
    return Dataset(X, Y, None, "teacher", {"source": "teacher", "teacher": spec.__dict__, "input_scale": input_scale})


def synth_blobs(n_per_class: int, n_classes: int, d_x: int, separation: float, rng) -> Dataset:
    """Unit-variance Gaussian blobs centered at ``+-separation * e_k``.

    Class ``c`` (0-based) sits on axis ``c mod d_x`` with sign ``(-1)^(c // d_x)``.
    """
    if separation <= 0:
        raise ValueError("separation must be positive")
    if n_classes < 2 or n_classes > 2 * d_x:
        raise ValueError(f"need 2 <= n_classes <= 2 * d_x, got n_classes={n_classes}, d_x={d_x}")
    gen = as_generator(rng)
    centers = np.zeros((n_classes, d_x))
    for c in range(n_classes):
        centers[c, c % d_x] = separation * (-1) ** (c // d_x)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    X = centers[labels] + gen.standard_normal((labels.size, d_x))
    order = gen.permutation(labels.size)
    return Dataset(
        X[order], labels[order] + 1, n_classes, "blobs",
        {"source": "blobs", "separation": separation, "n_per_class": n_per_class},
    )


# ---------------------------------------------------------------------------
# splitting


def split(dataset: Dataset, fraction: float, rng) -> tuple[Dataset, Dataset]:
    """Seeded shuffle into ``(train, test)`` with ``round(fraction * p)`` training rows."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie strictly between 0 and 1")
    n_train = int(round(fraction * dataset.p))
    if n_train == 0 or n_train == dataset.p:
        raise ValueError(f"fraction {fraction} leaves an empty side for p={dataset.p}")
    order = as_generator(rng).permutation(dataset.p)
    return dataset.subset(np.sort(order[:n_train])), dataset.subset(np.sort(order[n_train:]))


def partition_indices(p: int, batch_count: int, rng) -> list[np.ndarray]:
    """Shuffled partition of ``range(p)`` into cells whose sizes differ by at most one."""
    if not 1 <= batch_count <= max(p, 1):
        raise ValueError(f"need 1 <= L <= p, got L={batch_count}, p={p}")
    return np.array_split(as_generator(rng).permutation(p), batch_count)


def batches(dataset: Dataset, batch_count: int, rng) -> list[Dataset]:
    return [dataset.subset(idx) for idx in partition_indices(dataset.p, batch_count, rng)]
