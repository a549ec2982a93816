"""Datasets: synthetic zero-shot benchmark, IDX loader, class-disjoint split."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from ..errors import FormatError, ParameterError, ProtocolError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    samples: np.ndarray
    labels: np.ndarray
    class_names: list | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.ndim != 2 or self.samples.shape[0] != self.labels.shape[0]:
            raise ParameterError(f"samples {self.samples.shape} and labels {self.labels.shape} "
                                 "must be n x d and n")
        present = np.unique(self.labels)
        if present.size and not np.array_equal(present, np.arange(present.size)):
            raise ParameterError("labels must be dense in [0, C)")

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    @property
    def input_dim(self) -> int:
        return self.samples.shape[1]

    def __len__(self):
        return self.labels.size


@dataclass
class ZslSplit:
    train_classes: list
    test_classes: list
    train_idx: np.ndarray
    test_idx: np.ndarray
    val_idx: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __post_init__(self):
        check_disjoint(self.train_classes, self.test_classes)


def check_disjoint(train_classes, test_classes) -> None:
    overlap = set(map(int, train_classes)) & set(map(int, test_classes))
    if overlap:
        raise ProtocolError(f"train and test classes overlap: {sorted(overlap)}")


def zsl_split(dataset: Dataset, train_fraction: float = 0.5) -> ZslSplit:
    """First ``floor(C * fraction)`` class ids train, the remainder test."""
    C = dataset.n_classes
    if C < 2:
        raise ProtocolError("a zero-shot split needs at least two classes")
    n_train = math.floor(C * train_fraction)
    if not 0 < n_train < C:
        raise ProtocolError(f"train fraction {train_fraction} leaves one side empty for C={C}")
    train_classes = list(range(n_train))
    test_classes = list(range(n_train, C))
    train_mask = dataset.labels < n_train
    return ZslSplit(train_classes, test_classes,
                    np.flatnonzero(train_mask), np.flatnonzero(~train_mask))


def hold_out_validation(split: ZslSplit, labels: np.ndarray, fraction: float,
                        rng: np.random.Generator) -> ZslSplit:
    """Move ``fraction`` of every seen class into a seen-class validation set.

    Each class keeps at least two training samples.
    """
    if fraction <= 0:
        return split
    train, val = [], []
    for c in split.train_classes:
        members = split.train_idx[labels[split.train_idx] == c]
        members = members[rng.permutation(members.size)]
        k = min(int(math.floor(members.size * fraction)), max(members.size - 2, 0))
        val.extend(members[:k])
        train.extend(members[k:])
    return ZslSplit(split.train_classes, split.test_classes, np.sort(np.asarray(train, np.int64)),
                    split.test_idx, np.sort(np.asarray(val, np.int64)))


def synth_dataset(n_classes: int = 20, per_class: int = 50, noise: float = 0.6,
                  rng: np.random.Generator | None = None, input_dim: int = 48,
                  active: int = 6, n_nuisance: int = 6, nuisance_ratio: float = 2.0) -> Dataset:
    """Gaussian clusters around structured class prototypes.

    A prototype is a class-specific sparse signed pattern on ``active``
    coordinates plus a class-specific mix of ``n_nuisance`` directions shared
    by all classes.  Every sample adds isotropic noise of scale ``noise`` and
    an independent mix of the same nuisance directions of scale
    ``noise * nuisance_ratio``.  The nuisance subspace separates the seen
    classes somewhat but is dominated by per-sample variation, so features
    leaning on it transfer poorly to unseen classes.
    """
    if per_class < 2:
        raise ParameterError("per_class must be >= 2 so that positives exist")
    if n_classes < 2:
        raise ParameterError("need at least two classes")
    rng = rng if rng is not None else np.random.default_rng(0)
    nuisance = rng.standard_normal((n_nuisance, input_dim))
    nuisance /= np.linalg.norm(nuisance, axis=1, keepdims=True)
    protos = np.zeros((n_classes, input_dim))
    for c in range(n_classes):
        coords = rng.choice(input_dim, size=active, replace=False)
        protos[c, coords] = rng.choice([-1.5, 1.5], size=active)
        protos[c] += rng.standard_normal(n_nuisance) @ nuisance
    labels = np.repeat(np.arange(n_classes), per_class)
    mix = rng.standard_normal((labels.size, n_nuisance)) * nuisance_ratio
    jitter = mix @ nuisance + rng.standard_normal((labels.size, input_dim))
    samples = protos[labels] + noise * jitter
    return Dataset(samples, labels, [f"class_{c}" for c in range(n_classes)])


def synth_prototypes(dataset: Dataset) -> np.ndarray:
    """Per-class means (the prototypes themselves when noise is off)."""
    return np.stack([dataset.samples[dataset.labels == c].mean(axis=0)
                     for c in range(dataset.n_classes)])


# ---------------------------------------------------------------------------
# IDX


def _read_idx(path, expected_magic: int) -> tuple[tuple, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header at offset {len(raw)}")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x} at offset 0, "
                          f"expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError(f"{path}: truncated dimension header at offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    size = int(np.prod(dims)) if dims else 0
    if len(raw) != header_end + size:
        raise FormatError(f"{path}: payload is {len(raw) - header_end} bytes at offset "
                          f"{header_end}, dimensions {dims} require {size}")
    data = np.frombuffer(raw, dtype=np.uint8, count=size, offset=header_end)
    return dims, data.reshape(dims)


def load_idx(path_images, path_labels) -> Dataset:
    """Load an IDX image/label file pair; pixels are scaled to [0, 1]."""
    dims, images = _read_idx(path_images, IDX_IMAGES_MAGIC)
    ldims, labels = _read_idx(path_labels, IDX_LABELS_MAGIC)
    if ldims[0] != dims[0]:
        raise FormatError(f"{path_labels}: {ldims[0]} labels at offset 4 but "
                          f"{path_images} holds {dims[0]} images")
    samples = images.reshape(dims[0], -1).astype(np.float64) / 255.0
    ids, dense = np.unique(labels, return_inverse=True)
    return Dataset(samples, dense.reshape(-1), [str(int(i)) for i in ids])


def write_idx(path, array, kind: str = "images") -> None:
    """Write unsigned bytes in IDX layout (``kind`` is ``images`` or ``labels``)."""
    arr = np.asarray(array, dtype=np.uint8)
    magic = IDX_IMAGES_MAGIC if kind == "images" else IDX_LABELS_MAGIC
    if (magic & 0xFF) != arr.ndim:
        raise FormatError(f"{kind} IDX needs {magic & 0xFF} dimensions, got {arr.ndim}")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())
