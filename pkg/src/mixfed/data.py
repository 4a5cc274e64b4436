"""Datasets, non-IID partitioners and per-client train/test splitting."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be an n x input_dim matrix")
        n = self.features.shape[0]
        if n < 1:
            raise ValueError("dataset must contain at least one sample")
        if self.labels.shape != (n,):
            raise ValueError(f"expected {n} labels, got {self.labels.shape[0]}")
        if self.num_classes < 1 or np.any(self.labels < 0) or np.any(self.labels >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes)

    def label_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass
class ClientSplit:
    client_id: int
    train: LabeledDataset
    test: LabeledDataset
    train_indices: np.ndarray
    test_indices: np.ndarray


def generate_synthetic(num_classes: int, input_dim: int, per_class: int, spread: float,
                       seed) -> LabeledDataset:
    """Class-conditional Gaussian clusters.

    Centers are standard-normal draws; each sample is its class center plus
    isotropic noise of standard deviation ``spread``. Samples are grouped by
    class (class 0 first).
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if per_class < 10:
        raise ValueError("per_class must be >= 10")
    if input_dim < 1:
        raise ValueError("input_dim must be >= 1")
    if spread < 0 or not np.isfinite(spread):
        raise ValueError("spread must be a finite non-negative number")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((num_classes, input_dim))
    noise = rng.standard_normal((num_classes * per_class, input_dim))
    labels = np.repeat(np.arange(num_classes), per_class)
    features = centers[labels] + spread * noise
    return LabeledDataset(features, labels, num_classes)


def pathological_partition(data: LabeledDataset, num_clients: int, classes_per_client: int,
                           seed) -> list[np.ndarray]:
    """Give each client samples from exactly ``classes_per_client`` labels.

    ``num_clients * classes_per_client`` shards are spread over the labels as
    evenly as possible (classes that receive an extra shard are chosen from
    the seed). Each label's shuffled samples are cut into equal shards, the
    remainder going to its last shard. Shards are laid out label-contiguously
    and shard ``j`` goes to client ``j mod N``: a label owns at most ``N``
    consecutive shards, so no client can receive the same label twice.
    """
    C = data.num_classes
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    if not 1 <= classes_per_client <= C:
        raise ValueError(f"classes_per_client must be in [1, {C}]")
    rng = np.random.default_rng(seed)
    total = num_clients * classes_per_client
    shards_per_class = np.full(C, total // C)
    order = rng.permutation(C)
    shards_per_class[order[: total % C]] += 1

    counts = data.label_counts()
    short = [c for c in range(C) if shards_per_class[c] > counts[c]]
    if short:
        raise ValueError(
            f"infeasible partition: classes {short} have fewer samples than the "
            f"{int(shards_per_class[short[0]])} shards they must be cut into"
        )

    shards: list[np.ndarray] = []
    for c in order:
        r = int(shards_per_class[c])
        if r == 0:
            continue
        idx = rng.permutation(np.flatnonzero(data.labels == c))
        size = len(idx) // r
        for s in range(r):
            stop = len(idx) if s == r - 1 else (s + 1) * size
            shards.append(idx[s * size:stop])

    client_of_slot = rng.permutation(num_clients)
    parts: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    for j, shard in enumerate(shards):
        parts[client_of_slot[j % num_clients]].append(shard)
    return [np.sort(np.concatenate(p)) for p in parts]


def largest_remainder(total: int, proportions: np.ndarray) -> np.ndarray:
    """Integer allocation of ``total`` proportional to ``proportions``, summing exactly."""
    p = np.asarray(proportions, dtype=np.float64)
    p = p / p.sum()
    quota = p * total
    alloc = np.floor(quota).astype(np.int64)
    remainder = total - int(alloc.sum())
    # stable sort: ties go to the lower client index
    order = np.argsort(-(quota - alloc), kind="stable")
    alloc[order[:remainder]] += 1
    return alloc


def dirichlet_partition(data: LabeledDataset, num_clients: int, gamma: float,
                        seed) -> list[np.ndarray]:
    """Allocate every label's samples across clients by a Dirichlet(gamma) draw."""
    if not gamma > 0 or not np.isfinite(gamma):
        raise ValueError("gamma must be a finite positive number")
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    for c in range(data.num_classes):
        idx = rng.permutation(np.flatnonzero(data.labels == c))
        if len(idx) == 0:
            continue
        props = rng.dirichlet(np.full(num_clients, gamma))
        if not np.all(np.isfinite(props)) or props.sum() <= 0:
            # tiny gamma can underflow every component; the mass then sits on one client
            props = np.zeros(num_clients)
            props[rng.integers(num_clients)] = 1.0
        alloc = largest_remainder(len(idx), props)
        start = 0
        for k in range(num_clients):
            parts[k].append(idx[start:start + alloc[k]])
            start += alloc[k]
    return [np.sort(np.concatenate(p)) if p else np.zeros(0, dtype=np.int64) for p in parts]


def split_train_test(data: LabeledDataset, indices, ratio: float = 0.8, seed=0,
                     client_id: int = 0, min_per_label: int = 5) -> ClientSplit:
    """Stratified split of a client's pool; each label goes ceil(ratio * n) to train."""
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie in (0, 1)")
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices) == 0:
        raise ValueError(f"client {client_id} has no samples")
    if len(np.unique(indices)) != len(indices):
        raise ValueError("indices must be distinct")
    rng = np.random.default_rng(seed)
    labels = data.labels[indices]
    train, test = [], []
    for c in np.unique(labels):
        own = rng.permutation(indices[labels == c])
        if len(own) < min_per_label:
            raise ValueError(
                f"client {client_id}: label {int(c)} has {len(own)} samples, need at least {min_per_label}"
            )
        n_train = int(np.ceil(ratio * len(own) - 1e-9))
        train.append(own[:n_train])
        test.append(own[n_train:])
    train_idx = np.sort(np.concatenate(train))
    test_idx = np.sort(np.concatenate(test))
    if len(test_idx) == 0:
        raise ValueError(f"client {client_id}: too few samples to form a test set")
    return ClientSplit(client_id, data.subset(train_idx), data.subset(test_idx), train_idx, test_idx)


# -- file ingestion ----------------------------------------------------------

IDX_LABEL_MAGIC = 0x00000801
IDX_IMAGE_MAGIC_UBYTE = 0x08


def _scale_unit(features: np.ndarray) -> np.ndarray:
    lo, hi = features.min(), features.max()
    if lo >= 0.0 and hi <= 1.0:
        return features
    if hi == lo:
        return np.zeros_like(features)
    return (features - lo) / (hi - lo)


def _check(dataset_features, labels, num_classes, expected_dim) -> LabeledDataset:
    if expected_dim is not None and dataset_features.shape[1] != expected_dim:
        raise ValueError(
            f"feature dimension {dataset_features.shape[1]} does not match configured {expected_dim}"
        )
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if len(labels) else 0
    bad = labels[(labels < 0) | (labels >= num_classes)]
    if len(bad):
        raise ValueError(f"label {int(bad[0])} out of range [0, {num_classes})")
    return LabeledDataset(dataset_features, labels, num_classes)


def load_csv(path, num_classes: int | None = None, expected_dim: int | None = None) -> LabeledDataset:
    """Header-less rows ``f1,...,fd,label``."""
    rows = []
    width = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < 2:
                raise ValueError(f"{path}:{lineno}: need at least one feature and a label")
            if width is not None and len(row) != width:
                raise ValueError(f"{path}:{lineno}: expected {width} columns, got {len(row)}")
            width = len(row)
            try:
                feats = [float(v) for v in row[:-1]]
                label = float(row[-1])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric value (header rows are not allowed)") from None
            if label != int(label):
                raise ValueError(f"{path}:{lineno}: label {row[-1]!r} is not an integer")
            rows.append((feats, int(label)))
    if not rows:
        raise ValueError(f"{path}: no data rows")
    features = np.array([r[0] for r in rows], dtype=np.float64)
    labels = np.array([r[1] for r in rows], dtype=np.int64)
    if not np.all(np.isfinite(features)):
        raise ValueError(f"{path}: non-finite feature values")
    return _check(_scale_unit(features), labels, num_classes, expected_dim)


def export_csv(data: LabeledDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for x, y in zip(data.features, data.labels):
            writer.writerow([repr(float(v)) for v in x] + [int(y)])


def _read_idx(path, expect_label: bool) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated IDX header")
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code != IDX_IMAGE_MAGIC_UBYTE:
        raise ValueError(
            f"{path}: bad IDX magic number 0x{int.from_bytes(raw[:4], 'big'):08x} "
            "(expected unsigned-byte IDX, 0x0000080N)"
        )
    if expect_label and ndim != 1:
        raise ValueError(f"{path}: label file must be 1-dimensional, got {ndim} dimensions")
    if not expect_label and ndim < 2:
        raise ValueError(f"{path}: image file must have at least 2 dimensions")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ValueError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    body = np.frombuffer(raw, dtype=np.uint8, offset=header)
    if body.size != int(np.prod(dims)):
        raise ValueError(f"{path}: expected {int(np.prod(dims))} bytes of data, found {body.size}")
    return body.reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None,
             expected_dim: int | None = None) -> LabeledDataset:
    images = _read_idx(images_path, expect_label=False)
    labels = _read_idx(labels_path, expect_label=True).astype(np.int64)
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return _check(features, labels, num_classes, expected_dim)


def export_idx(data: LabeledDataset, images_path, labels_path) -> None:
    """Write features (expected in [0, 1]) as unsigned bytes, scaled by 255."""
    pixels = np.rint(np.clip(data.features, 0.0, 1.0) * 255.0).astype(np.uint8)
    n, dim = pixels.shape
    Path(images_path).write_bytes(struct.pack(">HBBII", 0, 0x08, 2, n, dim) + pixels.tobytes())
    Path(labels_path).write_bytes(struct.pack(">HBBI", 0, 0x08, 1, n)
                                  + data.labels.astype(np.uint8).tobytes())


def load_external(path, format: str, labels_path=None, num_classes: int | None = None,
                  expected_dim: int | None = None) -> LabeledDataset:
    """Load a dataset from disk; features end up in [0, 1]."""
    if format == "csv":
        return load_csv(path, num_classes, expected_dim)
    if format == "idx":
        if labels_path is None:
            raise ValueError("idx format needs a labels file")
        return load_idx(path, labels_path, num_classes, expected_dim)
    raise ValueError(f"unknown dataset format {format!r} (expected 'csv' or 'idx')")


def label_entropy(data: LabeledDataset, indices) -> float:
    counts = np.bincount(data.labels[np.asarray(indices, dtype=np.int64)], minlength=data.num_classes)
    if counts.sum() == 0:
        return 0.0
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())
