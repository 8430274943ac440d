"""Datasets, synthetic generation and label-skewed federated partitioning."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataFormatError, UsageError


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        X = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise UsageError(f"features {X.shape} and labels {y.shape} disagree")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise UsageError(f"labels must lie in [0, {self.num_classes})")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class ClientData:
    client_id: int
    data: Dataset
    indices: np.ndarray  # positions in the source dataset

    @property
    def num_samples(self) -> int:
        return len(self.data)


@dataclass(frozen=True)
class FederatedDataset:
    clients: tuple[ClientData, ...]
    test_set: Dataset
    test_indices: np.ndarray
    alpha: float = field(default=float("nan"))
    seed: int = 0

    @property
    def num_clients(self) -> int:
        return len(self.clients)

    def manifest(self) -> dict:
        """Client id to sample indices, for reproducibility audits."""
        return {
            "num_clients": self.num_clients,
            "alpha": self.alpha,
            "seed": self.seed,
            "test_indices": [int(i) for i in self.test_indices],
            "clients": {
                str(c.client_id): [int(i) for i in c.indices] for c in self.clients
            },
            "label_histograms": {
                str(c.client_id): [int(k) for k in c.data.class_counts()] for c in self.clients
            },
        }

    def write_manifest(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.manifest(), fh, indent=1)
            fh.write("\n")


def generate_synthetic(
    num_classes: int,
    input_dim: int,
    samples_per_class: int,
    class_separation: float,
    seed: int,
) -> Dataset:
    """Gaussian blobs with identity covariance, one mean per class.

    When ``input_dim >= num_classes`` the means are orthogonal, each at
    distance ``class_separation * sqrt(2)`` from the origin, so every pair of
    classes is ``2 * class_separation`` apart. In fewer dimensions the means
    are random directions at the same radius. Rows are shuffled.
    """
    if min(num_classes, input_dim, samples_per_class) < 1:
        raise UsageError("counts must be >= 1")
    if not class_separation > 0:
        raise UsageError("class_separation must be > 0")
    rng = np.random.default_rng(seed)
    radius = class_separation * np.sqrt(2.0)
    if input_dim >= num_classes:
        q, _ = np.linalg.qr(rng.normal(size=(input_dim, num_classes)))
        means = radius * q.T
    else:
        dirs = rng.normal(size=(num_classes, input_dim))
        means = radius * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    features = means[labels] + rng.normal(size=(labels.size, input_dim))
    perm = rng.permutation(labels.size)
    return Dataset(features[perm], labels[perm], num_classes)


def stratified_split(ds: Dataset, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Return sorted ``(train_idx, test_idx)`` holding out ``test_fraction`` of each class."""
    if not 0.0 <= test_fraction < 1.0:
        raise UsageError("test_fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        idx = idx[rng.permutation(idx.size)]
        k = int(round(test_fraction * idx.size))
        test.append(idx[:k])
        train.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def _largest_remainder(total: int, p: np.ndarray) -> np.ndarray:
    raw = total * p
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        # stable sort: ties go to the lower class id
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _allocate(total: int, p: np.ndarray, capacity: np.ndarray) -> np.ndarray:
    """Split ``total`` samples across classes in proportion ``p`` without exceeding ``capacity``."""
    counts = np.zeros_like(capacity)
    remaining = total
    while remaining > 0:
        room = capacity - counts
        weights = np.where(room > 0, p, 0.0)
        if weights.sum() <= 0.0:
            weights = (room > 0).astype(np.float64)
        take = np.minimum(_largest_remainder(remaining, weights / weights.sum()), room)
        counts += take
        remaining -= int(take.sum())
    return counts


def _client_sizes(n: int, k: int) -> list[int]:
    # balanced; leftovers go one per client in id order
    return [n // k + (1 if i < n % k else 0) for i in range(k)]


def partition_dirichlet(
    ds: Dataset,
    num_clients: int,
    alpha: float,
    seed: int,
    test_fraction: float = 0.2,
) -> FederatedDataset:
    """Hold out a stratified test set, then split the rest across clients.

    ``alpha > 0``: client sizes are balanced and each client's label mix
    follows proportions drawn from ``Dirichlet(alpha)``; counts are rounded
    with largest remainders and capped by what is left of each class.

    ``alpha == 0``: client ``k`` receives only class ``k mod C``; each class
    is split evenly among its clients.
    """
    if num_clients < 1:
        raise UsageError("num_clients must be >= 1")
    if not alpha >= 0:
        raise UsageError(f"alpha must be >= 0, got {alpha}")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = stratified_split(ds, test_fraction, int(rng.integers(2**63)))
    n = train_idx.size
    if num_clients > n:
        raise UsageError(f"{num_clients} clients but only {n} training samples")
    C = ds.num_classes
    pools = []
    for c in range(C):
        pool = train_idx[ds.labels[train_idx] == c]
        pools.append(pool[rng.permutation(pool.size)])

    assignments: list[np.ndarray] = []
    if alpha == 0:
        present = [c for c in range(C) if pools[c].size > 0]
        if num_clients < len(present):
            raise UsageError(
                f"alpha=0 gives one class per client: need at least {len(present)} clients"
            )
        owners: dict[int, list[int]] = {c: [] for c in present}
        for k in range(num_clients):
            owners[present[k % len(present)]].append(k)
        per_client: dict[int, np.ndarray] = {}
        for c, ks in owners.items():
            sizes = _client_sizes(pools[c].size, len(ks))
            if min(sizes) < 1:
                raise UsageError(f"class {c} has fewer samples than the clients assigned to it")
            bounds = np.cumsum([0] + sizes)
            for j, k in enumerate(ks):
                per_client[k] = pools[c][bounds[j] : bounds[j + 1]]
        assignments = [per_client[k] for k in range(num_clients)]
    else:
        capacity = np.array([p.size for p in pools], dtype=np.int64)
        cursor = np.zeros(C, dtype=np.int64)
        for size in _client_sizes(n, num_clients):
            p = rng.gamma(alpha, size=C)
            if not np.isfinite(p).all() or p.sum() <= 0.0:
                p = np.zeros(C)
                p[rng.integers(C)] = 1.0
            counts = _allocate(size, p / p.sum(), capacity - cursor)
            parts = [pools[c][cursor[c] : cursor[c] + counts[c]] for c in range(C)]
            cursor += counts
            assignments.append(np.concatenate(parts))

    clients = tuple(
        ClientData(k, ds.subset(np.sort(idx)), np.sort(idx)) for k, idx in enumerate(assignments)
    )
    return FederatedDataset(clients, ds.subset(test_idx), test_idx, float(alpha), seed)


@dataclass(frozen=True)
class CsvSchema:
    has_header: bool = True
    num_classes: int | None = None
    delimiter: str = ","


def load_csv(path: str | Path, schema: CsvSchema | None = None) -> Dataset:
    """Read numeric feature columns followed by an integer label column."""
    schema = schema or CsvSchema()
    rows: list[list[float]] = []
    labels: list[int] = []
    width = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        for line_no, row in enumerate(reader, start=1):
            if schema.has_header and line_no == 1:
                continue
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < 2:
                raise DataFormatError(f"{path}:{line_no}: need features and a label", line_no)
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DataFormatError(
                    f"{path}:{line_no}: expected {width} columns, got {len(row)}", line_no
                )
            try:
                rows.append([float(cell) for cell in row[:-1]])
                labels.append(int(row[-1]))
            except ValueError as exc:
                raise DataFormatError(f"{path}:{line_no}: {exc}", line_no) from None
    if not rows:
        raise UsageError(f"{path}: no data rows")
    X = np.array(rows)
    if not np.isfinite(X).all():
        bad = int(np.flatnonzero(~np.isfinite(X).all(axis=1))[0])
        raise DataFormatError(f"{path}: non-finite feature in data row {bad + 1}", None)
    y = np.array(labels, dtype=np.int64)
    if y.min() < 0:
        raise DataFormatError(f"{path}: negative label", None)
    num_classes = schema.num_classes if schema.num_classes is not None else int(y.max()) + 1
    return Dataset(X, y, max(num_classes, 2))


def save_csv(ds: Dataset, path: str | Path, delimiter: str = ",") -> None:
    """Write ``ds`` so that :func:`load_csv` reproduces it bit for bit."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter)
        w.writerow([f"x{j}" for j in range(ds.input_dim)] + ["label"])
        for x, y in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


def label_histograms(fed: FederatedDataset) -> np.ndarray:
    return np.stack([c.data.class_counts() for c in fed.clients])


def total_variation_from_uniform(hist: Sequence[int]) -> float:
    h = np.asarray(hist, dtype=np.float64)
    p = h / h.sum()
    return 0.5 * float(np.abs(p - 1.0 / h.size).sum())
