"""Dataset provisioning: synthetic blobs, binary on-disk format, partitioning.

The on-disk dataset format is little-endian binary: 8 magic bytes, u32
example count, u32 input dim, u32 class count, then n*dim float32 inputs
(row-major) followed by n u32 labels.  Model files reuse the convention:
magic, u32 d, then d float32 values.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import philox

DATASET_MAGIC = b"FLDS0001"
MODEL_MAGIC = b"FLMD0001"


class DatasetFormatError(ValueError):
    """Base for on-disk dataset format violations."""


class MalformedHeaderError(DatasetFormatError):
    pass


class TruncatedPayloadError(DatasetFormatError):
    pass


class LabelRangeError(DatasetFormatError):
    pass


@dataclass
class Dataset:
    """Feature matrix with integer labels; inputs stored as float32."""

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise ValueError(f"inputs must be 2-D, got shape {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ValueError("labels length must match number of input rows")
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if len(self.labels) and (
            self.labels.min() < 0 or self.labels.max() >= self.num_classes
        ):
            raise LabelRangeError("labels out of range [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(self.inputs[indices], self.labels[indices], self.num_classes)


@dataclass
class Partition:
    """Per-client example indices; disjoint, non-empty shards."""

    shards: tuple[np.ndarray, ...]

    def __post_init__(self):
        self.shards = tuple(
            np.ascontiguousarray(np.sort(np.asarray(s, dtype=np.int64)))
            for s in self.shards
        )
        seen: set[int] = set()
        for i, shard in enumerate(self.shards):
            if len(shard) == 0:
                raise ValueError(f"client {i} has an empty shard")
            ids = set(int(x) for x in shard)
            if seen & ids:
                raise ValueError("shards are not pairwise disjoint")
            seen |= ids

    @property
    def num_clients(self) -> int:
        return len(self.shards)


def generate_synthetic(
    classes: int, dim: int, n: int, separation: float, seed: int
) -> Dataset:
    """Gaussian blobs with pairwise mean distance set by `separation`.

    Class c is drawn N(mu_c, I).  When classes <= dim the means sit on
    scaled unit axes so every pair is exactly `separation` apart;
    otherwise random directions give that distance in expectation.
    Rows are shuffled; deterministic in the seed.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    if n < classes:
        raise ValueError(f"need at least one example per class, got n={n}")
    if dim < 1:
        raise ValueError(f"input dim must be >= 1, got {dim}")
    if separation < 0:
        raise ValueError(f"separation must be >= 0, got {separation}")
    rng = philox(seed)
    scale = separation / np.sqrt(2.0)
    if classes <= dim:
        means = np.zeros((classes, dim))
        for c in range(classes):
            means[c, c] = scale
    else:
        directions = rng.normal(size=(classes, dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        means = directions * scale

    counts = np.full(classes, n // classes, dtype=np.int64)
    counts[: n % classes] += 1
    labels = np.repeat(np.arange(classes, dtype=np.int64), counts)
    inputs = rng.normal(size=(n, dim)) + means[labels]
    order = rng.permutation(n)
    return Dataset(inputs[order], labels[order], classes)


def save_dataset(ds: Dataset, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<III", len(ds), ds.input_dim, ds.num_classes))
        fh.write(ds.inputs.astype("<f4").tobytes())
        fh.write(ds.labels.astype("<u4").tobytes())


def load_dataset(path: str | Path) -> Dataset:
    """Parse the binary dataset format, validating all invariants."""
    raw = Path(path).read_bytes()
    header_len = len(DATASET_MAGIC) + 12
    if len(raw) < header_len or raw[: len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise MalformedHeaderError(f"{path}: not a dataset file (bad magic or header)")
    n, dim, classes = struct.unpack_from("<III", raw, len(DATASET_MAGIC))
    if classes < 2 or dim < 1:
        raise MalformedHeaderError(f"{path}: invalid header fields n={n} dim={dim} classes={classes}")
    expected = header_len + 4 * n * dim + 4 * n
    if len(raw) != expected:
        raise TruncatedPayloadError(
            f"{path}: payload is {len(raw)} bytes, expected {expected}"
        )
    inputs = (
        np.frombuffer(raw, dtype="<f4", count=n * dim, offset=header_len)
        .reshape(n, dim)
        .copy()
    )
    labels = np.frombuffer(
        raw, dtype="<u4", count=n, offset=header_len + 4 * n * dim
    ).astype(np.int64)
    if len(labels) and labels.max() >= classes:
        raise LabelRangeError(f"{path}: label {labels.max()} >= classes {classes}")
    return Dataset(inputs, labels, classes)


def save_model(w: np.ndarray, path: str | Path) -> None:
    # float64 payload: probing a saved model must reproduce the training
    # evaluation bit-exactly.
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", len(w)))
        fh.write(np.asarray(w, dtype="<f8").tobytes())


def load_model(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    header_len = len(MODEL_MAGIC) + 4
    if len(raw) < header_len or raw[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise MalformedHeaderError(f"{path}: not a model file (bad magic or header)")
    (d,) = struct.unpack_from("<I", raw, len(MODEL_MAGIC))
    if len(raw) != header_len + 8 * d:
        raise TruncatedPayloadError(f"{path}: payload is {len(raw)} bytes")
    return np.frombuffer(raw, dtype="<f8", count=d, offset=header_len).copy()


def partition_iid(ds: Dataset, clients: int, seed: int) -> Partition:
    """Random split into shards whose sizes differ by at most one."""
    if clients < 1:
        raise ValueError("need at least one client")
    if clients > len(ds):
        raise ValueError(f"cannot split {len(ds)} examples over {clients} clients")
    rng = philox(seed)
    order = rng.permutation(len(ds))
    return Partition(tuple(order[i::clients] for i in range(clients)))


def partition_dirichlet(ds: Dataset, clients: int, alpha: float, seed: int) -> Partition:
    """Per-class Dirichlet split of examples across clients.

    For each class, client proportions are drawn Dir(alpha * 1_M) and
    that class's shuffled examples are assigned by those proportions;
    rounding remainders go to the largest fractional parts.  A repair
    pass moves one example from the largest shard to any empty client.
    """
    if clients < 1:
        raise ValueError("need at least one client")
    if alpha <= 0:
        raise ValueError(f"Dirichlet alpha must be > 0, got {alpha}")
    present = np.unique(ds.labels)
    if len(present) != ds.num_classes:
        raise ValueError("every class must be present in the dataset")
    if clients > len(ds):
        raise ValueError(f"cannot split {len(ds)} examples over {clients} clients")

    rng = philox(seed)
    shards: list[list[int]] = [[] for _ in range(clients)]
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        rng.shuffle(idx)
        proportions = rng.dirichlet(np.full(clients, alpha))
        exact = proportions * len(idx)
        counts = np.floor(exact).astype(np.int64)
        remainder = len(idx) - int(counts.sum())
        if remainder:
            frac_order = np.argsort(-(exact - counts), kind="stable")
            counts[frac_order[:remainder]] += 1
        pos = 0
        for client, count in enumerate(counts):
            shards[client].extend(int(i) for i in idx[pos : pos + count])
            pos += count

    # Empty-shard repair: steal one example from the largest shard.
    for client in range(clients):
        while not shards[client]:
            donor = max(range(clients), key=lambda j: len(shards[j]))
            if donor == client or len(shards[donor]) <= 1:
                raise ValueError("cannot repair empty shards: not enough examples")
            shards[client].append(shards[donor].pop())
    return Partition(tuple(np.array(s, dtype=np.int64) for s in shards))


def partition_manifest(partition: Partition) -> dict[str, list[int]]:
    """JSON-ready audit view: client id -> sorted example indices."""
    return {str(i): [int(x) for x in shard] for i, shard in enumerate(partition.shards)}
