"""Synthetic classification data, IDX file loading, client partitioning, triggers.

Everything here is a pure function of its inputs and a seed: the same call
always produces the same bytes, which is what makes whole experiments
replayable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class LabeledDataset:
    """Feature matrix (n_samples x dim) with integer class labels in [0, n_classes)."""

    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if len(self.labels) != len(self.features):
            raise ValueError("features/labels length mismatch")
        if len(self.features) < 1:
            raise ValueError("dataset must contain at least one sample")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain NaN or Inf")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("labels outside [0, n_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class ClientShards:
    """Per-client datasets partitioning one source dataset.

    ``weight(i)`` is the exact rational share |D_i| / |D'| over the given
    active client set, so FedAvg weights sum to 1 with no rounding error.
    """

    shards: list[LabeledDataset]

    def __len__(self) -> int:
        return len(self.shards)

    def total_samples(self, active: list[int] | None = None) -> int:
        ids = range(len(self.shards)) if active is None else active
        return sum(len(self.shards[i]) for i in ids)

    def weights(self, active: list[int] | None = None) -> list[Fraction]:
        ids = list(range(len(self.shards))) if active is None else list(active)
        total = self.total_samples(ids)
        return [Fraction(len(self.shards[i]), total) for i in ids]


@dataclass(frozen=True)
class TriggerSpec:
    """Backdoor trigger: fix some feature coordinates, relabel to a target class."""

    coordinates: tuple[int, ...]
    value: float
    target_label: int
    poison_fraction: float

    def __post_init__(self) -> None:
        if not 0.0 < self.poison_fraction <= 1.0:
            raise ValueError("poison_fraction must be in (0, 1]")
        if self.target_label < 0:
            raise ValueError("target_label must be a class id")


def generate_synthetic(classes: int, dim: int, samples_per_class: int, spread: float,
                       seed: int) -> LabeledDataset:
    """Gaussian blobs: one deterministic mean per class, isotropic noise."""
    if classes < 2:
        raise ValueError("need at least two classes")
    if samples_per_class < 1 or dim < 1:
        raise ValueError("nonpositive size")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0xDA7A,)))
    means = rng.normal(0.0, 1.0, size=(classes, dim))
    features = np.empty((classes * samples_per_class, dim))
    labels = np.empty(classes * samples_per_class, dtype=np.int64)
    for c in range(classes):
        lo = c * samples_per_class
        block = means[c] + spread * rng.normal(size=(samples_per_class, dim))
        features[lo:lo + samples_per_class] = block
        labels[lo:lo + samples_per_class] = c
    return LabeledDataset(features, labels, classes)


def _read_idx_header(raw: bytes, path: str, expected_magic: int) -> tuple[int, list[int]]:
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise ValueError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndims = magic & 0xFF
    if len(raw) < 4 + 4 * ndims:
        raise ValueError(f"{path}: truncated IDX dimension block")
    dims = list(struct.unpack(f">{ndims}I", raw[4:4 + 4 * ndims]))
    return 4 + 4 * ndims, dims


def load_idx(images_path: str, labels_path: str, n_classes: int = 10) -> LabeledDataset:
    """Parse big-endian IDX image/label files into a flat dataset scaled to [0, 1]."""
    with open(images_path, "rb") as f:
        img_raw = f.read()
    with open(labels_path, "rb") as f:
        lab_raw = f.read()

    img_off, img_dims = _read_idx_header(img_raw, images_path, IDX_IMAGES_MAGIC)
    lab_off, lab_dims = _read_idx_header(lab_raw, labels_path, IDX_LABELS_MAGIC)

    n_images, rows, cols = img_dims
    n_labels = lab_dims[0]
    if n_images != n_labels:
        raise ValueError(f"count mismatch: {n_images} images vs {n_labels} labels")

    expected = n_images * rows * cols
    pixels = np.frombuffer(img_raw, dtype=np.uint8, offset=img_off)
    if pixels.size < expected:
        raise ValueError(f"{images_path}: truncated payload "
                         f"({pixels.size} bytes, need {expected})")
    labels = np.frombuffer(lab_raw, dtype=np.uint8, offset=lab_off)
    if labels.size < n_labels:
        raise ValueError(f"{labels_path}: truncated payload")

    features = pixels[:expected].reshape(n_images, rows * cols).astype(np.float64) / 255.0
    return LabeledDataset(features, labels[:n_labels].astype(np.int64), n_classes)


def partition_noniid(data: LabeledDataset, n_clients: int, degree_q: float,
                     seed: int) -> ClientShards:
    """Label-skewed grouping partition.

    Clients are split into one group per class (last group padded with the
    remainder).  A sample with label l goes to a uniformly random client of
    group l with probability q, otherwise to a uniformly random client of one
    of the other groups.  q = 1/C is uniform, q = 1 fully skewed.
    """
    c = data.n_classes
    if not (1.0 / c - 1e-12) <= degree_q <= 1.0 + 1e-12:
        raise ValueError(f"degree_q must lie in [1/{c}, 1]")
    if n_clients < c:
        raise ValueError("need at least one client per class group")

    base = n_clients // c
    groups = [list(range(g * base, (g + 1) * base)) for g in range(c)]
    groups[-1].extend(range(c * base, n_clients))  # pad last group

    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0x9A12,)))
    assignment = np.empty(len(data), dtype=np.int64)
    for idx, label in enumerate(data.labels):
        if rng.random() < degree_q:
            g = int(label)
        else:
            others = rng.integers(0, c - 1)
            g = int(others if others < label else others + 1)
        members = groups[g]
        assignment[idx] = members[rng.integers(0, len(members))]

    shards = []
    for i in range(n_clients):
        take = np.flatnonzero(assignment == i)
        if take.size == 0:
            # Empty shard: move one sample from the largest shard so every
            # client trains on something (tiny n only; keeps weights valid).
            counts = np.bincount(assignment, minlength=n_clients)
            donor = int(np.argmax(counts))
            moved = np.flatnonzero(assignment == donor)[0]
            assignment[moved] = i
            take = np.array([moved])
        shards.append(LabeledDataset(data.features[take], data.labels[take], c))
    return ClientShards(shards)


def inject_trigger(data: LabeledDataset, spec: TriggerSpec, seed: int) -> LabeledDataset:
    """Poison a deterministic fraction of rows: stamp the trigger, relabel.

    Row selection is the prefix of a seeded shuffle, so exactly
    floor(fraction * n) rows change.
    """
    if any(j < 0 or j >= data.dim for j in spec.coordinates):
        raise ValueError("trigger coordinate outside feature range")
    if spec.target_label >= data.n_classes:
        raise ValueError("target_label outside class range")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0xB4D,)))
    n_poison = int(np.floor(spec.poison_fraction * len(data)))
    chosen = rng.permutation(len(data))[:n_poison]
    features = data.features.copy()
    labels = data.labels.copy()
    if spec.coordinates:
        features[np.ix_(chosen, list(spec.coordinates))] = spec.value
    labels[chosen] = spec.target_label
    return LabeledDataset(features, labels, data.n_classes)


def trigger_eval_set(test_data: LabeledDataset, spec: TriggerSpec) -> LabeledDataset:
    """Attack-success evaluation set: every non-target test sample, triggered.

    Samples whose true label already equals the target are excluded so the
    success rate counts only genuinely flipped predictions.
    """
    keep = np.flatnonzero(test_data.labels != spec.target_label)
    if keep.size == 0:
        raise ValueError("test set has no non-target samples")
    subset = LabeledDataset(test_data.features[keep], test_data.labels[keep],
                            test_data.n_classes)
    full = TriggerSpec(spec.coordinates, spec.value, spec.target_label, 1.0)
    return inject_trigger(subset, full, seed=0)
