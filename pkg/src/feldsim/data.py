"""Dataset provisioning: synthetic generators, IDX ingestion, partitioning.

Features are always normalized to [0, 1]. Partitioning carves a clean
held-out test split first (the aggregator's detection set), then shards
the remainder across nodes either IID or with Dirichlet label skew.

The IDX reader/writer follow the classic big-endian layout: images carry
magic 0x00000803 followed by count/rows/cols and unsigned pixel bytes,
labels carry magic 0x00000801 followed by count and label bytes.

Because this package trains at desk scale, a deterministic 28x28 ten-class
glyph generator is provided as a stand-in corpus for image experiments; it
is written through the same IDX files a real corpus would use.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .learner import Dataset
from .streams import stream

__all__ = [
    "DataSpec",
    "gen_synthetic",
    "load_idx",
    "write_idx",
    "partition",
    "save_cache",
    "load_cache",
    "gen_glyph_images",
    "write_glyph_idx_fixture",
]

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

CACHE_MAGIC = b"FELD"
CACHE_VERSION = 1

SOURCES = ("synthetic_blobs", "synthetic_logistic", "idx_files")
PARTITIONS = ("iid", "label_skew")


@dataclass(frozen=True)
class DataSpec:
    """What data to provision and how to split it across nodes."""

    source: str = "synthetic_blobs"
    num_classes: int = 2
    dim: int = 2
    total_size: int = 400
    per_node_size: int = 0  # informational; checked against availability for idx
    partition: str = "iid"
    skew_gamma: float = 0.5
    separation: float = 4.0  # blob mean spacing in units of within-class std
    seed: int = 0
    images_path: Optional[str] = None
    labels_path: Optional[str] = None

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown data source {self.source!r}")
        if self.partition not in PARTITIONS:
            raise ValueError(f"unknown partition scheme {self.partition!r}")
        if self.num_classes < 2 or self.dim < 1 or self.total_size < 1:
            raise ValueError("num_classes >= 2, dim >= 1, total_size >= 1 required")


def _minmax_unit(features: np.ndarray) -> np.ndarray:
    lo = features.min(axis=0)
    hi = features.max(axis=0)
    span = hi - lo
    flat = span == 0
    span[flat] = 1.0
    scaled = (features - lo) / span
    scaled[:, flat] = 0.5
    return scaled


def gen_synthetic(spec: DataSpec, seed: int) -> Dataset:
    """Seeded synthetic classification data with features in [0, 1].

    blobs: class-conditional unit Gaussians around means `separation`
    apart (symmetric +/- for two classes), min-max rescaled per feature.
    logistic: uniform inputs labeled by a seeded ground-truth linear
    softmax model, so the convex learner can fit them.
    """
    rng = stream(seed, "dataset", spec.seed)
    n, d, c = spec.total_size, spec.dim, spec.num_classes
    if spec.source == "synthetic_blobs":
        labels = rng.integers(0, c, size=n)
        if c == 2:
            direction = rng.normal(size=d)
            direction /= np.linalg.norm(direction)
            means = np.stack([direction * spec.separation / 2, -direction * spec.separation / 2])
        else:
            means = rng.normal(size=(c, d))
            means /= np.linalg.norm(means, axis=1, keepdims=True)
            means *= spec.separation / 2
        features = means[labels] + rng.normal(size=(n, d))
        return Dataset(_minmax_unit(features), labels)
    if spec.source == "synthetic_logistic":
        weights = rng.normal(0.0, 6.0 / np.sqrt(d), size=(c, d))
        features = rng.uniform(0.0, 1.0, size=(n, d))
        scores = features @ weights.T
        scores -= scores.max(axis=1, keepdims=True)
        probs = np.exp(scores)
        probs /= probs.sum(axis=1, keepdims=True)
        cumulative = probs.cumsum(axis=1)
        draws = rng.uniform(size=(n, 1))
        labels = (draws > cumulative).sum(axis=1)
        return Dataset(features, labels)
    if spec.images_path is None or spec.labels_path is None:
        raise ValueError("idx_files source needs images_path and labels_path")
    return load_idx(spec.images_path, spec.labels_path)


def load_idx(images_path: str | Path, labels_path: str | Path) -> Dataset:
    """Parse paired IDX image/label files into a dataset with unit features."""
    raw_images = Path(images_path).read_bytes()
    raw_labels = Path(labels_path).read_bytes()
    if len(raw_images) < 16:
        raise ValueError(f"{images_path}: truncated IDX image header")
    magic, count, rows, cols = struct.unpack(">IIII", raw_images[:16])
    if magic != IMAGES_MAGIC:
        raise ValueError(f"{images_path}: expected image magic {IMAGES_MAGIC:#010x}, got {magic:#010x}")
    expected = 16 + count * rows * cols
    if len(raw_images) < expected:
        raise ValueError(f"{images_path}: file holds {len(raw_images)} bytes, header implies {expected}")
    if len(raw_labels) < 8:
        raise ValueError(f"{labels_path}: truncated IDX label header")
    label_magic, label_count = struct.unpack(">II", raw_labels[:8])
    if label_magic != LABELS_MAGIC:
        raise ValueError(f"{labels_path}: expected label magic {LABELS_MAGIC:#010x}, got {label_magic:#010x}")
    if label_count != count:
        raise ValueError(f"image count {count} does not match label count {label_count}")
    if len(raw_labels) < 8 + count:
        raise ValueError(f"{labels_path}: file holds {len(raw_labels)} bytes, header implies {8 + count}")
    pixels = np.frombuffer(raw_images, dtype=np.uint8, count=count * rows * cols, offset=16)
    features = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    labels = np.frombuffer(raw_labels, dtype=np.uint8, count=count, offset=8).astype(np.int64)
    return Dataset(features, labels)


def write_idx(dataset: Dataset, images_path: str | Path, labels_path: str | Path, rows: int, cols: int) -> None:
    """Serialize a dataset as an IDX image/label pair (pixels quantized to bytes)."""
    if rows * cols != dataset.dim:
        raise ValueError(f"rows*cols = {rows * cols} does not match feature dim {dataset.dim}")
    pixels = np.clip(np.rint(dataset.features * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGES_MAGIC, dataset.size, rows, cols))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABELS_MAGIC, dataset.size))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


def partition(
    data: Dataset,
    num_nodes: int,
    scheme: str,
    seed: int,
    test_fraction: float = 0.2,
    skew_gamma: float = 0.5,
) -> tuple[list[Dataset], Dataset]:
    """Split into a held-out test set plus one disjoint shard per node.

    The test split is carved first from a seeded shuffle. IID sharding
    gives contiguous equal shards (sizes differing by at most one);
    label_skew draws each node's class proportions from Dirichlet(gamma).
    """
    if num_nodes < 1:
        raise ValueError("num_nodes must be >= 1")
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    rng = stream(seed, "partition")
    order = rng.permutation(data.size)
    n_test = max(1, int(round(test_fraction * data.size)))
    if data.size - n_test < num_nodes:
        raise ValueError(
            f"{data.size} examples cannot supply a test split plus {num_nodes} nonempty shards"
        )
    test = data.subset(order[:n_test])
    pool = order[n_test:]
    if scheme == "iid":
        shard_indices = [np.sort(part) for part in np.array_split(pool, num_nodes)]
    elif scheme == "label_skew":
        shard_lists: list[list[np.ndarray]] = [[] for _ in range(num_nodes)]
        pool_labels = data.labels[pool]
        for cls in np.unique(pool_labels):
            members = pool[pool_labels == cls]
            members = members[rng.permutation(members.size)]
            weights = rng.dirichlet(np.full(num_nodes, skew_gamma))
            cuts = np.floor(np.cumsum(weights) * members.size).astype(int)[:-1]
            for k, part in enumerate(np.split(members, cuts)):
                shard_lists[k].append(part)
        shard_indices = [
            np.sort(np.concatenate(parts)) if parts else np.array([], dtype=int)
            for parts in shard_lists
        ]
        # a heavily skewed draw can starve a node; hand it one example
        # from the largest shard so every shard stays nonempty
        for k, idx in enumerate(shard_indices):
            if idx.size == 0:
                donor = max(range(num_nodes), key=lambda j: shard_indices[j].size)
                shard_indices[k] = shard_indices[donor][-1:]
                shard_indices[donor] = shard_indices[donor][:-1]
    else:
        raise ValueError(f"unknown partition scheme {scheme!r}")
    shards = [data.subset(idx) for idx in shard_indices]
    return shards, test


def save_cache(dataset: Dataset, path: str | Path) -> None:
    """Write the length-prefixed binary cache: magic, version, counts, payload.

    Layout: b"FELD", one version byte, uint32 LE example count, uint32 LE
    feature dim, then row-major little-endian float32 features followed by
    uint16 LE labels. Float64 features are quantized to float32.
    """
    features = dataset.features.astype("<f4")
    labels = dataset.labels.astype("<u2")
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(bytes([CACHE_VERSION]))
        fh.write(struct.pack("<II", dataset.size, dataset.dim))
        fh.write(features.tobytes())
        fh.write(labels.tobytes())


def load_cache(path: str | Path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != CACHE_MAGIC:
        raise ValueError(f"{path}: bad cache magic {raw[:4]!r}")
    if raw[4] != CACHE_VERSION:
        raise ValueError(f"{path}: unsupported cache version {raw[4]}")
    count, dim = struct.unpack("<II", raw[5:13])
    feat_bytes = count * dim * 4
    expected = 13 + feat_bytes + count * 2
    if len(raw) < expected:
        raise ValueError(f"{path}: cache holds {len(raw)} bytes, header implies {expected}")
    features = np.frombuffer(raw, dtype="<f4", count=count * dim, offset=13).reshape(count, dim)
    labels = np.frombuffer(raw, dtype="<u2", count=count, offset=13 + feat_bytes)
    return Dataset(features.astype(np.float64), labels.astype(np.int64))


def gen_glyph_images(n: int, seed: int, num_classes: int = 10, side: int = 28) -> Dataset:
    """Deterministic glyph-style grayscale images, one smooth template per class.

    Each class template is a low-frequency random pattern; examples jitter
    it with small translations and pixel noise, then clip to [0, 1]. The
    result behaves like a small handwritten-digit corpus at the same
    dimensions and is fully reproducible from the seed.
    """
    if side % 4 != 0:
        raise ValueError("side must be divisible by 4")
    rng = stream(seed, "glyphs")
    coarse = rng.uniform(0.0, 1.0, size=(num_classes, side // 4, side // 4))
    templates = np.kron(coarse, np.ones((4, 4)))  # upsample to full resolution
    labels = rng.integers(0, num_classes, size=n)
    images = np.empty((n, side, side))
    shifts = rng.integers(-3, 4, size=(n, 2))
    contrast = rng.uniform(0.6, 1.0, size=n)
    noise = rng.normal(0.0, 0.35, size=(n, side, side))
    for i in range(n):
        img = templates[labels[i]]
        img = np.roll(img, (shifts[i, 0], shifts[i, 1]), axis=(0, 1))
        images[i] = contrast[i] * img + noise[i]
    features = np.clip(images, 0.0, 1.0).reshape(n, side * side)
    return Dataset(features, labels)


def write_glyph_idx_fixture(out_dir: str | Path, n_train: int, n_test: int, seed: int) -> dict[str, Path]:
    """Materialize the glyph corpus as train/test IDX file pairs.

    Returns the four paths keyed by train_images / train_labels /
    test_images / test_labels. Existing files are reused verbatim, so
    repeated runs see identical bytes.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "train_images": out / "train-images-idx3-ubyte",
        "train_labels": out / "train-labels-idx1-ubyte",
        "test_images": out / "test-images-idx3-ubyte",
        "test_labels": out / "test-labels-idx1-ubyte",
    }
    if not all(p.exists() for p in paths.values()):
        full = gen_glyph_images(n_train + n_test, seed)
        train = full.subset(np.arange(n_train))
        test = full.subset(np.arange(n_train, n_train + n_test))
        write_idx(train, paths["train_images"], paths["train_labels"], 28, 28)
        write_idx(test, paths["test_images"], paths["test_labels"], 28, 28)
    return paths
