"""Datasets, IDX ingestion and Dirichlet non-IID client partitioning."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DomainError, IdxParseError, StructuralError
from .numcore import Rng, dirichlet_sample

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Normalized images ``(N, C, S, S)`` with integer labels.

    ``mean``/``std`` are the per-channel statistics that were subtracted and
    divided out of the raw pixels.
    """

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise StructuralError(f"images must be (N, C, S, S), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise StructuralError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise StructuralError("label out of range for class_count")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    @property
    def side(self) -> int:
        return self.images.shape[2]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.class_count, self.mean, self.std)


@dataclass
class ClientShard:
    client_id: int
    images: np.ndarray
    labels: np.ndarray
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n_c(self) -> int:
        return len(self.labels)

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class FederationSnapshot:
    shards: list[ClientShard]
    test_set: Dataset | None
    alpha: float | str
    class_count: int

    @property
    def K(self) -> int:
        return len(self.shards)

    @property
    def N(self) -> int:
        return sum(s.n_c for s in self.shards)


@dataclass
class LabelHistogram:
    classes: np.ndarray
    proportions: np.ndarray


def normalize_channels(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-channel standardization; constant channels keep std = 1."""
    mean = raw.mean(axis=(0, 2, 3))
    std = raw.std(axis=(0, 2, 3))
    std = np.where(std > 1e-12, std, 1.0)
    out = (raw - mean[None, :, None, None]) / std[None, :, None, None]
    return out, mean, std


def blob_templates(class_count: int, channels: int, side: int, seed: int) -> np.ndarray:
    """One smooth random template image per class, shape (classes, C, S, S)."""
    rng = Rng(seed, ("blob-templates",))
    coarse = max(2, side // 4)
    low = rng.normal((class_count, channels, coarse, coarse))
    reps = -(-side // coarse)
    up = np.kron(low, np.ones((reps, reps)))[:, :, :side, :side]
    return up + 0.25 * rng.normal((class_count, channels, side, side))


def make_blobs(
    class_count: int,
    channels: int = 3,
    side: int = 16,
    per_class: int = 200,
    spread: float = 1.0,
    seed: int = 0,
    template_seed: int | None = None,
) -> Dataset:
    """Gaussian blobs around class templates, balanced labels, shuffled order.

    ``template_seed`` (default ``seed``) fixes the class templates so that
    disjoint draws of the same task can be produced with different seeds.
    """
    if class_count < 2:
        raise DomainError(f"class_count must be >= 2, got {class_count}")
    if side < 8:
        raise DomainError(f"side must be >= 8, got {side}")
    if channels < 1 or per_class < 1:
        raise DomainError("channels and per_class must be >= 1")
    if spread < 0:
        raise DomainError(f"spread must be >= 0, got {spread}")
    templates = blob_templates(class_count, channels, side, seed if template_seed is None else template_seed)
    rng = Rng(seed, ("blob-samples",))
    labels = np.repeat(np.arange(class_count), per_class)
    raw = templates[labels] + spread * rng.normal((len(labels), channels, side, side))
    order = rng.permutation(len(labels))
    images, mean, std = normalize_channels(raw[order])
    return Dataset(images, labels[order], class_count, mean, std)


def train_test_split(data: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified split; the test part is never handed to clients."""
    if not 0.0 < test_fraction < 1.0:
        raise DomainError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = Rng(seed, ("train-test-split",))
    train_idx, test_idx = [], []
    for c in range(data.class_count):
        idx = np.flatnonzero(data.labels == c)
        if len(idx) == 0:
            continue
        idx = idx[rng.permutation(len(idx))]
        n_test = int(round(test_fraction * len(idx)))
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    train = np.sort(np.concatenate(train_idx))
    test = np.sort(np.concatenate(test_idx))
    return data.subset(train), data.subset(test)


def _read_u32(buf: bytes, offset: int, path: str) -> int:
    if len(buf) < offset + 4:
        raise IdxParseError("file truncated inside header", offset, path)
    return struct.unpack_from(">I", buf, offset)[0]


def parse_idx_images(buf: bytes, path: str = "<bytes>") -> np.ndarray:
    """Raw uint8 pixels (count, rows, cols) from an IDX3 image file."""
    magic = _read_u32(buf, 0, path)
    if magic != IDX_IMAGES_MAGIC:
        raise IdxParseError(f"bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}", 0, path)
    count = _read_u32(buf, 4, path)
    rows = _read_u32(buf, 8, path)
    cols = _read_u32(buf, 12, path)
    need = 16 + count * rows * cols
    if len(buf) < need:
        raise IdxParseError(f"image data truncated: need {need} bytes, file has {len(buf)}", len(buf), path)
    if len(buf) > need:
        raise IdxParseError(f"{len(buf) - need} unexpected trailing bytes", need, path)
    return np.frombuffer(buf, dtype=np.uint8, count=count * rows * cols, offset=16).reshape(count, rows, cols)


def parse_idx_labels(buf: bytes, path: str = "<bytes>") -> np.ndarray:
    magic = _read_u32(buf, 0, path)
    if magic != IDX_LABELS_MAGIC:
        raise IdxParseError(f"bad label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}", 0, path)
    count = _read_u32(buf, 4, path)
    need = 8 + count
    if len(buf) < need:
        raise IdxParseError(f"label data truncated: need {need} bytes, file has {len(buf)}", len(buf), path)
    if len(buf) > need:
        raise IdxParseError(f"{len(buf) - need} unexpected trailing bytes", need, path)
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=8)


def load_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label pair; pixels scaled to [0, 1] then standardized."""
    images_path, labels_path = str(images_path), str(labels_path)
    pixels = parse_idx_images(Path(images_path).read_bytes(), images_path)
    labels = parse_idx_labels(Path(labels_path).read_bytes(), labels_path)
    if len(pixels) != len(labels):
        raise IdxParseError(
            f"label count {len(labels)} does not match image count {len(pixels)}", 4, labels_path
        )
    if pixels.shape[1] != pixels.shape[2]:
        raise IdxParseError(f"images must be square, got {pixels.shape[1]}x{pixels.shape[2]}", 8, images_path)
    raw = pixels[:, None, :, :].astype(np.float64) / 255.0
    images, mean, std = normalize_channels(raw)
    class_count = int(labels.max()) + 1 if len(labels) else 1
    return Dataset(images, labels.astype(np.int64), max(class_count, 2), mean, std)


def write_idx(data: Dataset, images_path, labels_path) -> None:
    """Inverse of ``load_idx`` for single-channel datasets."""
    if data.channels != 1:
        raise StructuralError("IDX image files hold a single channel")
    raw = data.images[:, 0] * data.std[0] + data.mean[0]
    pixels = np.clip(np.rint(raw * 255.0), 0, 255).astype(np.uint8)
    n, rows, cols = pixels.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + pixels.tobytes())
    Path(labels_path).write_bytes(
        struct.pack(">II", IDX_LABELS_MAGIC, n) + data.labels.astype(np.uint8).tobytes()
    )


def dirichlet_partition(
    pool: Dataset,
    K: int,
    alpha: float,
    min_per_client: int = 8,
    seed: int = 0,
    test_set: Dataset | None = None,
) -> FederationSnapshot:
    """Split ``pool`` over ``K`` clients, class by class, with Dirichlet(alpha) shares.

    For each class the shuffled samples are cut into contiguous slices whose
    sizes follow a multinomial draw on a Dirichlet(alpha, ..., alpha) share
    vector over clients. Clients left below ``min_per_client`` are topped up
    one sample at a time from the currently largest shard (lowest id wins
    ties, the shard's last sample moves).
    """
    if K < 2:
        raise DomainError(f"a federation needs K >= 2 clients, got {K}")
    if not alpha > 0:
        raise DomainError(f"alpha must be positive, got {alpha}")
    if min_per_client < 1:
        raise DomainError(f"min_per_client must be >= 1, got {min_per_client}")
    if len(pool) < K * min_per_client:
        raise DomainError(
            f"pool of {len(pool)} samples cannot give {K} clients {min_per_client} samples each"
        )
    rng = Rng(seed, ("dirichlet-partition",))
    parts: list[list[int]] = [[] for _ in range(K)]
    for c in range(pool.class_count):
        idx = np.flatnonzero(pool.labels == c)
        if len(idx) == 0:
            continue
        idx = idx[rng.permutation(len(idx))]
        share = dirichlet_sample([alpha] * K, rng)
        counts = rng.gen.multinomial(len(idx), share)
        start = 0
        for client, cnt in enumerate(counts):
            parts[client].extend(idx[start:start + cnt].tolist())
            start += cnt
    while True:
        sizes = [len(p) for p in parts]
        short = [i for i, s in enumerate(sizes) if s < min_per_client]
        if not short:
            break
        donor = max(range(K), key=lambda i: (sizes[i], -i))
        parts[short[0]].append(parts[donor].pop())
    shards = []
    for client, p in enumerate(parts):
        ix = np.asarray(p, dtype=np.int64)
        shards.append(ClientShard(client, pool.images[ix], pool.labels[ix], ix))
    return FederationSnapshot(shards, test_set, float(alpha), pool.class_count)


def label_histogram(shard: ClientShard | Sequence[int], class_count: int | None = None) -> LabelHistogram:
    """Class proportions over the classes the shard actually holds."""
    labels = np.asarray(shard.labels if isinstance(shard, ClientShard) else shard, dtype=np.int64)
    if len(labels) == 0:
        raise DomainError("label histogram of an empty shard")
    if class_count is not None and (labels.min() < 0 or labels.max() >= class_count):
        raise DomainError("label out of range for class_count")
    classes, counts = np.unique(labels, return_counts=True)
    return LabelHistogram(classes, counts / counts.sum())
