"""Fisher-information task embeddings of client datasets.

Pipeline per client: cache features through the frozen extractor, fit a
linear head on them, estimate the diagonal Fisher of the extractor weights
by Monte Carlo with labels sampled from the model, then average the Fisher
mass of each conv filter into one scalar.
"""

from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .datasets import ClientShard, Dataset
from .errors import DomainError, StateError, StructuralError
from .numcore import Rng
from .probe import (
    ProbeSpec,
    ProbeState,
    backward,
    extract,
    extractor_fingerprint,
    fit_linear_head,
    forward,
    init_probe,
    softmax,
    train_minibatch,
)


@dataclass
class EmbedConfig:
    max_samples: int = 1000
    head_epochs: int = 10
    head_lr: float = 0.001
    fisher_passes: int = 4
    skip_filters: int = 0
    seed: int = 0
    chunk: int = 128

    def __post_init__(self):
        if self.max_samples < 1:
            raise DomainError(f"max_samples must be >= 1, got {self.max_samples}")
        if self.fisher_passes < 1:
            raise DomainError(f"fisher_passes must be >= 1, got {self.fisher_passes}")
        if self.head_epochs < 1:
            raise DomainError(f"head_epochs must be >= 1, got {self.head_epochs}")
        if self.skip_filters < 0:
            raise DomainError("skip_filters must be >= 0")


@dataclass
class FisherDiagonal:
    """Diagonal Fisher of the conv parameters, layout ``[w0, b0, w1, b1, ...]``."""

    values: list[np.ndarray]
    sample_count: int


@dataclass
class TaskEmbedding:
    values: np.ndarray
    client_id: int = 0
    fingerprint: str = ""
    skip_filters: int = 0

    def __len__(self) -> int:
        return len(self.values)


def select_samples(n: int, max_samples: int, rng: Rng) -> np.ndarray:
    """All indices when ``n <= max_samples``, else a uniform subset kept in original order."""
    if n <= max_samples:
        return np.arange(n)
    return np.sort(rng.choice_without_replacement(n, max_samples))


def extract_features(
    extractor: ProbeState, spec: ProbeSpec, shard: ClientShard, max_samples: int, rng: Rng, chunk: int = 256
) -> np.ndarray:
    if shard.n_c == 0:
        raise DomainError(f"client {shard.client_id} has an empty shard")
    idx = select_samples(shard.n_c, max_samples, rng)
    images = shard.images[idx]
    parts = [extract(extractor, spec, images[s:s + chunk]) for s in range(0, len(images), chunk)]
    return np.concatenate(parts)


def sample_labels(probs: np.ndarray, rng: Rng) -> np.ndarray:
    """One categorical draw per row by inverse CDF."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(len(probs))
    y = (u[:, None] >= cdf).sum(axis=1)
    return np.minimum(y, probs.shape[1] - 1)


def squared_score_sum(
    logits: np.ndarray,
    per_sample_grad: Callable[[np.ndarray], Sequence[np.ndarray]],
    passes: int,
    rng: Rng,
) -> list[np.ndarray]:
    """Sum over rows and passes of squared per-sample gradients of ``-log p(y_hat | x)``.

    ``y_hat`` is drawn from the model's own softmax, so the expectation of
    each squared score is the diagonal Fisher. ``per_sample_grad`` maps the
    per-row logit gradients ``p - onehot(y_hat)`` to per-row parameter
    gradients, each with a leading row axis.
    """
    probs = softmax(logits)
    rows = np.arange(len(probs))
    acc: list[np.ndarray] | None = None
    for _ in range(passes):
        y = sample_labels(probs, rng)
        d = probs.copy()
        d[rows, y] -= 1.0
        grads = per_sample_grad(d)
        sq = [np.einsum("n...,n...->...", g, g) for g in grads]
        acc = sq if acc is None else [a + s for a, s in zip(acc, sq)]
    return acc


def fisher_diagonal_mc(
    probe: ProbeState, spec: ProbeSpec, shard: ClientShard, config: EmbedConfig, rng: Rng
) -> FisherDiagonal:
    """Monte-Carlo diagonal Fisher of the extractor weights (head gradients dropped)."""
    if not probe.head_fitted:
        raise StateError("classifier head has not been fitted on this probe")
    if shard.n_c == 0:
        raise DomainError(f"client {shard.client_id} has an empty shard")
    idx = select_samples(shard.n_c, config.max_samples, rng)
    images = shard.images[idx]
    n_conv = 2 * len(spec.conv_layers)
    total = [np.zeros(s) for s in spec.param_shapes()[:n_conv]]
    for start in range(0, len(images), config.chunk):
        logits, cache = forward(probe, spec, images[start:start + config.chunk])

        def grad_fn(d, cache=cache):
            return backward(probe, spec, cache, d, per_sample=True, head=False)[:n_conv]

        part = squared_score_sum(logits, grad_fn, config.fisher_passes, rng)
        total = [t + p for t, p in zip(total, part)]
    draws = len(images) * config.fisher_passes
    return FisherDiagonal([t / draws for t in total], draws)


def aggregate_per_filter(
    fisher: FisherDiagonal, spec: ProbeSpec, skip_filters: int = 0, client_id: int = 0, fingerprint: str = ""
) -> TaskEmbedding:
    """Mean Fisher over each filter's weights and bias, layer by layer."""
    m = spec.total_filters
    if skip_filters < 0 or skip_filters >= m:
        raise DomainError(f"skip_filters must be in [0, {m}), got {skip_filters}")
    shapes = spec.param_shapes()[: 2 * len(spec.conv_layers)]
    if len(fisher.values) != len(shapes) or any(v.shape != s for v, s in zip(fisher.values, shapes)):
        raise StructuralError("Fisher diagonal does not match the probe's conv layers")
    scalars = []
    for layer in range(len(spec.conv_layers)):
        w = fisher.values[2 * layer]
        b = fisher.values[2 * layer + 1]
        per_filter = w.reshape(len(w), -1)
        sums = per_filter.sum(axis=1) + b
        scalars.append(sums / (per_filter.shape[1] + 1))
    values = np.concatenate(scalars)[skip_filters:]
    return TaskEmbedding(values, client_id, fingerprint, skip_filters)


def _sample_key(image: np.ndarray, label: int) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    h.update(np.ascontiguousarray(image, dtype="<f8").tobytes())
    h.update(struct.pack("<q", int(label)))
    return h.digest()


def canonical_order(shard: ClientShard) -> ClientShard:
    """Shard with samples sorted by a content hash, so input order cannot matter."""
    keys = [_sample_key(shard.images[i], shard.labels[i]) for i in range(shard.n_c)]
    order = np.array(sorted(range(shard.n_c), key=keys.__getitem__), dtype=np.int64)
    indices = shard.indices[order] if len(shard.indices) == shard.n_c else order
    return ClientShard(shard.client_id, shard.images[order], shard.labels[order], indices)


def task2vec_embed(extractor: ProbeState, spec: ProbeSpec, shard: ClientShard, config: EmbedConfig) -> TaskEmbedding:
    if shard.n_c == 0:
        raise DomainError(f"client {shard.client_id} has an empty shard")
    rng = Rng(config.seed, ("task2vec",))
    shard = canonical_order(shard)
    idx = select_samples(shard.n_c, config.max_samples, rng.derive("select"))
    sub = ClientShard(shard.client_id, shard.images[idx], shard.labels[idx], shard.indices[idx])
    feats = extract_features(extractor, spec, sub, config.max_samples, rng.derive("features"))
    w, b = fit_linear_head(feats, sub.labels, spec.head_classes, config.head_epochs, config.head_lr, rng.derive("head"))
    probe = extractor.with_head(w, b, fitted=True)
    fisher = fisher_diagonal_mc(probe, spec, sub, config, rng.derive("fisher"))
    return aggregate_per_filter(
        fisher, spec, config.skip_filters, shard.client_id, extractor_fingerprint(extractor, spec)
    )


def pretrain_extractor(
    spec: ProbeSpec,
    data: Dataset,
    steps: int,
    rng: Rng,
    lr: float = 0.01,
    momentum: float = 0.9,
    batch_size: int = 32,
) -> ProbeState:
    """Train a fresh probe on a pretext split; only its conv stack is kept downstream.

    ``steps=0`` returns the randomly initialized probe.
    """
    if steps < 0:
        raise DomainError("steps must be >= 0")
    state = init_probe(spec, rng.derive("init"))
    order_rng = rng.derive("batches")
    order = order_rng.permutation(len(data))
    pos = 0
    for _ in range(steps):
        if pos + batch_size > len(order):
            order = order_rng.permutation(len(data))
            pos = 0
        idx = order[pos:pos + batch_size]
        pos += batch_size
        state, _ = train_minibatch(state, spec, data.images[idx], data.labels[idx], lr, momentum)
    return state.reset_momentum()


def write_embeddings_csv(embeddings: Iterable[TaskEmbedding], path_or_stream) -> None:
    """One row per client: ``client_id, f0, f1, ...``; accepts a path or an open text stream."""
    embeddings = list(embeddings)
    width = max((len(e) for e in embeddings), default=0)

    def dump(fh):
        w = csv.writer(fh)
        w.writerow(["client_id"] + [f"f{i}" for i in range(width)])
        for e in embeddings:
            w.writerow([e.client_id] + [repr(float(v)) for v in e.values])

    if hasattr(path_or_stream, "write"):
        dump(path_or_stream)
    else:
        with open(path_or_stream, "w", newline="") as fh:
            dump(fh)


def read_embeddings_csv(path, fingerprint: str = "") -> list[TaskEmbedding]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["client_id"]:
        raise StructuralError(f"{path}: missing 'client_id' header")
    return [TaskEmbedding(np.array([float(v) for v in r[1:]]), int(r[0]), fingerprint) for r in rows[1:]]


def embedding_to_bytes(emb: TaskEmbedding) -> bytes:
    """Header (client_id, length) as little-endian int32, then float64 values."""
    return struct.pack("<2i", emb.client_id, len(emb.values)) + np.asarray(emb.values, dtype="<f8").tobytes()


def embedding_from_bytes(data: bytes, fingerprint: str = "") -> TaskEmbedding:
    if len(data) < 8:
        raise StructuralError("embedding record truncated in header")
    client_id, n = struct.unpack_from("<2i", data, 0)
    if len(data) != 8 + 8 * n:
        raise StructuralError(f"embedding record length {len(data)} does not fit {n} values")
    return TaskEmbedding(np.frombuffer(data, dtype="<f8", offset=8).astype(np.float64), client_id, fingerprint)
