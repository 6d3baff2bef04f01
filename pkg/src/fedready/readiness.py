"""Readiness indices computed from the federation's embedding geometry."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .datasets import FederationSnapshot, LabelHistogram, label_histogram
from .embedding import TaskEmbedding
from .errors import ComparabilityError, DomainError, StructuralError


@dataclass(frozen=True)
class CdiWeights:
    beta: float = 1.0
    gamma: float = 1000.0

    def __post_init__(self):
        if not (self.beta > 0 and self.gamma > 0):
            raise DomainError(f"CDI weights must be positive, got beta={self.beta}, gamma={self.gamma}")


@dataclass
class ReadinessReport:
    cohesion: float
    neg_dispersion: float
    density: float
    cdi: float
    avg_entropy: float
    K: int
    sigma_used: float
    fingerprint: str
    beta: float = 1.0
    gamma: float = 1000.0

    def as_text(self) -> str:
        lines = [
            f"clients (K)        {self.K}",
            f"probe fingerprint  {self.fingerprint or '-'}",
            f"cohesion           {self.cohesion:.6f}",
            f"-dispersion        {self.neg_dispersion:.6g}",
            f"density            {self.density:.6f}   (sigma = {self.sigma_used:.6g})",
            f"CDI (b={self.beta:g}, g={self.gamma:g})  {self.cdi:.6f}",
            f"average entropy    {self.avg_entropy:.6f}",
        ]
        return "\n".join(lines)


def _matrix(embeddings, min_k: int = 1) -> np.ndarray:
    """Stack embeddings into (K, d), enforcing a single probe fingerprint."""
    prints = {e.fingerprint for e in embeddings if isinstance(e, TaskEmbedding)}
    if len(prints) > 1:
        raise ComparabilityError(f"embeddings come from different probes: {sorted(prints)}")
    rows = [np.asarray(e.values if isinstance(e, TaskEmbedding) else e, dtype=np.float64) for e in embeddings]
    if len(rows) < min_k:
        raise DomainError(f"need at least {min_k} embeddings, got {len(rows)}")
    if len({r.shape for r in rows}) > 1:
        raise StructuralError("embeddings have mixed lengths")
    V = np.stack(rows)
    if V.ndim != 2 or V.shape[1] == 0:
        raise StructuralError("embeddings must be non-empty 1-D vectors")
    if not np.all(np.isfinite(V)):
        raise DomainError("embeddings contain non-finite values")
    return V


def _client_label(embeddings, i: int) -> str:
    e = embeddings[i]
    return f"client {e.client_id}" if isinstance(e, TaskEmbedding) else f"embedding #{i}"


def cohesion(embeddings: Sequence) -> float:
    """Mean cosine similarity over ordered pairs i != j."""
    V = _matrix(embeddings, 2)
    norms = np.linalg.norm(V, axis=1)
    for i, nrm in enumerate(norms):
        if nrm == 0.0:
            raise DomainError(f"{_client_label(embeddings, i)} has a zero-norm embedding")
    U = V / norms[:, None]
    S = U @ U.T
    K = len(V)
    off = S.sum() - np.trace(S)
    return float(np.clip(off / (K * (K - 1)), -1.0, 1.0))


def dispersion(embeddings: Sequence) -> float:
    """Mean distance to the centroid, divided by sqrt(embedding length)."""
    V = _matrix(embeddings, 1)
    centroid = V.mean(axis=0)
    dist = np.linalg.norm(V - centroid, axis=1)
    return float(dist.mean() / math.sqrt(V.shape[1]))


def _pairwise_distances(V: np.ndarray) -> np.ndarray:
    diff = V[:, None, :] - V[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def median_bandwidth(embeddings: Sequence) -> float:
    """Lower median of the unordered pairwise Euclidean distances."""
    V = _matrix(embeddings, 2)
    D = _pairwise_distances(V)
    iu = np.triu_indices(len(V), k=1)
    d = np.sort(D[iu])
    return float(d[(len(d) - 1) // 2])


def density(embeddings: Sequence, return_sigma: bool = False):
    """Mean RBF similarity over ordered pairs with median-distance bandwidth.

    Coincident embeddings (sigma = 0) give 1.0, the limit of the kernel.
    """
    V = _matrix(embeddings, 2)
    sigma = median_bandwidth(V)
    K = len(V)
    if sigma == 0.0:
        val = 1.0
    else:
        D = _pairwise_distances(V)
        Kmat = np.exp(-(D * D) / (2.0 * sigma * sigma))
        val = float((Kmat.sum() - np.trace(Kmat)) / (K * (K - 1)))
    return (val, sigma) if return_sigma else val


def cdi(embeddings: Sequence, weights: CdiWeights = CdiWeights()) -> float:
    """``beta * cohesion - gamma * dispersion``."""
    return weights.beta * cohesion(embeddings) - weights.gamma * dispersion(embeddings)


def _entropy(h: LabelHistogram) -> float:
    p = np.asarray(h.proportions, dtype=np.float64)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def average_entropy(histograms: Sequence[LabelHistogram]) -> float:
    """Mean natural-log Shannon entropy of the clients' label distributions."""
    if len(histograms) == 0:
        raise DomainError("average entropy of an empty client list")
    return float(sum(_entropy(h) for h in histograms) / len(histograms))


def build_report(
    federation: FederationSnapshot, embeddings: Sequence[TaskEmbedding], weights: CdiWeights = CdiWeights()
) -> ReadinessReport:
    if len(embeddings) != federation.K:
        raise StructuralError(f"{len(embeddings)} embeddings for {federation.K} clients")
    V = _matrix(embeddings, 2)
    coh = cohesion(embeddings)
    neg_disp = -dispersion(embeddings)
    dens, sigma = density(V, return_sigma=True)
    hists = [label_histogram(s, federation.class_count) for s in federation.shards]
    prints = {e.fingerprint for e in embeddings}
    return ReadinessReport(
        cohesion=coh,
        neg_dispersion=neg_disp,
        density=dens,
        cdi=weights.beta * coh + weights.gamma * neg_disp,
        avg_entropy=average_entropy(hists),
        K=federation.K,
        sigma_used=sigma,
        fingerprint=prints.pop() if prints else "",
        beta=weights.beta,
        gamma=weights.gamma,
    )
