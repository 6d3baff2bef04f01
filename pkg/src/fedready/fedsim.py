"""FedAvg simulation: local SGD, sample-weighted aggregation, evaluation."""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .datasets import ClientShard, Dataset, FederationSnapshot
from .errors import DomainError, StructuralError
from .numcore import Rng
from .probe import ProbeSpec, ProbeState, init_probe, predict_logits, softmax, train_minibatch
from .stats import rank_average_ties

METRICS = ("top1", "macro_auc")


@dataclass
class FedAvgConfig:
    rounds: int = 20
    local_epochs: int = 1
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    fraction_fit: float = 1.0
    fraction_evaluate: float = 0.5
    final_metric: str = "top1"
    seed: int = 0

    def __post_init__(self):
        for name in ("rounds", "local_epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("fraction_fit", "fraction_evaluate"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise DomainError(f"{name} must be in (0, 1], got {v}")
        if self.lr < 0:
            raise DomainError(f"lr must be >= 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise DomainError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.final_metric not in METRICS:
            raise DomainError(f"final_metric must be one of {METRICS}, got {self.final_metric!r}")


@dataclass
class ClientUpdate:
    client_id: int
    params: list[np.ndarray]
    n_c: int
    train_loss: float = float("nan")


@dataclass
class RoundLog:
    round: int
    eval_metric: float
    fit_clients: list[int]
    eval_clients: list[int]


@dataclass
class TrainingResult:
    round_logs: list[RoundLog]
    final_metric_value: float
    initial_metric_value: float
    final_state: ProbeState
    config: dict = field(default_factory=dict)
    wall_time: float = 0.0


def local_train(
    global_state: ProbeState, spec: ProbeSpec, shard: ClientShard, config: FedAvgConfig, rng: Rng
) -> ClientUpdate:
    """E epochs of shuffled mini-batch SGD from the global weights, fresh momentum."""
    if shard.n_c == 0:
        raise DomainError(f"client {shard.client_id} has an empty shard")
    state = global_state.copy().reset_momentum()
    losses = []
    for _ in range(config.local_epochs):
        order = rng.permutation(shard.n_c)
        for start in range(0, shard.n_c, config.batch_size):
            idx = order[start:start + config.batch_size]
            state, loss = train_minibatch(state, spec, shard.images[idx], shard.labels[idx], config.lr, config.momentum)
            losses.append(loss)
    return ClientUpdate(shard.client_id, state.params, shard.n_c, float(np.mean(losses)))


def fedavg_aggregate(updates: Sequence[ClientUpdate]) -> list[np.ndarray]:
    """``w = sum_c (n_c / N) w_c``, coordinatewise.

    Client weights are reduced to coprime integers, the weighted sum is
    accumulated with exactly-rounded summation in client-id order, and the
    result divided once by their total. Equal ``n_c`` therefore give the
    correctly rounded arithmetic mean, independent of arrival order.
    """
    if not updates:
        raise DomainError("cannot aggregate an empty update list")
    updates = sorted(updates, key=lambda u: u.client_id)
    shapes = [p.shape for p in updates[0].params]
    for u in updates:
        if [p.shape for p in u.params] != shapes:
            raise StructuralError(f"client {u.client_id} update shapes do not match")
        if u.n_c < 1:
            raise DomainError(f"client {u.client_id} reports n_c={u.n_c}")
    g = 0
    for u in updates:
        g = math.gcd(g, u.n_c)
    mult = [u.n_c // g for u in updates]
    total = sum(mult)
    out = []
    for layer in range(len(shapes)):
        stack = np.stack([m * u.params[layer].ravel() if m != 1 else u.params[layer].ravel()
                          for m, u in zip(mult, updates)])
        flat = np.array([math.fsum(col) for col in stack.T.tolist()]) / total
        out.append(flat.reshape(shapes[layer]))
    return out


def top1_accuracy(state: ProbeState, spec: ProbeSpec, test: Dataset | ClientShard) -> float:
    """Fraction of argmax hits; ties go to the lowest class index."""
    if len(test.labels) == 0:
        raise DomainError("accuracy on an empty test set")
    logits = predict_logits(state, spec, test.images)
    return top1_from_logits(logits, test.labels)


def top1_from_logits(logits: np.ndarray, labels) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise DomainError("accuracy on an empty test set")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def binary_auc(scores, positive) -> float:
    """Mann-Whitney AUC with average ranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DomainError("AUC needs both positive and negative samples")
    ranks = rank_average_ties(scores)
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def macro_auc_from_scores(probs: np.ndarray, labels) -> float:
    labels = np.asarray(labels)
    present = np.unique(labels)
    if len(present) < 2:
        raise DomainError("macro AUC needs at least two distinct labels in the test set")
    return float(np.mean([binary_auc(probs[:, c], labels == c) for c in present]))


def macro_auc(state: ProbeState, spec: ProbeSpec, test: Dataset | ClientShard) -> float:
    """Unweighted mean of one-vs-rest AUCs over the classes present in ``test``."""
    if len(np.unique(test.labels)) < 2:
        raise DomainError("macro AUC needs at least two distinct labels in the test set")
    probs = softmax(predict_logits(state, spec, test.images))
    return macro_auc_from_scores(probs, test.labels)


def evaluate(state: ProbeState, spec: ProbeSpec, data, metric: str) -> float:
    if metric == "top1":
        return top1_accuracy(state, spec, data)
    if metric == "macro_auc":
        return macro_auc(state, spec, data)
    raise DomainError(f"unknown metric {metric!r}")


def _local_metric(state, spec, shard, metric) -> float:
    # Single-class client shards have no AUC; fall back to accuracy there.
    if metric == "macro_auc" and len(np.unique(shard.labels)) < 2:
        return top1_accuracy(state, spec, shard)
    return evaluate(state, spec, shard, metric)


def run_federation(
    federation: FederationSnapshot,
    spec: ProbeSpec,
    config: FedAvgConfig,
    workers: int = 1,
    initial_state: ProbeState | None = None,
) -> TrainingResult:
    """Run ``config.rounds`` FedAvg rounds and score the final model on the test set.

    Per-round sampled client evaluation is logged only; it never feeds back
    into training. Results are identical for any ``workers`` value.
    """
    if federation.test_set is None or len(federation.test_set) == 0:
        raise DomainError("federation has no centralized test set")
    t0 = time.perf_counter()
    root = Rng(config.seed, ("fedavg",))
    state = initial_state.copy() if initial_state is not None else init_probe(spec, root.derive("init"))
    state.check(spec)
    initial_metric = evaluate(state, spec, federation.test_set, config.final_metric)
    K = federation.K
    by_id = {s.client_id: s for s in federation.shards}
    ids = sorted(by_id)
    n_fit = math.ceil(config.fraction_fit * K)
    n_eval = math.ceil(config.fraction_evaluate * K)
    logs = []
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for t in range(1, config.rounds + 1):
            if n_fit >= K:
                fit_ids = ids
            else:
                pick = root.derive("select", t).choice_without_replacement(K, n_fit)
                fit_ids = sorted(ids[i] for i in pick)
            jobs = [(state, spec, by_id[c], config, root.derive("client", t, c)) for c in fit_ids]
            if pool is None:
                updates = [local_train(*j) for j in jobs]
            else:
                updates = list(pool.map(lambda j: local_train(*j), jobs))
            state = ProbeState(fedavg_aggregate(updates), [np.zeros_like(p) for p in state.params])
            pick = root.derive("evaluate", t).choice_without_replacement(K, n_eval)
            eval_ids = sorted(ids[i] for i in pick)
            local = [_local_metric(state, spec, by_id[c], config.final_metric) for c in eval_ids]
            logs.append(RoundLog(t, float(np.mean(local)), list(fit_ids), eval_ids))
    finally:
        if pool is not None:
            pool.shutdown()
    final = evaluate(state, spec, federation.test_set, config.final_metric)
    return TrainingResult(logs, final, initial_metric, state, asdict(config), time.perf_counter() - t0)
