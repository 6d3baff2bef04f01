"""Sweep orchestration: config documents, per-cell pipeline, CSV rows, correlation report.

A sweep cell is one ``(K, alpha, seed)`` triple. Each cell builds the
federation, embeds every client through a frozen pretrained extractor,
computes the readiness report, and only then runs FedAvg on the same
federation snapshot.
"""

from __future__ import annotations

import csv
import logging
import math
import re
import sys
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .datasets import Dataset, FederationSnapshot, dirichlet_partition, load_idx, make_blobs, train_test_split
from .embedding import EmbedConfig, TaskEmbedding, pretrain_extractor, task2vec_embed
from .errors import ConfigError, DegenerateInputError, DomainError
from .fedsim import METRICS, FedAvgConfig, TrainingResult, run_federation
from .numcore import Rng
from .probe import DEFAULT_CONV_LAYERS, ProbeSpec, ProbeState
from .readiness import CdiWeights, ReadinessReport, build_report
from .stats import CorrelationResult, pearson, spearman

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

DEFAULT_ALPHAS = (0.05, 0.1, 0.2, 0.3, 0.5, 1.0, 2.0, 5.0)
DEFAULT_CLIENTS = (10, 20)
READINESS_METRICS = ("cohesion", "neg_dispersion", "density", "cdi", "avg_entropy")
CSV_HEADER = (
    "dataset", "K", "alpha", "seed",
    "cohesion", "neg_dispersion", "density", "cdi", "avg_entropy",
    "final_metric", "wall_time_s",
)
PRETEXT_SEED_OFFSET = 1_000_003


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "blobs"
    name: str = ""
    classes: int = 10
    channels: int = 3
    side: int = 16
    per_class: int = 200
    spread: float = 3.0
    idx_images: str = ""
    idx_labels: str = ""
    test_fraction: float = 0.25
    pretext_per_class: int = 100

    @property
    def tag(self) -> str:
        return self.name or self.kind


@dataclass
class SweepConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    clients: list[int] = field(default_factory=lambda: list(DEFAULT_CLIENTS))
    alpha: list[float] = field(default_factory=lambda: list(DEFAULT_ALPHAS))
    seeds: list[int] = field(default_factory=lambda: [0])
    min_per_client: int = 8
    pretrain_steps: int = 200
    output: str = "sweep.csv"
    workers: int = 1
    seed_average: bool = True
    fedavg: FedAvgConfig = field(default_factory=FedAvgConfig)
    embed: EmbedConfig = field(default_factory=EmbedConfig)
    readiness: CdiWeights = field(default_factory=CdiWeights)


@dataclass
class SweepRow:
    dataset: str
    K: int
    alpha: float
    seed: int
    cohesion: float = math.nan
    neg_dispersion: float = math.nan
    density: float = math.nan
    cdi: float = math.nan
    avg_entropy: float = math.nan
    final_metric: float = math.nan
    wall_time_s: float = 0.0
    status: str = "ok"

    @property
    def ok(self) -> bool:
        return self.status == "ok" and all(math.isfinite(getattr(self, m)) for m in READINESS_METRICS + ("final_metric",))

    def sort_key(self):
        return (self.dataset, self.K, self.alpha, self.seed)


# --------------------------------------------------------------------------
# config documents (TOML subset: scalars and flat lists inside [sections])

_SECTIONS = {
    "dataset": {f.name for f in fields(DatasetConfig)},
    "sweep": {"clients", "alpha", "seeds", "min_per_client", "pretrain_steps", "output", "workers", "seed_average"},
    "fedavg": {"rounds", "local_epochs", "batch_size", "lr", "momentum", "fraction_fit", "fraction_evaluate",
               "final_metric"},
    "embed": {"max_samples", "head_epochs", "head_lr", "fisher_passes", "skip_filters", "chunk"},
    "readiness": {"beta", "gamma"},
}


def _line_of(text: str, key: str, section: str | None = None) -> int | None:
    current = None
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"^\[([^\]]+)\]", s)
        if m:
            current = m.group(1).strip()
            continue
        if re.match(rf"^{re.escape(key)}\s*=", s) and (section is None or current == section):
            return no
    return None


def _typed(value, kind, key, text, section):
    line = _line_of(text, key, section)
    try:
        if kind is bool:
            if not isinstance(value, bool):
                raise TypeError
            return value
        if kind is int:
            if isinstance(value, bool) or not isinstance(value, int):
                raise TypeError
            return value
        if kind is float:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise TypeError
            return float(value)
        if kind is str:
            if not isinstance(value, str):
                raise TypeError
            return value
    except TypeError:
        raise ConfigError(f"expected {kind.__name__}, got {value!r}", key, line) from None
    raise AssertionError(kind)


def _typed_list(value, kind, key, text, section):
    if not isinstance(value, list):
        value = [value]
    return [_typed(v, kind, key, text, section) for v in value]


def parse_sweep_config(text: str) -> SweepConfig:
    """Parse a sweep document; omitted keys take their documented defaults."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        line = getattr(exc, "lineno", None)
        if line is None:
            m = re.search(r"line (\d+)", str(exc))
            line = int(m.group(1)) if m else None
        raise ConfigError(f"malformed document: {exc}", None, line) from None
    for section, body in doc.items():
        if section not in _SECTIONS:
            raise ConfigError("unknown section", section, _line_of(text, section) or _section_line(text, section))
        if not isinstance(body, dict):
            raise ConfigError("top-level keys must live inside a [section]", section, _line_of(text, section))
        for key in body:
            if key not in _SECTIONS[section]:
                raise ConfigError(f"unknown key in [{section}]", key, _line_of(text, key, section))

    def get(section, key, kind, default):
        body = doc.get(section, {})
        if key not in body:
            return default
        return _typed(body[key], kind, key, text, section)

    def check(cond, msg, section, key):
        if not cond:
            raise ConfigError(msg, key, _line_of(text, key, section))

    ds_defaults = DatasetConfig()
    ds_kwargs = {}
    for f in fields(DatasetConfig):
        kind = {"int": int, "float": float, "str": str}[f.type if isinstance(f.type, str) else f.type.__name__]
        ds_kwargs[f.name] = get("dataset", f.name, kind, getattr(ds_defaults, f.name))
    check(ds_kwargs["kind"] in ("blobs", "idx"), "must be 'blobs' or 'idx'", "dataset", "kind")
    if ds_kwargs["kind"] == "idx":
        check(bool(ds_kwargs["idx_images"]), "required when kind = 'idx'", "dataset", "idx_images")
        check(bool(ds_kwargs["idx_labels"]), "required when kind = 'idx'", "dataset", "idx_labels")
    check(ds_kwargs["classes"] >= 2, "must be >= 2", "dataset", "classes")
    check(ds_kwargs["side"] >= 8, "must be >= 8", "dataset", "side")
    check(ds_kwargs["channels"] >= 1, "must be >= 1", "dataset", "channels")
    check(ds_kwargs["per_class"] >= 1, "must be >= 1", "dataset", "per_class")
    check(ds_kwargs["pretext_per_class"] >= 1, "must be >= 1", "dataset", "pretext_per_class")
    check(ds_kwargs["spread"] >= 0, "must be >= 0", "dataset", "spread")
    check(0 < ds_kwargs["test_fraction"] < 1, "must be in (0, 1)", "dataset", "test_fraction")
    dataset = DatasetConfig(**ds_kwargs)

    sw = doc.get("sweep", {})
    clients = _typed_list(sw["clients"], int, "clients", text, "sweep") if "clients" in sw else list(DEFAULT_CLIENTS)
    alpha = _typed_list(sw["alpha"], float, "alpha", text, "sweep") if "alpha" in sw else list(DEFAULT_ALPHAS)
    seeds = _typed_list(sw["seeds"], int, "seeds", text, "sweep") if "seeds" in sw else [0]
    check(len(alpha) > 0 and all(a > 0 for a in alpha), "alpha list must be non-empty with entries > 0", "sweep", "alpha")
    check(len(clients) > 0 and all(k >= 2 for k in clients), "clients list must be non-empty with entries >= 2",
          "sweep", "clients")
    check(len(seeds) > 0 and all(s >= 0 for s in seeds), "seeds list must be non-empty and non-negative",
          "sweep", "seeds")

    fa_defaults = FedAvgConfig()
    fa_kwargs = {}
    for key, kind in (("rounds", int), ("local_epochs", int), ("batch_size", int), ("lr", float),
                      ("momentum", float), ("fraction_fit", float), ("fraction_evaluate", float),
                      ("final_metric", str)):
        fa_kwargs[key] = get("fedavg", key, kind, getattr(fa_defaults, key))
    check(fa_kwargs["final_metric"] in METRICS, f"must be one of {METRICS}", "fedavg", "final_metric")
    try:
        fedavg = FedAvgConfig(**fa_kwargs)
    except DomainError as exc:
        key = str(exc).split()[0]
        raise ConfigError(str(exc), key, _line_of(text, key, "fedavg")) from None

    em_defaults = EmbedConfig()
    em_kwargs = {}
    for key, kind in (("max_samples", int), ("head_epochs", int), ("head_lr", float), ("fisher_passes", int),
                      ("skip_filters", int), ("chunk", int)):
        em_kwargs[key] = get("embed", key, kind, getattr(em_defaults, key))
    check(em_kwargs["head_lr"] > 0, "must be > 0", "embed", "head_lr")
    check(em_kwargs["chunk"] >= 1, "must be >= 1", "embed", "chunk")
    try:
        embed = EmbedConfig(**em_kwargs)
    except DomainError as exc:
        key = str(exc).split()[0]
        raise ConfigError(str(exc), key, _line_of(text, key, "embed")) from None
    check(embed.skip_filters < sum(f for f, _ in DEFAULT_CONV_LAYERS), "must be < number of probe filters",
          "embed", "skip_filters")

    beta = get("readiness", "beta", float, 1.0)
    gamma = get("readiness", "gamma", float, 1000.0)
    check(beta > 0, "must be > 0", "readiness", "beta")
    check(gamma > 0, "must be > 0", "readiness", "gamma")

    min_per_client = get("sweep", "min_per_client", int, 8)
    check(min_per_client >= 1, "must be >= 1", "sweep", "min_per_client")
    pretrain_steps = get("sweep", "pretrain_steps", int, 200)
    check(pretrain_steps >= 0, "must be >= 0", "sweep", "pretrain_steps")
    workers = get("sweep", "workers", int, 1)
    check(workers >= 1, "must be >= 1", "sweep", "workers")

    return SweepConfig(
        dataset=dataset,
        clients=clients,
        alpha=alpha,
        seeds=seeds,
        min_per_client=min_per_client,
        pretrain_steps=pretrain_steps,
        output=get("sweep", "output", str, "sweep.csv"),
        workers=workers,
        seed_average=get("sweep", "seed_average", bool, True),
        fedavg=fedavg,
        embed=embed,
        readiness=CdiWeights(beta, gamma),
    )


def _section_line(text: str, section: str) -> int | None:
    for no, line in enumerate(text.splitlines(), 1):
        if re.match(rf"^\s*\[\s*{re.escape(section)}\s*\]", line):
            return no
    return None


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(type(v))


def dump_sweep_config(config: SweepConfig) -> str:
    """Serialize to a document that ``parse_sweep_config`` reads back to an equal config."""
    sections = {
        "dataset": asdict(config.dataset),
        "sweep": {
            "clients": config.clients, "alpha": config.alpha, "seeds": config.seeds,
            "min_per_client": config.min_per_client, "pretrain_steps": config.pretrain_steps,
            "output": config.output, "workers": config.workers, "seed_average": config.seed_average,
        },
        "fedavg": {k: v for k, v in asdict(config.fedavg).items() if k in _SECTIONS["fedavg"]},
        "embed": {k: v for k, v in asdict(config.embed).items() if k in _SECTIONS["embed"]},
        "readiness": {"beta": config.readiness.beta, "gamma": config.readiness.gamma},
    }
    out = []
    for name, body in sections.items():
        out.append(f"[{name}]")
        out += [f"{k} = {_toml_value(v)}" for k, v in body.items()]
        out.append("")
    return "\n".join(out)


def load_sweep_config(path) -> SweepConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    return parse_sweep_config(text)


# --------------------------------------------------------------------------
# per-cell pipeline


@lru_cache(maxsize=8)
def _load_pool(ds: DatasetConfig, seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """(train pool, centralized test set, pretext split); all pairwise disjoint."""
    if ds.kind == "blobs":
        data = make_blobs(ds.classes, ds.channels, ds.side, ds.per_class, ds.spread, seed)
        train, test = train_test_split(data, ds.test_fraction, seed)
        pretext = make_blobs(ds.classes, ds.channels, ds.side, ds.pretext_per_class, ds.spread,
                             seed + PRETEXT_SEED_OFFSET, template_seed=seed)
        return train, test, pretext
    if ds.kind == "idx":
        data = load_idx(ds.idx_images, ds.idx_labels)
        rest, test = train_test_split(data, ds.test_fraction, seed)
        pretext_share = min(0.5, ds.pretext_per_class * data.class_count / max(len(rest), 1))
        train, pretext = train_test_split(rest, max(pretext_share, 1.0 / max(len(rest), 2)), seed + 1)
        return train, test, pretext
    raise ConfigError(f"unknown dataset kind {ds.kind!r}", "kind")


def probe_spec_for(data: Dataset) -> ProbeSpec:
    return ProbeSpec(data.channels, data.side, DEFAULT_CONV_LAYERS, data.class_count)


@lru_cache(maxsize=8)
def _extractor(ds: DatasetConfig, seed: int, steps: int) -> tuple[ProbeSpec, ProbeState]:
    train, _, pretext = _load_pool(ds, seed)
    spec = probe_spec_for(train)
    return spec, pretrain_extractor(spec, pretext, steps, Rng(seed, ("pretrain",)))


def build_federation(config: SweepConfig, K: int, alpha: float, seed: int) -> tuple[FederationSnapshot, ProbeSpec]:
    train, test, _ = _load_pool(config.dataset, seed)
    fed = dirichlet_partition(train, K, alpha, config.min_per_client, seed, test)
    return fed, probe_spec_for(train)


def embed_federation(config: SweepConfig, fed: FederationSnapshot, seed: int) -> list[TaskEmbedding]:
    spec, extractor = _extractor(config.dataset, seed, config.pretrain_steps)
    cfg = replace(config.embed, seed=seed)
    return [task2vec_embed(extractor, spec, shard, cfg) for shard in fed.shards]


def readiness_for_cell(
    config: SweepConfig, K: int, alpha: float, seed: int
) -> tuple[FederationSnapshot, ProbeSpec, list[TaskEmbedding], ReadinessReport]:
    fed, spec = build_federation(config, K, alpha, seed)
    embeddings = embed_federation(config, fed, seed)
    return fed, spec, embeddings, build_report(fed, embeddings, config.readiness)


def train_cell(config: SweepConfig, fed: FederationSnapshot, spec: ProbeSpec, seed: int,
               workers: int = 1) -> TrainingResult:
    return run_federation(fed, spec, replace(config.fedavg, seed=seed), workers=workers)


def run_cell(config: SweepConfig, K: int, alpha: float, seed: int) -> SweepRow:
    """One sweep observation; failures become error rows instead of exceptions."""
    t0 = time.perf_counter()
    row = SweepRow(config.dataset.tag, K, float(alpha), seed)
    try:
        fed, spec, _, report = readiness_for_cell(config, K, alpha, seed)
        # readiness is frozen into the row before any training happens
        row.cohesion = report.cohesion
        row.neg_dispersion = report.neg_dispersion
        row.density = report.density
        row.cdi = report.cdi
        row.avg_entropy = report.avg_entropy
        result = train_cell(config, fed, spec, seed)
        row.final_metric = result.final_metric_value
    except (DomainError, ValueError, ArithmeticError) as exc:
        log.warning("cell K=%s alpha=%s seed=%s failed: %s", K, alpha, seed, exc)
        row = SweepRow(config.dataset.tag, K, float(alpha), seed, status=f"error: {exc}")
    row.wall_time_s = time.perf_counter() - t0
    return row


def sweep_cells(config: SweepConfig) -> list[tuple[int, float, int]]:
    return [(K, float(a), s) for K in config.clients for a in config.alpha for s in config.seeds]


def run_sweep(config: SweepConfig, out_path=None, workers: int | None = None) -> list[SweepRow]:
    """Run every (K, alpha, seed) cell; rows are appended to the CSV as they finish.

    The final file is rewritten sorted by (dataset, K, alpha, seed), so its
    content does not depend on the worker count.
    """
    out_path = Path(out_path or config.output)
    workers = workers or config.workers
    cells = sweep_cells(config)
    rows: list[SweepRow] = []
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        fh.flush()

        def emit(row):
            rows.append(row)
            writer.writerow(_row_to_record(row))
            fh.flush()
            log.info("K=%s alpha=%s seed=%s -> %s", row.K, row.alpha, row.seed, row.status)

        if workers <= 1:
            for K, a, s in cells:
                emit(run_cell(config, K, a, s))
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(run_cell, config, K, a, s) for K, a, s in cells]
                for fut in as_completed(futures):
                    emit(fut.result())
    rows.sort(key=SweepRow.sort_key)
    write_csv(rows, out_path)
    return rows


# --------------------------------------------------------------------------
# CSV


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _row_to_record(row: SweepRow) -> list[str]:
    return [row.dataset, str(row.K), _fmt(row.alpha), str(row.seed)] + [
        _fmt(getattr(row, name)) for name in CSV_HEADER[4:]
    ]


def write_csv(rows: Iterable[SweepRow], path) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for row in rows:
                w.writerow(_row_to_record(row))
    except OSError as exc:
        raise OSError(f"cannot write results to {path}: {exc}") from exc


def read_csv(path) -> list[SweepRow]:
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            body = list(reader)
    except OSError as exc:
        raise OSError(f"cannot read results from {path}: {exc}") from exc
    if header is None:
        raise ConfigError(f"{path}: empty file, expected a header")
    missing = [c for c in CSV_HEADER if c not in header]
    if missing:
        raise ConfigError(f"{path}: missing column '{missing[0]}'", missing[0], 1)
    pos = {c: header.index(c) for c in CSV_HEADER}
    rows = []
    for rec in body:
        if not rec:
            continue
        values = {c: rec[pos[c]] for c in CSV_HEADER}
        row = SweepRow(
            dataset=values["dataset"], K=int(values["K"]), alpha=float(values["alpha"]), seed=int(values["seed"]),
            **{c: float(values[c]) for c in CSV_HEADER[4:]},
        )
        if not all(math.isfinite(getattr(row, m)) for m in READINESS_METRICS + ("final_metric",)):
            row.status = "error"
        rows.append(row)
    return rows


# --------------------------------------------------------------------------
# correlation report


@dataclass
class MetricCorrelation:
    metric: str
    pearson: CorrelationResult | None
    spearman: CorrelationResult | None
    error: str = ""


@dataclass
class GroupReport:
    dataset: str
    K: int
    n_points: int
    metrics: dict[str, MetricCorrelation]


def _points(rows: Sequence[SweepRow], seed_average: bool) -> list[dict]:
    if not seed_average:
        return [asdict(r) for r in rows]
    by_alpha: dict[float, list[SweepRow]] = {}
    for r in rows:
        by_alpha.setdefault(r.alpha, []).append(r)
    pts = []
    for a in sorted(by_alpha):
        grp = by_alpha[a]
        pt = {"alpha": a}
        for m in READINESS_METRICS + ("final_metric",):
            pt[m] = float(np.mean([getattr(r, m) for r in grp]))
        pts.append(pt)
    return pts


def correlate_report(rows: Sequence[SweepRow], seed_average: bool = True) -> list[GroupReport]:
    """Pearson and Spearman of each readiness metric against final performance, per (dataset, K)."""
    groups: dict[tuple[str, int], list[SweepRow]] = {}
    for r in rows:
        if r.ok:
            groups.setdefault((r.dataset, r.K), []).append(r)
    if not groups:
        raise DomainError("no successful rows to correlate")
    out = []
    for (ds, K), grp in sorted(groups.items()):
        alphas = {r.alpha for r in grp}
        if len(alphas) < 3:
            raise DomainError(f"group dataset={ds} K={K} has {len(alphas)} distinct alpha levels, need >= 3")
        pts = _points(grp, seed_average)
        perf = [p["final_metric"] for p in pts]
        metrics = {}
        for m in READINESS_METRICS:
            xs = [p[m] for p in pts]
            try:
                metrics[m] = MetricCorrelation(m, pearson(xs, perf), spearman(xs, perf))
            except DegenerateInputError as exc:
                metrics[m] = MetricCorrelation(m, None, None, str(exc))
        out.append(GroupReport(ds, K, len(pts), metrics))
    return out


_METRIC_TITLES = {
    "cohesion": "Cohesion",
    "neg_dispersion": "-Dispersion",
    "density": "Density",
    "cdi": "CDI",
    "avg_entropy": "Average Entropy",
}


def _cell(res: CorrelationResult | None) -> str:
    if res is None:
        return "n/a"
    return res.cell() + ("*" if res.significant else "")


def format_report_text(groups: Sequence[GroupReport]) -> str:
    """Two aligned tables (Pearson, Spearman); ``*`` marks p < 0.05."""
    blocks = []
    for method in ("pearson", "spearman"):
        header = ["Dataset", "K", "n"] + [_METRIC_TITLES[m] for m in READINESS_METRICS]
        body = [
            [g.dataset, str(g.K), str(g.n_points)] + [_cell(getattr(g.metrics[m], method)) for m in READINESS_METRICS]
            for g in groups
        ]
        widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
        lines = [f"{method.capitalize()} correlation with final performance (cells r(p); * = p<0.05)"]
        lines.append("  ".join(h.ljust(w) for h, w in zip(header, widths)))
        lines.append("  ".join("-" * w for w in widths))
        lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in body]
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


REPORT_HEADER = ("dataset", "K", "n", "metric", "method", "r", "p_value", "significant", "cell", "note")


def write_report_csv(groups: Sequence[GroupReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_HEADER)
        for g in groups:
            for m in READINESS_METRICS:
                mc = g.metrics[m]
                for method in ("pearson", "spearman"):
                    res = getattr(mc, method)
                    if res is None:
                        w.writerow([g.dataset, g.K, g.n_points, m, method, "", "", "", "n/a", mc.error])
                    else:
                        w.writerow([g.dataset, g.K, g.n_points, m, method, _fmt(res.r), _fmt(res.p_value),
                                    int(res.significant), _cell(res), ""])
