"""Command-line entry point: ``fedready {embed,readiness,train,sweep,correlate}``.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from .embedding import write_embeddings_csv
from .errors import ComparabilityError, ConfigError, DomainError, IdxParseError, StructuralError
from .fedsim import METRICS
from .harness import (
    SweepConfig,
    build_federation,
    correlate_report,
    format_report_text,
    load_sweep_config,
    read_csv,
    readiness_for_cell,
    run_sweep,
    train_cell,
    write_report_csv,
)
from .kernels import BACKEND

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3

log = logging.getLogger("fedready")


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global")
    g.add_argument("--config", metavar="PATH", help="sweep config document (TOML)")
    g.add_argument("--seed", type=int, help="run a single seed instead of the config's seed list")
    g.add_argument("--out", metavar="PATH", help="output file")
    g.add_argument("--workers", type=int, help="parallel workers")
    g.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return p


def _data_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("dataset")
    g.add_argument("--dataset", choices=["blobs", "idx"])
    g.add_argument("--idx-images", metavar="PATH")
    g.add_argument("--idx-labels", metavar="PATH")
    g.add_argument("--classes", type=int)
    g.add_argument("--per-class", type=int)
    g.add_argument("--spread", type=float)
    g.add_argument("--pretrain-steps", type=int)
    f = p.add_argument_group("federation")
    f.add_argument("--clients", type=int, nargs="+", metavar="K")
    f.add_argument("--alpha", type=float, nargs="+")
    return p


def _train_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("training")
    g.add_argument("--rounds", type=int)
    g.add_argument("--epochs", type=int, dest="local_epochs")
    g.add_argument("--batch", type=int, dest="batch_size")
    g.add_argument("--lr", type=float)
    g.add_argument("--momentum", type=float)
    g.add_argument("--frac-eval", type=float, dest="fraction_evaluate")
    g.add_argument("--metric", choices=METRICS, dest="final_metric")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedready", description="Pre-training readiness indices for federations.")
    parser.add_argument("--version", action="version", version=f"%(prog)s (kernels: {BACKEND})")
    sub = parser.add_subparsers(dest="command", required=True)
    common, data, train = _global_flags(), _data_flags(), _train_flags()
    sub.add_parser("embed", parents=[common, data], help="write per-client embeddings as CSV")
    sub.add_parser("readiness", parents=[common, data], help="print the readiness report of one federation")
    sub.add_parser("train", parents=[common, data, train], help="run FedAvg on one federation")
    sub.add_parser("sweep", parents=[common, data, train], help="run the (K, alpha, seed) grid to CSV")
    c = sub.add_parser("correlate", parents=[common], help="correlate readiness with final performance")
    c.add_argument("results", help="sweep CSV")
    c.add_argument("--no-seed-average", action="store_true", help="pool per-seed rows instead of averaging per alpha")
    return parser


def resolve_config(args) -> SweepConfig:
    """Config file (or defaults) with command-line overrides applied."""
    cfg = load_sweep_config(args.config) if args.config else SweepConfig()
    ds = {}
    for flag, key in (("dataset", "kind"), ("idx_images", "idx_images"), ("idx_labels", "idx_labels"),
                      ("classes", "classes"), ("per_class", "per_class"), ("spread", "spread")):
        v = getattr(args, flag, None)
        if v is not None:
            ds[key] = v
    if ds:
        cfg.dataset = replace(cfg.dataset, **ds)
    if cfg.dataset.kind == "idx" and not (cfg.dataset.idx_images and cfg.dataset.idx_labels):
        raise ConfigError("--idx-images and --idx-labels are required with --dataset idx", "dataset")
    if getattr(args, "pretrain_steps", None) is not None:
        cfg.pretrain_steps = args.pretrain_steps
    if getattr(args, "clients", None):
        cfg.clients = list(args.clients)
    if getattr(args, "alpha", None):
        if any(a <= 0 for a in args.alpha):
            raise ConfigError("alpha entries must be > 0", "alpha")
        cfg.alpha = list(args.alpha)
    if args.seed is not None:
        cfg.seeds = [args.seed]
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1", "workers")
        cfg.workers = args.workers
    overrides = {k: getattr(args, k, None) for k in
                 ("rounds", "local_epochs", "batch_size", "lr", "momentum", "fraction_evaluate", "final_metric")}
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if overrides:
        try:
            cfg.fedavg = replace(cfg.fedavg, **overrides)
        except DomainError as exc:
            raise ConfigError(str(exc), str(exc).split()[0]) from None
    return cfg


def _single_cell(cfg: SweepConfig) -> tuple[int, float, int]:
    if len(cfg.clients) > 1 or len(cfg.alpha) > 1 or len(cfg.seeds) > 1:
        log.info("using the first K, alpha and seed of the grid")
    return cfg.clients[0], cfg.alpha[0], cfg.seeds[0]


def _emit(text: str, path: str | None) -> None:
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_embed(args, cfg) -> None:
    K, alpha, seed = _single_cell(cfg)
    _, _, embeddings, _ = readiness_for_cell(cfg, K, alpha, seed)
    write_embeddings_csv(embeddings, args.out or sys.stdout)


def cmd_readiness(args, cfg) -> None:
    K, alpha, seed = _single_cell(cfg)
    _, _, _, report = readiness_for_cell(cfg, K, alpha, seed)
    head = f"dataset {cfg.dataset.tag}  alpha {alpha:g}  seed {seed}\n"
    _emit(head + report.as_text() + "\n", args.out)


def cmd_train(args, cfg) -> None:
    K, alpha, seed = _single_cell(cfg)
    fed, spec = build_federation(cfg, K, alpha, seed)
    result = train_cell(cfg, fed, spec, seed, workers=cfg.workers)
    metric = cfg.fedavg.final_metric
    lines = [f"round  sampled-client {metric}"]
    lines += [f"{lg.round:5d}  {lg.eval_metric:.6f}" for lg in result.round_logs]
    lines.append(f"initial {metric} {result.initial_metric_value:.6f}")
    lines.append(f"final {metric} {result.final_metric_value:.6f}")
    _emit("\n".join(lines) + "\n", args.out)


def cmd_sweep(args, cfg) -> None:
    rows = run_sweep(cfg, out_path=args.out or cfg.output, workers=cfg.workers)
    failed = sum(not r.ok for r in rows)
    print(f"{len(rows)} rows written to {args.out or cfg.output} ({failed} error rows)")


def cmd_correlate(args, cfg) -> None:
    rows = read_csv(args.results)
    groups = correlate_report(rows, seed_average=not args.no_seed_average)
    sys.stdout.write(format_report_text(groups))
    if args.out:
        write_report_csv(groups, args.out)


COMMANDS = {
    "embed": cmd_embed,
    "readiness": cmd_readiness,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "correlate": cmd_correlate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args) if args.command != "correlate" else None
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IdxParseError, DomainError, StructuralError, ComparabilityError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
