"""``ampd`` command line: train, discover, check, synth.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .conformance import ConformanceError, log_fitness
from .discovery import DiscoveryError, dependency_matrix, directly_follows_counts, \
    discover_model, export_dot, read_dot
from .env import EnvError
from .eventlog import (ColumnMapping, EventLogError, build_log, generate_synthetic_table,
                       load_table, write_table)
from .qnet import QNetError
from .trainer import TrainingError, train, write_report

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
RUNTIME_ERRORS = (EventLogError, DiscoveryError, ConformanceError, EnvError, TrainingError,
                  QNetError, OSError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _overrides(args) -> list[str]:
    items = list(args.set or [])
    if args.seed is not None:
        items.append(f"seed={args.seed}")
    return items


def _table(path, cfg):
    data = cfg.data()
    return load_table(path, data.delimiter, data.has_header)


def _mapping(args) -> ColumnMapping:
    return ColumnMapping(args.case, args.activity, args.resource)


def cmd_train(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    tcfg = cfg.training()
    table_path = args.table or cfg.data().table
    if table_path:
        table = _table(table_path, cfg)
    else:
        table = generate_synthetic_table(cfg.synth(), cfg.synth_seed())
    out = Path(args.out or "run")

    def progress(m):
        logging.getLogger("ampd").info(
            "epoch %d/%d  score %.4f  avg_fitness %.4f  >=0.7: %d  eps %.3f",
            m.epoch, tcfg.epochs, m.total_score, m.avg_fitness, m.count_ge_threshold, m.epsilon)

    report = train(table, tcfg, progress)
    write_report(report, out)
    last = report.metrics[-1]
    print(f"wrote {out} ({len(report.metrics)} epochs, final avg_fitness {last.avg_fitness:.6f})")
    return EXIT_OK


def cmd_discover(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    table = _table(args.table, cfg)
    mapping = _mapping(args)
    log = build_log(table, mapping)
    depmat = dependency_matrix(directly_follows_counts(log))
    model = discover_model(depmat, args.threshold, mapping)
    dot = export_dot(model)
    if args.out:
        Path(args.out).write_text(dot, encoding="utf-8")
    else:
        sys.stdout.write(dot)
    print(f"fitness {log_fitness(log, model).log_fitness:.6f}",
          file=sys.stderr if not args.out else sys.stdout)
    return EXIT_OK


def cmd_check(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    table = _table(args.table, cfg)
    model = read_dot(Path(args.model).read_text(encoding="utf-8"))
    report = log_fitness(build_log(table, _mapping(args)), model)
    if args.out:
        report.write_csv(args.out)
    print(f"fitness {report.log_fitness:.6f}")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    spec = cfg.synth()
    if not args.out:
        raise UsageError("synth needs --out")
    table = generate_synthetic_table(spec, cfg.synth_seed())
    write_table(table, args.out)
    print(f"wrote {args.out} ({len(table)} rows, {table.n_columns} columns)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="random seed (overrides the config file)")
    common.add_argument("--out", help="output path")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    mapping = _Parser(add_help=False)
    mapping.add_argument("table", help="event table (delimiter-separated text)")
    mapping.add_argument("--case", type=int, required=True, help="case column (0-based)")
    mapping.add_argument("--activity", type=int, required=True, help="activity column (0-based)")
    mapping.add_argument("--resource", type=int, required=True, help="resource column (0-based)")

    parser = _Parser(prog="ampd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", parents=[common], help="train the discovery agent")
    p.add_argument("--table", help="event table; defaults to data.table, else a synthetic table")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("discover", parents=[common, mapping], help="mine one model")
    p.add_argument("--threshold", type=float, required=True)
    p.set_defaults(func=cmd_discover)

    p = sub.add_parser("check", parents=[common, mapping], help="replay a log on a DOT model")
    p.add_argument("--model", required=True, help="DOT file written by 'discover' or 'train'")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic event table")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"ampd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"ampd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RUNTIME_ERRORS as exc:
        print(f"ampd: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
