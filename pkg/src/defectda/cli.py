"""Command-line entry point: generate, train, matrix, report."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import METHODS, ConfigError, load_config
from .dataset import DEFAULT_SIDE, DOMAINS, generate_domain, save_dataset, split_dataset
from .harness import DuplicateRowError, HarnessError, ResultsStore, load_datasets, report, run_matrix, run_scenario, _spec


def _counts(text: str | None):
    if text is None:
        return None
    parts = [int(v) for v in text.split(",")]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("--counts takes two integers: particle,point")
    return tuple(parts)


def cmd_generate(args) -> int:
    domains = DOMAINS if args.domain == "all" else (int(args.domain),)
    out = Path(args.out)
    for d in domains:
        ds = split_dataset(generate_domain(d, args.counts, args.seed, args.side), args.test_fraction, args.seed)
        target = out / f"domain_{d}" if args.domain == "all" else out
        save_dataset(ds, target)
        print(f"domain {d}: {len(ds)} images -> {target}")
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config, method=args.method)
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    store = ResultsStore(args.results or config.results_dir)
    spec = _spec(config, config.source, config.target)
    row = run_scenario(spec, config.method, config.arch, config, load_datasets(config), store, force=args.force)
    print(row.to_json())
    return 0 if row.accuracy is not None else 1


def cmd_matrix(args) -> int:
    config = load_config(args.config)
    store = ResultsStore(args.results or config.results_dir)
    rows = run_matrix(config, args.mode, store, force=args.force)
    failed = [r for r in rows if r.accuracy is None]
    print(f"{len(rows)} rows written to {store.path}; {len(failed)} failed")
    return 1 if failed else 0


def cmd_report(args) -> int:
    for path in report(ResultsStore(args.results), args.out, args.format):
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="defectda", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic domain dataset to disk")
    g.add_argument("--domain", choices=["0", "1", "2", "all"], required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--side", type=int, default=DEFAULT_SIDE)
    g.add_argument("--counts", type=_counts, default=None, help="particle,point images (default: per-domain sizes)")
    g.add_argument("--test-fraction", type=float, default=0.2)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="run one scenario and append its row to the results store")
    t.add_argument("--method", choices=METHODS, required=True)
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--results", default=None, help="results directory (default: config results_dir)")
    t.add_argument("--force", action="store_true", help="replace an existing row")
    t.set_defaults(func=cmd_train)

    m = sub.add_parser("matrix", help="run every configured pair, method, arch and seed")
    m.add_argument("--mode", choices=["uda", "ssda"], required=True)
    m.add_argument("--config", required=True)
    m.add_argument("--results", default=None)
    m.add_argument("--force", action="store_true")
    m.set_defaults(func=cmd_matrix)

    r = sub.add_parser("report", help="write one accuracy table per (mode, source)")
    r.add_argument("--results", required=True)
    r.add_argument("--format", choices=["csv", "md"], default="md")
    r.add_argument("--out", default=None, help="output directory (default: the results directory)")
    r.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, HarnessError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3 if isinstance(exc, DuplicateRowError) else 2


if __name__ == "__main__":
    sys.exit(main())
