"""Command line entry point: ``drcil run|sweep|report|selftest``.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime
failure (training error, I/O error, failing selftest).
"""
from __future__ import annotations

import argparse
import itertools
import logging
import sys
from pathlib import Path

from ..datastream import DataError
from ..pipelines import PipelineError, run_experiment
from .config import ConfigError, RunConfig, parse_config, parse_seeds
from .reporting import ReportError, emit_results, load_results, summarize, write_summary
from .selftest import run_selftest

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _load(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else RunConfig().validate()
    return cfg.with_overrides(args.override or [])


def _out_dir(args, cfg: RunConfig) -> Path:
    return Path(args.out or cfg["output.dir"])


def _run_one(cfg: RunConfig, seed: int):
    stream = cfg.build_stream(seed)
    result = run_experiment(stream, cfg.pipeline_config(seed))
    # seed lives at the top level so seed sweeps group into one summary row
    result.config["run_config"] = {k: v for k, v in cfg.as_dict().items() if k != "seed"}
    return result


def _print_summary(results, out: Path) -> None:
    rows = summarize(results)
    write_summary(rows, out)
    for row in rows:
        print(row.format())


def cmd_run(args) -> int:
    cfg = _load(args)
    seed = cfg["seed"] if args.seed is None else args.seed
    result = _run_one(cfg, seed)
    out = _out_dir(args, cfg)
    emit_results([result], out)
    accs = " ".join(f"{100 * a:.2f}" for a in result.accuracies)
    print(f"seed {seed}: steps [{accs}] Avg {100 * result.avg_accuracy:.2f} Last {100 * result.last_accuracy:.2f}")
    print(f"results appended to {out}")
    return EXIT_OK


def _grid(pairs: list[str]) -> list[list[str]]:
    axes = []
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(pair, "grid axis must look like key=v1,v2")
        key, values = pair.split("=", 1)
        axes.append([f"{key.strip()}={v.strip()}" for v in values.split(",") if v.strip()])
    return [list(combo) for combo in itertools.product(*axes)] if axes else [[]]


def cmd_sweep(args) -> int:
    base = _load(args)
    seeds = parse_seeds(args.seeds) if args.seeds else base["seeds"]
    out = _out_dir(args, base)
    results = []
    for overrides in _grid(args.grid or []):
        cfg = base.with_overrides(overrides)
        for seed in seeds:
            r = _run_one(cfg, seed)
            emit_results([r], out)
            results.append(r)
            tag = " ".join(overrides) or "base"
            print(f"[{tag}] seed {seed}: Avg {100 * r.avg_accuracy:.2f} Last {100 * r.last_accuracy:.2f}")
    _print_summary(results, out)
    return EXIT_OK


def cmd_report(args) -> int:
    source = Path(args.results or args.out or "results")
    results = load_results(source)
    if not results:
        print(f"no records in {source}", file=sys.stderr)
        return EXIT_RUNTIME
    out = Path(args.out) if args.out else (source if source.is_dir() else source.parent)
    _print_summary(results, out)
    return EXIT_OK


def cmd_selftest(args) -> int:
    return EXIT_OK if run_selftest() else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drcil", description="Class-incremental experiments with dynamic residual classifiers.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-task progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--out", help="output directory (default: output.dir)")
        p.add_argument("--override", action="append", metavar="KEY=VALUE", help="override one config key")

    p = sub.add_parser("run", help="one experiment")
    common(p)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="seeds times an optional config grid")
    common(p)
    p.add_argument("--seeds", help="A..B or a comma list (default: the seeds key)")
    p.add_argument("--grid", action="append", metavar="KEY=V1,V2", help="sweep a key over values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="rebuild summaries from stored records")
    p.add_argument("--results", help="results.jsonl or its directory")
    p.add_argument("--out", help="where to write summary.csv")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("selftest", help="run the invariant suite")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (PipelineError, ReportError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
