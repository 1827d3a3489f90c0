"""Command line entry point.

    lanereduce run --nodes 2,4,8 --gpus-per-node 4 --algorithms ring,lane \\
        --counts 2^10..2^20 --out results/sweep.csv
    lanereduce verify --algorithms ring,ppg-lane --nodes 1,2
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from lanereduce.collectives import ALGORITHMS, INNER_ALGORITHMS
from lanereduce.costmodel import read_key_values
from lanereduce.errors import ConfigurationError
from lanereduce.experiment import (
    FILLS,
    MATRIX_COUNTS,
    MATRIX_GPUS,
    MATRIX_NODES,
    MATRIX_PPG,
    ExperimentConfig,
    run_experiment,
    verify_suite,
)


def parse_int(token: str) -> int:
    token = token.strip()
    if "^" in token:
        base, exp = token.split("^", 1)
        return int(base) ** int(exp)
    return int(token)


def parse_int_list(text: str) -> list[int]:
    """Comma list of integers; ``2^a..2^b`` expands to successive powers of two."""
    values = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo, hi = (parse_int(x) for x in part.split("..", 1))
            v = lo
            while v <= hi:
                values.append(v)
                v *= 2
        else:
            values.append(parse_int(part))
    return values


def parse_str_list(text: str) -> list[str]:
    return [p.strip() for p in text.split(",") if p.strip()]


def _bool(text: str) -> bool:
    return text.strip().lower() in ("1", "true", "yes", "on")


_CONVERTERS = {
    "nodes": parse_int_list,
    "gpus_per_node": parse_int_list,
    "ppg": parse_int_list,
    "counts": parse_int_list,
    "algorithms": parse_str_list,
    "fill": str,
    "seed": int,
    "inner": str,
    "cost_config": Path,
    "out": Path,
    "trace_out": Path,
    "verify": _bool,
    "repetitions": int,
    "max_count": parse_int,
    "max_world": parse_int,
}


def config_from_sources(file_values: dict[str, str], cli_values: dict) -> ExperimentConfig:
    """Defaults, then the config file, then explicit command-line flags."""
    merged = {}
    overrides = {}
    for key, raw in file_values.items():
        if key.startswith("cost."):
            overrides[key[len("cost."):]] = raw
            continue
        if key not in _CONVERTERS:
            raise ConfigurationError(key, "unknown configuration key")
        try:
            merged[key] = _CONVERTERS[key](raw)
        except ValueError as exc:
            raise ConfigurationError(key, str(exc)) from None
    merged.update({k: v for k, v in cli_values.items() if v is not None and k != "cost_overrides"})
    overrides.update(cli_values.get("cost_overrides") or {})
    return ExperimentConfig(**merged, cost_overrides=overrides)


def _typed(converter, name):
    def convert(text):
        try:
            return converter(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid value for {name}: {text!r}") from None

    return convert


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lanereduce", description="Simulate and model GPU-aware allreduce algorithms.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment sweep and write CSV/JSON reports")
    run.add_argument(
        "--config", type=Path, help="key=value file with the same keys as the flags; cost.KEY=VALUE sets cost parameters"
    )
    run.add_argument("--nodes", type=_typed(parse_int_list, "--nodes"))
    run.add_argument("--gpus-per-node", dest="gpus_per_node", type=_typed(parse_int_list, "--gpus-per-node"))
    run.add_argument("--ppg", type=_typed(parse_int_list, "--ppg"))
    run.add_argument("--algorithms", type=parse_str_list, help=f"comma list from {','.join(ALGORITHMS)}")
    run.add_argument("--counts", type=_typed(parse_int_list, "--counts"), help="e.g. 1024,4096 or 2^10..2^20")
    run.add_argument("--fill", choices=FILLS)
    run.add_argument("--seed", type=int)
    run.add_argument("--inner", choices=INNER_ALGORITHMS, help="inner allreduce for lane and ppg variants")
    run.add_argument("--cost-config", dest="cost_config", type=Path)
    run.add_argument("--cost", action="append", metavar="KEY=VALUE", help="override one cost parameter")
    run.add_argument("--out", type=Path, help="CSV path; JSON goes next to it")
    run.add_argument("--trace-out", dest="trace_out", type=Path, help="JSON-lines trace of every cell")
    run.add_argument("--verify", action="store_const", const=True, default=None)
    run.add_argument("--repetitions", type=int)
    run.add_argument("--max-count", dest="max_count", type=_typed(parse_int, "--max-count"))
    run.add_argument("--max-world", dest="max_world", type=_typed(parse_int, "--max-world"))

    ver = sub.add_parser("verify", help="oracle-equivalence and message-count matrix")
    ver.add_argument("--algorithms", type=parse_str_list, default=list(ALGORITHMS))
    ver.add_argument("--nodes", type=parse_int_list, default=list(MATRIX_NODES))
    ver.add_argument("--gpus-per-node", dest="gpus_per_node", type=parse_int_list, default=list(MATRIX_GPUS))
    ver.add_argument("--ppg", type=parse_int_list, default=list(MATRIX_PPG))
    ver.add_argument("--counts", type=parse_int_list, default=list(MATRIX_COUNTS))
    ver.add_argument("--fill", choices=FILLS, default="rand")
    ver.add_argument("--seed", type=int, default=42)
    ver.add_argument("--inner", choices=INNER_ALGORITHMS, default="ring")
    return parser


def _overrides(pairs):
    out = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigurationError("cost", f"expected KEY=VALUE, got {pair!r}")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _cmd_run(args) -> int:
    file_values = read_key_values(args.config) if args.config else {}
    cli_values = {k: getattr(args, k, None) for k in _CONVERTERS}
    cli_values["cost_overrides"] = _overrides(args.cost)
    config = config_from_sources(file_values, cli_values)
    report = run_experiment(config)
    if config.out is None:
        sys.stdout.write(report.csv_text())
    for cell in report.failures:
        print(f"FAIL {cell.failure}", file=sys.stderr)
    done = sum(c.status != "unsupported" for c in report.cells)
    print(f"{len(report.cells)} cells ({done} run), {len(report.failures)} failed", file=sys.stderr)
    return 0 if report.ok else 1


def _cmd_verify(args) -> int:
    unknown = [a for a in args.algorithms if a not in ALGORITHMS]
    if unknown:
        raise ConfigurationError("algorithms", f"unknown {unknown}")
    summary = verify_suite(
        args.algorithms, args.nodes, args.gpus_per_node, args.ppg, args.counts,
        fill=args.fill, seed=args.seed, inner=args.inner,
    )
    for line in summary.lines():
        print(line)
    return 0 if summary.ok else 1


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            return _cmd_run(args)
        return _cmd_verify(args)
    except ConfigurationError as exc:
        print(f"lanereduce: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
