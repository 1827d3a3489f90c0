"""Experiment runner: execute cells, verify against the oracle, model cost, write reports."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from lanereduce.collectives import ALGORITHMS, INNER_ALGORITHMS, oracle_allreduce, run_allreduce, supports
from lanereduce.costmodel import CSV_COLUMNS, CostParams, SweepRow, row_for
from lanereduce.errors import ConfigurationError
from lanereduce.simcore import Programs
from lanereduce.topology import TopologySpec

log = logging.getLogger(__name__)

FILLS = ("ones", "ramp", "rand", "seeded-random-int")
DEFAULT_MAX_COUNT = 2**20
DEFAULT_MAX_WORLD = 512

MATRIX_NODES = (1, 2, 4, 8)
MATRIX_GPUS = (1, 2, 4)
MATRIX_PPG = (1, 2, 4)
MATRIX_COUNTS = (1, 7, 64, 4096, 65536)


@dataclass
class ExperimentConfig:
    nodes: list[int] = field(default_factory=lambda: [8])
    gpus_per_node: list[int] = field(default_factory=lambda: [4])
    ppg: list[int] = field(default_factory=lambda: [1])
    algorithms: list[str] = field(default_factory=lambda: ["ring", "lane"])
    counts: list[int] = field(default_factory=lambda: [2**k for k in range(10, 21)])
    fill: str = "ones"
    seed: int = 42
    inner: str = "ring"
    cost_config: Path | None = None
    cost_overrides: dict[str, str] = field(default_factory=dict)
    out: Path | None = None
    trace_out: Path | None = None
    verify: bool = False
    repetitions: int = 1
    max_count: int = DEFAULT_MAX_COUNT
    max_world: int = DEFAULT_MAX_WORLD

    def validate(self) -> None:
        for name in ("nodes", "gpus_per_node", "ppg", "algorithms", "counts"):
            if not getattr(self, name):
                raise ConfigurationError(name, "axis must not be empty")
        for name in ("nodes", "gpus_per_node", "ppg"):
            bad = [v for v in getattr(self, name) if v < 1]
            if bad:
                raise ConfigurationError(name, f"values must be >= 1, got {bad}")
        unknown = [a for a in self.algorithms if a not in ALGORITHMS]
        if unknown:
            raise ConfigurationError("algorithms", f"unknown {unknown}; expected a subset of {list(ALGORITHMS)}")
        if self.inner not in INNER_ALGORITHMS:
            raise ConfigurationError("inner", f"expected one of {INNER_ALGORITHMS}, got {self.inner!r}")
        if self.fill not in FILLS:
            raise ConfigurationError("fill", f"expected one of {FILLS}, got {self.fill!r}")
        if any(c < 1 for c in self.counts):
            raise ConfigurationError("counts", "counts must be >= 1")
        if max(self.counts) > self.max_count:
            raise ConfigurationError("counts", f"{max(self.counts)} exceeds the cap of {self.max_count} (raise --max-count)")
        world = max(self.nodes) * max(self.gpus_per_node) * max(self.ppg)
        if world > self.max_world:
            raise ConfigurationError("nodes", f"world size {world} exceeds the cap of {self.max_world} (raise --max-world)")
        if self.repetitions < 1:
            raise ConfigurationError("repetitions", f"must be >= 1, got {self.repetitions}")

    def cost_params(self) -> CostParams:
        params = CostParams.from_file(self.cost_config) if self.cost_config else CostParams()
        return params.with_overrides(self.cost_overrides) if self.cost_overrides else params

    def topologies(self) -> list[TopologySpec]:
        return [
            TopologySpec(n, g, q)
            for n, g, q in itertools.product(sorted(set(self.nodes)), sorted(set(self.gpus_per_node)), sorted(set(self.ppg)))
        ]


@dataclass
class CellResult:
    row: SweepRow
    status: str  # "ok" | "failed" | "unsupported"
    failure: str | None = None
    digests: list[str] = field(default_factory=list)

    @property
    def failed(self) -> bool:
        return self.status == "failed"


@dataclass
class ExperimentReport:
    cells: list[CellResult]
    params: CostParams

    @property
    def ok(self) -> bool:
        return not any(c.failed for c in self.cells)

    @property
    def failures(self) -> list[CellResult]:
        return [c for c in self.cells if c.failed]

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for cell in self.cells:
            row = asdict(cell.row)
            writer.writerow(["" if row[c] is None else _fmt(row[c]) for c in CSV_COLUMNS])
        return buf.getvalue()

    def json_obj(self) -> dict:
        return {
            "params": asdict(self.params),
            "ok": self.ok,
            "cells": [
                {
                    **{c: getattr(cell.row, c) for c in CSV_COLUMNS},
                    "status": cell.status,
                    "failure": cell.failure,
                    "trace_digests": cell.digests,
                }
                for cell in self.cells
            ],
        }


def _fmt(value) -> str:
    return repr(value) if isinstance(value, float) else str(value)


class _OracleCache:
    def __init__(self):
        self._cache: dict[tuple, np.ndarray] = {}

    def get(self, inputs: Sequence[np.ndarray], key: tuple) -> np.ndarray:
        if key not in self._cache:
            self._cache[key] = oracle_allreduce(inputs)
        return self._cache[key]


def first_mismatch(outputs: Sequence[np.ndarray], expected: np.ndarray) -> str | None:
    for gpu, out in enumerate(outputs):
        bad = np.flatnonzero(~(out == expected))
        if bad.size:
            i = int(bad[0])
            return f"GPU {gpu} first differing element index {i}: got {float(out[i])}, expected {float(expected[i])}"
    return None


def expected_sends(algorithm: str, spec: TopologySpec, inner: str = "ring") -> list[int]:
    """Closed-form per-rank send counts (ranks idle in an algorithm send nothing)."""
    p, n_group, nodes = spec.gpu_count, spec.gpus_per_node, spec.nodes

    def flat(name: str, n: int) -> int:
        if name == "rd":
            return int(math.log2(n))
        return 2 * (n - 1)

    def lane() -> int:
        return 2 * (n_group - 1) + flat(inner, nodes)

    per_rank = {
        "ring": flat("ring", p),
        "rabenseifner": flat("ring", p),
        "rd": flat("rd", p) if p & (p - 1) == 0 else None,
        "lane": lane(),
        "ppg-standard": flat(inner, p),
        "ppg-lane": lane(),
    }[algorithm]
    if algorithm.startswith("ppg-"):
        return [per_rank] * spec.world_size
    return [per_rank if r % spec.ppg == 0 else 0 for r in range(spec.world_size)]


def run_cell(
    algorithm: str,
    spec: TopologySpec,
    count: int,
    *,
    params: CostParams,
    fill: str = "ones",
    seed: int = 42,
    inner: str = "ring",
    verify: bool = False,
    repetitions: int = 1,
    oracle: _OracleCache | None = None,
    transform: Callable[[Programs], Programs] | None = None,
    trace_sink: Callable | None = None,
) -> CellResult:
    if not supports(algorithm, spec, inner):
        return CellResult(row_for(algorithm, spec, count, None, params), "unsupported")
    oracle = oracle or _OracleCache()
    failure = None
    digests = []
    first = None
    for _ in range(repetitions):
        result = run_allreduce(spec, algorithm, count, fill, seed, inner, move_data=verify, transform=transform)
        digests.append(result.trace.digest())
        if first is None:
            first = result
            if verify:
                expected = oracle.get(result.inputs, (spec.gpu_count, count, fill, seed))
                mismatch = first_mismatch(result.outputs, expected)
                if mismatch:
                    failure = f"{algorithm} {spec} count={count}: {mismatch}"
                elif result.trace.sends_per_rank(spec.world_size) != expected_sends(algorithm, spec, inner):
                    failure = f"{algorithm} {spec} count={count}: per-rank send counts differ from closed form"
    if failure is None and len(set(digests)) > 1:
        failure = f"{algorithm} {spec} count={count}: trace digests differ across repetitions"
    if trace_sink is not None:
        trace_sink(algorithm, spec, count, first.trace)
    row = row_for(algorithm, spec, count, first.trace, params)
    return CellResult(row, "failed" if failure else "ok", failure, digests)


def run_experiment(config: ExperimentConfig) -> ExperimentReport:
    """Run every cell of ``config`` and write the requested reports.

    Cells are ordered by (algorithm, nodes, gpus_per_node, ppg, count), so the
    output is byte-identical between runs.
    """
    config.validate()
    params = config.cost_params()
    oracle = _OracleCache()
    trace_file = None
    if config.trace_out:
        Path(config.trace_out).parent.mkdir(parents=True, exist_ok=True)
        trace_file = open(config.trace_out, "w")

    def sink(algorithm, spec, count, trace):
        head = {"algorithm": algorithm, "nodes": spec.nodes, "gpus_per_node": spec.gpus_per_node,
                "ppg": spec.ppg, "count": count}
        for e in trace.events:
            trace_file.write(json.dumps({**head, **e.to_dict()}, separators=(",", ":")) + "\n")

    cells = []
    try:
        for algorithm in sorted(set(config.algorithms)):
            for spec in config.topologies():
                for count in sorted(set(config.counts)):
                    cell = run_cell(
                        algorithm, spec, count,
                        params=params, fill=config.fill, seed=config.seed, inner=config.inner,
                        verify=config.verify, repetitions=config.repetitions, oracle=oracle,
                        trace_sink=sink if trace_file else None,
                    )
                    if cell.failed:
                        log.error("verification failed: %s", cell.failure)
                    cells.append(cell)
    finally:
        if trace_file:
            trace_file.close()

    report = ExperimentReport(cells, params)
    if config.out:
        out = Path(config.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(report.csv_text())
        json_path = out.with_suffix(".json") if out.suffix == ".csv" else out.with_name(out.name + ".json")
        json_path.write_text(json.dumps(report.json_obj(), indent=2, sort_keys=True) + "\n")
    return report


@dataclass
class VerifySummary:
    cells: int
    passed: dict[str, int]
    total: dict[str, int]
    failures: list[str]
    skipped: int = 0

    @property
    def ok(self) -> bool:
        return not self.failures

    def lines(self) -> list[str]:
        if self.cells == 0:
            return ["warning: 0 cells selected"]
        out = [f"{alg:>13}: {self.passed[alg]}/{self.total[alg]} passed" for alg in self.total]
        out.append(f"{self.cells} cells, {self.skipped} unsupported, {len(self.failures)} failed")
        out.extend(f"FAIL {f}" for f in self.failures)
        return out


def verify_suite(
    algorithms: Iterable[str] = ALGORITHMS,
    nodes: Iterable[int] = MATRIX_NODES,
    gpus_per_node: Iterable[int] = MATRIX_GPUS,
    ppg: Iterable[int] = MATRIX_PPG,
    counts: Iterable[int] = MATRIX_COUNTS,
    *,
    fill: str = "rand",
    seed: int = 42,
    inner: str = "ring",
    transform: Callable[[Programs], Programs] | None = None,
) -> VerifySummary:
    """Oracle-equivalence and closed-form send-count checks over a matrix of cells."""
    algorithms = list(algorithms)
    topologies = [TopologySpec(n, g, q) for n, g, q in itertools.product(nodes, gpus_per_node, ppg)]
    counts = list(counts)
    params = CostParams()
    oracle = _OracleCache()
    passed = dict.fromkeys(algorithms, 0)
    total = dict.fromkeys(algorithms, 0)
    failures = []
    cells = skipped = 0
    for algorithm in algorithms:
        for spec in topologies:
            for count in counts:
                cells += 1
                cell = run_cell(
                    algorithm, spec, count, params=params, fill=fill, seed=seed, inner=inner,
                    verify=True, oracle=oracle, transform=transform,
                )
                if cell.status == "unsupported":
                    skipped += 1
                    continue
                total[algorithm] += 1
                if cell.failed:
                    failures.append(cell.failure)
                else:
                    passed[algorithm] += 1
    if cells == 0:
        log.warning("0 cells selected")
    return VerifySummary(cells, passed, total, failures, skipped)
