"""Locality-aware latency/bandwidth cost model evaluated over event traces.

Timing is bulk-synchronous: within a trace step every rank accumulates the
cost of its messages (sends and receives overlap, so a rank pays the larger
of the two sums) plus its kernels, the step lasts as long as its slowest
rank, and steps run back to back.

A message of ``L`` elements costs ``alpha + L * beta * contention`` for its
locality class. Only inter-node messages contend: when ``k`` of them leave the
same node in one step, each pays ``max(1, k / nics_per_node)`` on bandwidth.

The default parameters are order-of-magnitude placeholders chosen to expose
orderings between algorithms. They are not fitted to any machine.
"""

from __future__ import annotations

import dataclasses
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from lanereduce.errors import ConfigurationError, TraceError
from lanereduce.simcore import INTER_NODE, INTRA_GPU, INTRA_NODE, LOCALITY_CLASSES, EventTrace, verify_pairing
from lanereduce.topology import TopologySpec


@dataclass(frozen=True)
class CostParams:
    alpha_intra_gpu: float = 0.0
    alpha_intra_node: float = 1e-6
    alpha_inter_node: float = 2e-6
    beta_intra_gpu: float = 1e-11
    beta_intra_node: float = 5e-11
    beta_inter_node: float = 4e-10
    nics_per_node: int = 1
    gamma_reduce: float = 1e-11
    kappa_kernel: float = 5e-6

    def __post_init__(self):
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if value < 0:
                raise ConfigurationError(f.name, f"must be >= 0, got {value}")
        if not isinstance(self.nics_per_node, int) or self.nics_per_node < 1:
            raise ConfigurationError("nics_per_node", f"must be a positive integer, got {self.nics_per_node!r}")
        if not self.alpha_inter_node >= self.alpha_intra_node >= self.alpha_intra_gpu:
            raise ConfigurationError(
                "alpha_inter_node",
                "latencies must satisfy alpha_inter_node >= alpha_intra_node >= alpha_intra_gpu",
            )

    def alpha(self, cls: str) -> float:
        return {INTRA_GPU: self.alpha_intra_gpu, INTRA_NODE: self.alpha_intra_node, INTER_NODE: self.alpha_inter_node}[cls]

    def beta(self, cls: str) -> float:
        return {INTRA_GPU: self.beta_intra_gpu, INTRA_NODE: self.beta_intra_node, INTER_NODE: self.beta_inter_node}[cls]

    def scaled(self, k: float) -> CostParams:
        """Every time parameter multiplied by ``k``."""
        changes = {f.name: getattr(self, f.name) * k for f in dataclasses.fields(self) if f.name != "nics_per_node"}
        return dataclasses.replace(self, **changes)

    def with_overrides(self, overrides: Mapping[str, str | float | int]) -> CostParams:
        names = {f.name: f for f in dataclasses.fields(self)}
        changes = {}
        for key, raw in overrides.items():
            if key not in names:
                raise ConfigurationError(key, "unknown cost parameter")
            try:
                changes[key] = int(raw) if key == "nics_per_node" else float(raw)
            except ValueError:
                raise ConfigurationError(key, f"not a number: {raw!r}") from None
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_file(cls, path: str | Path, base: CostParams | None = None) -> CostParams:
        return (base or cls()).with_overrides(read_key_values(path))


def read_key_values(path: str | Path) -> dict[str, str]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are ignored."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigurationError(str(path), f"line {lineno}: expected key=value, got {line!r}")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


@dataclass
class TraceStats:
    messages: dict[str, int]
    elements: dict[str, int]
    kernels: int
    kernel_elements: int

    @property
    def messages_total(self) -> int:
        return sum(self.messages.values())

    @property
    def elements_total(self) -> int:
        return sum(self.elements.values())

    @property
    def mean_message_size(self) -> float:
        return self.elements_total / self.messages_total if self.messages_total else 0.0


def trace_stats(trace: EventTrace) -> TraceStats:
    messages = dict.fromkeys(LOCALITY_CLASSES, 0)
    elements = dict.fromkeys(LOCALITY_CLASSES, 0)
    kernels = kernel_elements = 0
    for e in trace.events:
        if e.kind == "send":
            messages[e.locality_class] += 1
            elements[e.locality_class] += e.count
        elif e.kind in ("reduce", "copy"):
            kernels += 1
            kernel_elements += e.count
    return TraceStats(messages, elements, kernels, kernel_elements)


@dataclass
class ModeledTime:
    total_seconds: float
    per_stage: dict[str, float]
    messages: dict[str, int]
    elements: dict[str, int]
    steps: int
    kernels: int

    @property
    def messages_total(self) -> int:
        return sum(self.messages.values())


def evaluate(trace: EventTrace, spec: TopologySpec, params: CostParams | None = None) -> ModeledTime:
    params = params or CostParams()
    world = spec.world_size
    node_of = [r // (spec.gpus_per_node * spec.ppg) for r in range(world)]
    verify_pairing(trace.events)

    by_step: dict[int, list] = defaultdict(list)
    for e in trace.events:
        if e.kind not in ("send", "recv", "reduce", "copy"):
            raise TraceError(f"unknown event kind {e.kind!r}")
        if not (0 <= e.src < world and 0 <= e.dst < world) or e.count < 0 or e.step < 0:
            raise TraceError(f"malformed event {e}")
        if e.kind == "send" and e.locality_class not in LOCALITY_CLASSES:
            raise TraceError(f"unknown locality class in {e}")
        if e.kind != "recv":
            by_step[e.step].append(e)

    total = 0.0
    per_stage: dict[str, float] = defaultdict(float)
    for step in sorted(by_step):
        events = by_step[step]
        leaving: dict[int, int] = defaultdict(int)
        for e in events:
            if e.kind == "send" and e.locality_class == INTER_NODE:
                leaving[node_of[e.src]] += 1
        sent: dict[int, float] = defaultdict(float)
        received: dict[int, float] = defaultdict(float)
        compute: dict[int, float] = defaultdict(float)
        for e in events:
            if e.kind == "send":
                cls = e.locality_class
                contention = 1.0
                if cls == INTER_NODE:
                    contention = max(1.0, leaving[node_of[e.src]] / params.nics_per_node)
                cost = params.alpha(cls) + e.count * params.beta(cls) * contention
                sent[e.src] += cost
                received[e.dst] += cost
            else:
                compute[e.src] += params.kappa_kernel + e.count * params.gamma_reduce
        ranks = set(sent) | set(received) | set(compute)
        step_time = max(max(sent[r], received[r]) + compute[r] for r in ranks)
        total += step_time
        lead = next((e for e in events if e.kind == "send"), events[0])
        per_stage[lead.stage or "other"] += step_time

    stats = trace_stats(trace)
    return ModeledTime(
        total_seconds=total,
        per_stage=dict(per_stage),
        messages=stats.messages,
        elements=stats.elements,
        steps=len(by_step),
        kernels=stats.kernels,
    )


@dataclass
class SweepRow:
    algorithm: str
    nodes: int
    gpus_per_node: int
    ppg: int
    count: int
    total_seconds: float | None
    inter_node_elements: int | None
    intra_node_elements: int | None
    messages_total: int | None
    kernels_total: int | None
    digest: str | None = field(default=None, repr=False)

    @property
    def key(self) -> tuple:
        return (self.algorithm, self.nodes, self.gpus_per_node, self.ppg, self.count)

    @property
    def supported(self) -> bool:
        return self.total_seconds is not None


CSV_COLUMNS = (
    "algorithm",
    "nodes",
    "gpus_per_node",
    "ppg",
    "count",
    "total_seconds",
    "inter_node_elements",
    "intra_node_elements",
    "messages_total",
    "kernels_total",
)


def row_for(algorithm: str, spec: TopologySpec, count: int, trace: EventTrace | None, params: CostParams) -> SweepRow:
    if trace is None:
        return SweepRow(algorithm, spec.nodes, spec.gpus_per_node, spec.ppg, count, None, None, None, None, None)
    modeled = evaluate(trace, spec, params)
    return SweepRow(
        algorithm,
        spec.nodes,
        spec.gpus_per_node,
        spec.ppg,
        count,
        modeled.total_seconds,
        modeled.elements[INTER_NODE],
        modeled.elements[INTRA_NODE] + modeled.elements[INTRA_GPU],
        modeled.messages_total,
        modeled.kernels,
        trace.digest(),
    )


def sweep(
    algorithms: Sequence[str],
    sizes: Sequence[int],
    topologies: Iterable[TopologySpec],
    params: CostParams | None = None,
    inner: str = "ring",
) -> list[SweepRow]:
    """Model every (algorithm, topology, size) cell; rows come back sorted by key.

    Cells an algorithm cannot run (recursive doubling on a non-power-of-two
    communicator) yield rows with empty metrics.
    """
    from lanereduce.collectives import run_allreduce, supports

    params = params or CostParams()
    topologies = list(topologies)
    if not algorithms or not sizes or not topologies:
        raise ConfigurationError("sweep", "every axis needs at least one value")
    rows = []
    for algorithm in algorithms:
        for spec in topologies:
            for count in sizes:
                trace = None
                if supports(algorithm, spec, inner):
                    trace = run_allreduce(spec, algorithm, count, inner=inner, move_data=False).trace
                rows.append(row_for(algorithm, spec, count, trace, params))
    rows.sort(key=lambda r: r.key)
    return rows
