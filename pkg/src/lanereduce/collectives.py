"""Allreduce algorithms as rank-program generators.

Every generator takes a communicator (ordered member ranks) plus per-member
send/receive :class:`~lanereduce.simcore.Region` maps and appends actions to a
:class:`~lanereduce.simcore.Programs` mapping, so stages compose by passing the
same mapping along. Nothing here looks at payload values.

Tags are ``(algorithm << 24) | (stage << 16) | step`` so messages of different
stages can never match each other.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from lanereduce.buffers import IpcRegistry, even_split, make_fill
from lanereduce.errors import ConfigurationError, ProtocolError, UnsupportedSizeError
from lanereduce.simcore import EventTrace, Programs, Region
from lanereduce.simcore import run as run_programs
from lanereduce.topology import CommunicatorMap, TopologySpec, build_communicators, leaders, rank_info

ALGORITHMS = ("ring", "rd", "rabenseifner", "lane", "ppg-standard", "ppg-lane")
INNER_ALGORITHMS = ("ring", "rd")
_ALG_IDS = {name: i + 1 for i, name in enumerate(ALGORITHMS)}

STAGE_REDUCE_SCATTER = 1
STAGE_LANE = 2
STAGE_ALLGATHER = 3


def make_tag(algorithm: str, stage: int = 0, step: int = 0) -> int:
    return (_ALG_IDS[algorithm] << 24) | (stage << 16) | step


@dataclass(frozen=True)
class ChunkPlan:
    counts: tuple[int, ...]
    displs: tuple[int, ...]
    base_chunk: int

    @property
    def total(self) -> int:
        return sum(self.counts)

    def __len__(self) -> int:
        return len(self.counts)


def compute_chunk_plan(c_buf: int, n: int) -> ChunkPlan:
    if n < 1:
        raise ConfigurationError("n", f"communicator size must be >= 1, got {n}")
    if c_buf < 0:
        raise ConfigurationError("c_buf", f"element count must be >= 0, got {c_buf}")
    counts = even_split(c_buf, n)
    displs = [0] * n
    for i in range(1, n):
        displs[i] = displs[i - 1] + counts[i - 1]
    return ChunkPlan(tuple(counts), tuple(displs), c_buf // n)


def _chunk(region: Region, plan: ChunkPlan, i: int) -> Region:
    return region.sub(plan.displs[i], plan.counts[i])


def _common_length(comm: Sequence[int], *maps: Mapping[int, Region]) -> int:
    lengths = {m[r].length for m in maps for r in comm}
    if len(lengths) != 1:
        raise ProtocolError(f"members of {tuple(comm)} passed views of different lengths {sorted(lengths)}")
    return lengths.pop()


def _check_plan(plan: ChunkPlan, length: int, n: int) -> None:
    if len(plan) != n or plan.total != length:
        raise ProtocolError(f"chunk plan {plan.counts} does not fit {n} members x {length} elements")


# -- ring building blocks -----------------------------------------------------------


def _ring_reduce_loop(prog, comm, idx, send, recv, plan, first, tag, stage) -> None:
    """n-1 reduce steps; afterwards chunk ``first + 1`` of ``recv`` is fully reduced.

    Each step sends chunk ``sp`` (from ``send`` on the first step, then from
    ``recv``) to the next member, receives chunk ``rp`` from the previous one
    into ``recv`` and adds the local ``send`` contribution to it.
    """
    n = len(comm)
    nxt, prv = comm[(idx + 1) % n], comm[(idx - 1) % n]
    sp, rp = first % n, (first - 1) % n
    source = send
    for i in range(n - 1):
        prog.send(nxt, tag + i, _chunk(source, plan, sp), stage)
        prog.recv(prv, tag + i, _chunk(recv, plan, rp), stage)
        prog.wait()
        prog.reduce(_chunk(recv, plan, rp), _chunk(send, plan, rp), stage)
        sp, rp = (sp - 1) % n, (rp - 1) % n
        source = recv


def _ring_gather_loop(prog, comm, idx, buf, plan, owned, tag, stage) -> None:
    n = len(comm)
    nxt, prv = comm[(idx + 1) % n], comm[(idx - 1) % n]
    sp, rp = owned % n, (owned - 1) % n
    for i in range(n - 1):
        prog.send(nxt, tag + i, _chunk(buf, plan, sp), stage)
        prog.recv(prv, tag + i, _chunk(buf, plan, rp), stage)
        prog.wait()
        sp, rp = (sp - 1) % n, (rp - 1) % n


def _copy_if_distinct(prog, dst: Region, src: Region, stage: str) -> None:
    if dst != src and dst.length:
        prog.copy(dst, src, stage)


# -- algorithms -------------------------------------------------------------------


def ring_allreduce(
    comm: Sequence[int],
    send: Mapping[int, Region],
    recv: Mapping[int, Region],
    out: Programs | None = None,
    *,
    tag: int | None = None,
    stage: str = "allreduce",
) -> Programs:
    """Ring allreduce: reduce loop then gather loop, 2(n-1) sends per member.

    Member ``r`` starts sending its own chunk ``r`` and finishes the reduce loop
    holding chunk ``r + 1``. When ``send`` and ``recv`` are the same region the
    input is first copied to scratch.
    """
    out = Programs() if out is None else out
    tag = make_tag("ring") if tag is None else tag
    n = len(comm)
    length = _common_length(comm, send, recv)
    plan = compute_chunk_plan(length, n)
    for idx, r in enumerate(comm):
        prog = out[r]
        src, dst = send[r], recv[r]
        if n == 1:
            _copy_if_distinct(prog, dst, src, stage)
            continue
        if src == dst:
            src = prog.scratch(length)
            prog.copy(src, dst, stage)
        _ring_reduce_loop(prog, comm, idx, src, dst, plan, idx, tag, stage)
        _ring_gather_loop(prog, comm, idx, dst, plan, idx + 1, tag + n - 1, stage)
    return out


def recursive_doubling_allreduce(
    comm: Sequence[int],
    send: Mapping[int, Region],
    recv: Mapping[int, Region],
    out: Programs | None = None,
    *,
    tag: int | None = None,
    stage: str = "allreduce",
) -> Programs:
    out = Programs() if out is None else out
    tag = make_tag("rd") if tag is None else tag
    n = len(comm)
    if n & (n - 1):
        raise UnsupportedSizeError(f"recursive doubling needs a power-of-two communicator, got {n}")
    length = _common_length(comm, send, recv)
    rounds = n.bit_length() - 1
    for idx, r in enumerate(comm):
        prog = out[r]
        dst = recv[r]
        _copy_if_distinct(prog, dst, send[r], stage)
        if rounds == 0:
            continue
        tmp = prog.scratch(length)
        for k in range(rounds):
            partner = comm[idx ^ (1 << k)]
            prog.send(partner, tag + k, dst, stage)
            prog.recv(partner, tag + k, tmp, stage)
            prog.wait()
            prog.reduce(dst, tmp, stage)
    return out


def reduce_scatter_ring(
    comm: Sequence[int],
    send: Mapping[int, Region],
    recv: Mapping[int, Region],
    plan: ChunkPlan | None = None,
    out: Programs | None = None,
    *,
    tag: int | None = None,
    stage: str = "reduce_scatter",
) -> Programs:
    """Member ``i`` ends with the fully reduced chunk ``i`` at ``recv[D[i]]``."""
    out = Programs() if out is None else out
    tag = make_tag("rabenseifner", STAGE_REDUCE_SCATTER) if tag is None else tag
    n = len(comm)
    length = _common_length(comm, send, recv)
    plan = compute_chunk_plan(length, n) if plan is None else plan
    _check_plan(plan, length, n)
    for idx, r in enumerate(comm):
        prog = out[r]
        if n == 1:
            _copy_if_distinct(prog, recv[r], send[r], stage)
            continue
        if send[r].overlaps(recv[r]):
            raise ProtocolError(f"reduce-scatter on rank {r} needs distinct send and recv regions")
        _ring_reduce_loop(prog, comm, idx, send[r], recv[r], plan, idx - 1, tag, stage)
    return out


def allgatherv_ring(
    comm: Sequence[int],
    view: Mapping[int, Region],
    plan: ChunkPlan | None = None,
    out: Programs | None = None,
    *,
    tag: int | None = None,
    stage: str = "allgather",
) -> Programs:
    """Member ``i`` contributes chunk ``i`` of its view; all members end with every chunk."""
    out = Programs() if out is None else out
    tag = make_tag("rabenseifner", STAGE_ALLGATHER) if tag is None else tag
    n = len(comm)
    length = _common_length(comm, view)
    plan = compute_chunk_plan(length, n) if plan is None else plan
    _check_plan(plan, length, n)
    if n == 1:
        out[comm[0]]
        return out
    for idx, r in enumerate(comm):
        _ring_gather_loop(out[r], comm, idx, view[r], plan, idx, tag, stage)
    return out


def rabenseifner_allreduce(
    comm: Sequence[int],
    send: Mapping[int, Region],
    recv: Mapping[int, Region],
    out: Programs | None = None,
    *,
    tag: int | None = None,
) -> Programs:
    """Reduce-scatter followed by allgather, both as rings."""
    out = Programs() if out is None else out
    base = make_tag("rabenseifner") if tag is None else tag
    length = _common_length(comm, send, recv)
    plan = compute_chunk_plan(length, len(comm))
    reduce_scatter_ring(comm, send, recv, plan, out, tag=base | (STAGE_REDUCE_SCATTER << 16))
    allgatherv_ring(comm, recv, plan, out, tag=base | (STAGE_ALLGATHER << 16))
    return out


_FLAT = {
    "ring": ring_allreduce,
    "rd": recursive_doubling_allreduce,
    "rabenseifner": rabenseifner_allreduce,
}


def _inner(name: str):
    if name not in INNER_ALGORITHMS:
        raise ConfigurationError("inner", f"unknown inner algorithm {name!r}; expected one of {INNER_ALGORITHMS}")
    return _FLAT[name]


def lane_allreduce(
    cmap: CommunicatorMap,
    send: Mapping[int, Region],
    recv: Mapping[int, Region],
    out: Programs | None = None,
    *,
    inner: str = "ring",
) -> Programs:
    """Three-stage lane allreduce over the ranks present in ``send``.

    1. ring reduce-scatter within each ``comm_group`` (on-node),
    2. allreduce of each member's reduced chunk over its ``comm_lane``,
    3. ring allgatherv within each ``comm_group``.

    Only stage 2 crosses nodes.
    """
    out = Programs() if out is None else out
    inner_fn = _inner(inner)
    ranks = sorted(send)
    groups = sorted({cmap.comm_group[r] for r in ranks})
    lanes = sorted({cmap.comm_lane[r] for r in ranks})
    missing = {m for comm in groups + lanes for m in comm} - set(ranks)
    if missing:
        raise ProtocolError(f"lane allreduce is missing participants {sorted(missing)}")
    base = make_tag("lane")
    # slices of different local ranks may differ in length by one element
    plans = {}
    for group in groups:
        plans[group] = compute_chunk_plan(_common_length(group, send, recv), len(group))

    for group in groups:
        reduce_scatter_ring(group, send, recv, plans[group], out, tag=base | (STAGE_REDUCE_SCATTER << 16))
    for lane in lanes:
        chunks = {}
        for m in lane:
            group = cmap.comm_group[m]
            chunks[m] = _chunk(recv[m], plans[group], group.index(m))
        inner_fn(lane, chunks, chunks, out, tag=base | (STAGE_LANE << 16), stage="lane")
    for group in groups:
        allgatherv_ring(group, recv, plans[group], out, tag=base | (STAGE_ALLGATHER << 16))
    return out


def multi_ppg_standard(
    cmap: CommunicatorMap,
    send_registry: IpcRegistry,
    recv_registry: IpcRegistry,
    inner: str = "ring",
    out: Programs | None = None,
) -> Programs:
    """Every local rank runs ``inner`` over its ``new_comm`` on its own slice of the GPU buffer."""
    out = Programs() if out is None else out
    inner_fn = _inner(inner)
    for lr, comm in sorted(cmap.new_comm.items()):
        send, recv = _views(cmap, comm, send_registry, recv_registry)
        # new_comms are disjoint, so the inner algorithm's own tags cannot collide
        inner_fn(comm, send, recv, out)
    return out


def multi_ppg_lane(
    cmap: CommunicatorMap,
    send_registry: IpcRegistry,
    recv_registry: IpcRegistry,
    inner: str = "ring",
    out: Programs | None = None,
) -> Programs:
    """Lane allreduce per local rank, each on its own slice of the GPU buffer."""
    out = Programs() if out is None else out
    send, recv = _views(cmap, cmap.world, send_registry, recv_registry)
    return lane_allreduce(cmap, send, recv, out, inner=inner)


def _views(cmap, ranks, send_registry, recv_registry, ppg=None):
    send, recv = {}, {}
    for r in ranks:
        info = cmap.infos[r]
        send[r] = send_registry.open_view(info, ppg).region
        recv[r] = recv_registry.open_view(info, ppg).region
    return send, recv


def build_programs(
    algorithm: str,
    cmap: CommunicatorMap,
    send_registry: IpcRegistry,
    recv_registry: IpcRegistry,
    inner: str = "ring",
) -> Programs:
    """Programs for ``algorithm`` over buffers already published in the registries.

    The single-process-per-GPU algorithms run on the leaders with whole-buffer
    views; with ``ppg > 1`` the other processes stay idle.
    """
    if algorithm == "ppg-standard":
        return multi_ppg_standard(cmap, send_registry, recv_registry, inner)
    if algorithm == "ppg-lane":
        return multi_ppg_lane(cmap, send_registry, recv_registry, inner)
    comm = tuple(leaders(cmap.spec))
    send, recv = _views(cmap, comm, send_registry, recv_registry, ppg=1)
    if algorithm == "lane":
        return lane_allreduce(cmap, send, recv, inner=inner)
    if algorithm in _FLAT:
        return _FLAT[algorithm](comm, send, recv)
    raise ConfigurationError("algorithm", f"unknown algorithm {algorithm!r}; expected one of {ALGORITHMS}")


def supports(algorithm: str, spec: TopologySpec, inner: str = "ring") -> bool:
    """False when the cell needs recursive doubling over a non-power-of-two communicator."""
    def pow2(n):
        return n & (n - 1) == 0

    if algorithm == "rd":
        return pow2(spec.gpu_count)
    if algorithm in ("lane", "ppg-lane") and inner == "rd":
        return pow2(spec.nodes)
    if algorithm == "ppg-standard" and inner == "rd":
        return pow2(spec.gpu_count)
    return True


# -- running ----------------------------------------------------------------------


@dataclass
class AllreduceRun:
    spec: TopologySpec
    algorithm: str
    count: int
    trace: EventTrace
    inputs: list[np.ndarray] = field(repr=False)
    outputs: list[np.ndarray] = field(repr=False)


def setup_buffers(spec: TopologySpec, count: int, fill=None) -> tuple[IpcRegistry, IpcRegistry]:
    """Leaders allocate and publish a send and a receive buffer per GPU.

    Receive buffers start as NaN when data moves, so any element an algorithm
    fails to write shows up as a mismatch.
    """
    send_reg, recv_reg = IpcRegistry(spec, "send"), IpcRegistry(spec, "recv")
    for r in leaders(spec):
        owner = rank_info(spec, r)
        send_reg.allocate(owner, count, fill)
        if fill is None:
            recv_reg.allocate(owner, count)
        else:
            recv_reg.allocate(owner, count, lambda c, g: np.full(c, np.nan))
    return send_reg, recv_reg


def run_allreduce(
    spec: TopologySpec,
    algorithm: str,
    count: int,
    fill: str = "ones",
    seed: int = 42,
    inner: str = "ring",
    move_data: bool = True,
    transform: Callable[[Programs], Programs] | None = None,
) -> AllreduceRun:
    """Allocate buffers, generate programs for ``algorithm`` and execute them.

    With ``move_data=False`` buffers stay zero and untouched, giving the trace
    only (much cheaper for cost-model sweeps). ``transform`` may rewrite the
    generated programs before execution (used for mutation testing).
    """
    if count < 1:
        raise ConfigurationError("count", f"must be >= 1, got {count}")
    cmap = build_communicators(spec)
    send_reg, recv_reg = setup_buffers(spec, count, make_fill(fill, seed) if move_data else None)
    programs = build_programs(algorithm, cmap, send_reg, recv_reg, inner)
    if transform is not None:
        programs = transform(programs)
    memory = {**send_reg.memory(), **recv_reg.memory()} if move_data else None
    trace = run_programs(spec, programs, memory)
    inputs = [b.elements for b in send_reg.buffers()]
    outputs = [b.elements for b in recv_reg.buffers()]
    return AllreduceRun(spec, algorithm, count, trace, inputs, outputs)


def oracle_allreduce(buffers: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise sum accumulated in rank order, one buffer at a time."""
    if not buffers:
        raise ValueError("no buffers to reduce")
    length = len(buffers[0])
    total = [0.0] * length
    for i, buf in enumerate(buffers):
        if len(buf) != length:
            raise ValueError(f"buffer {i} has length {len(buf)}, expected {length}")
        for j, x in enumerate(buf.tolist()):
            total[j] += x
    return np.array(total, dtype=np.float64)
