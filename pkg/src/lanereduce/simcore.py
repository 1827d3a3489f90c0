"""Deterministic message-passing engine.

Each rank runs a :class:`RankProgram`, a flat list of actions. Sends and
receives are *posted* (like ``MPI_Isend``/``MPI_Irecv``) and complete only once
matched with their counterpart (rendezvous). A ``wait`` blocks until every
posted operation of that rank has completed; local kernels and the end of the
program wait implicitly. Messages match first-in first-out on
``(src, dst, tag)``.

Ranks are advanced by a fixed round-robin scheduler. Programs never branch on
payload values, so the trace is a pure function of the programs.
"""

from __future__ import annotations

import enum
import hashlib
import json
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from lanereduce.errors import AliasingError, DeadlockError, ProtocolError, TraceError
from lanereduce.topology import TopologySpec, rank_info

INTRA_GPU = "intra_gpu"
INTRA_NODE = "intra_node"
INTER_NODE = "inter_node"
LOCALITY_CLASSES = (INTRA_GPU, INTRA_NODE, INTER_NODE)


class ReduceOp(enum.Enum):
    SUM = "sum"

    def apply(self, dst: np.ndarray, src: np.ndarray) -> None:
        if self is ReduceOp.SUM:
            np.add(dst, src, out=dst)


@dataclass(frozen=True)
class Region:
    """A contiguous range ``[offset, offset + length)`` of one buffer."""

    buffer_id: str
    offset: int
    length: int

    def sub(self, start: int, length: int) -> Region:
        if start < 0 or length < 0 or start + length > self.length:
            raise ProtocolError(f"sub-range [{start}, {start + length}) outside {self}")
        return Region(self.buffer_id, self.offset + start, length)

    def overlaps(self, other: Region) -> bool:
        if self.buffer_id != other.buffer_id or self.length == 0 or other.length == 0:
            return False
        return self.offset < other.offset + other.length and other.offset < self.offset + self.length

    def __str__(self) -> str:
        return f"{self.buffer_id}[{self.offset}:{self.offset + self.length}]"


def locality_class(spec: TopologySpec, src: int, dst: int) -> str:
    a, b = rank_info(spec, src), rank_info(spec, dst)
    if a.node_id != b.node_id:
        return INTER_NODE
    if a.gpu_id != b.gpu_id:
        return INTRA_NODE
    return INTRA_GPU


# -- programs -----------------------------------------------------------------


@dataclass(frozen=True)
class Send:
    dst: int
    tag: int
    region: Region
    stage: str = ""


@dataclass(frozen=True)
class Recv:
    src: int
    tag: int
    region: Region
    stage: str = ""


@dataclass(frozen=True)
class Wait:
    pass


@dataclass(frozen=True)
class ReduceLocal:
    dst: Region
    src: Region
    op: ReduceOp = ReduceOp.SUM
    stage: str = ""


@dataclass(frozen=True)
class CopyLocal:
    dst: Region
    src: Region
    stage: str = ""


@dataclass(frozen=True)
class Barrier:
    comm: tuple[int, ...]


Action = Send | Recv | Wait | ReduceLocal | CopyLocal | Barrier


@dataclass
class RankProgram:
    """Action list for one rank plus the size of its private scratch buffer."""

    rank: int
    actions: list = field(default_factory=list)
    scratch_size: int = 0

    def send(self, dst: int, tag: int, region: Region, stage: str = "") -> None:
        self.actions.append(Send(dst, tag, region, stage))

    def recv(self, src: int, tag: int, region: Region, stage: str = "") -> None:
        self.actions.append(Recv(src, tag, region, stage))

    def wait(self) -> None:
        self.actions.append(Wait())

    def reduce(self, dst: Region, src: Region, stage: str = "", op: ReduceOp = ReduceOp.SUM) -> None:
        self.actions.append(ReduceLocal(dst, src, op, stage))

    def copy(self, dst: Region, src: Region, stage: str = "") -> None:
        self.actions.append(CopyLocal(dst, src, stage))

    def barrier(self, comm: Sequence[int]) -> None:
        self.actions.append(Barrier(tuple(comm)))

    @property
    def scratch_id(self) -> str:
        return f"scratch:{self.rank}"

    def scratch(self, length: int) -> Region:
        self.scratch_size = max(self.scratch_size, length)
        return Region(self.scratch_id, 0, length)


class Programs(dict):
    """rank -> RankProgram, creating empty programs on first access."""

    def __missing__(self, rank: int) -> RankProgram:
        prog = self[rank] = RankProgram(rank)
        return prog


# -- trace ----------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class Event:
    step: int
    kind: str  # "send" | "recv" | "reduce" | "copy"
    src: int
    dst: int
    tag: int | None
    count: int
    locality_class: str | None
    stage: str = ""

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "kind": self.kind,
            "src": self.src,
            "dst": self.dst,
            "tag": self.tag,
            "count": self.count,
            "locality_class": self.locality_class,
            "stage": self.stage,
        }


@dataclass
class EventTrace:
    events: list[Event]
    rank_steps: list[int]

    def sends(self) -> list[Event]:
        return [e for e in self.events if e.kind == "send"]

    def kernels(self) -> list[Event]:
        return [e for e in self.events if e.kind in ("reduce", "copy")]

    def sends_per_rank(self, world_size: int) -> list[int]:
        counts = [0] * world_size
        for e in self.events:
            if e.kind == "send":
                counts[e.src] += 1
        return counts

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e.to_dict(), separators=(",", ":")) + "\n" for e in self.events)

    def digest(self) -> str:
        return hashlib.sha256(self.to_jsonl().encode()).hexdigest()

    @classmethod
    def from_jsonl(cls, text: str) -> EventTrace:
        events = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                events.append(Event(**d))
            except (ValueError, TypeError) as exc:
                raise TraceError(f"line {lineno}: {exc}") from None
        return cls(events, [])


def verify_pairing(events: Iterable[Event]) -> None:
    """Check that every send has exactly one receive with the same (src, dst, tag, count)."""
    sends: dict[tuple, list[int]] = defaultdict(list)
    recvs: dict[tuple, list[int]] = defaultdict(list)
    for e in events:
        if e.kind == "send":
            sends[(e.src, e.dst, e.tag)].append(e.count)
        elif e.kind == "recv":
            recvs[(e.src, e.dst, e.tag)].append(e.count)
    if sends.keys() != recvs.keys():
        missing = sorted(set(sends) ^ set(recvs))
        raise TraceError(f"unpaired messages for keys {missing[:5]}")
    for key, counts in sends.items():
        if counts != recvs[key]:
            raise TraceError(f"send/recv sizes differ for {key}: {counts} vs {recvs[key]}")


# -- engine ---------------------------------------------------------------------


class _Posted:
    __slots__ = ("rank", "peer", "tag", "region", "stage", "is_send", "done")

    def __init__(self, rank, peer, tag, region, stage, is_send):
        self.rank = rank
        self.peer = peer
        self.tag = tag
        self.region = region
        self.stage = stage
        self.is_send = is_send
        self.done = False

    def describe(self) -> str:
        verb = "send to" if self.is_send else "recv from"
        return f"{verb} {self.peer} tag={self.tag} {self.region}"


def reduce_local(
    memory: Mapping[str, np.ndarray], dst: Region, src: Region, op: ReduceOp = ReduceOp.SUM
) -> None:
    """``dst[i] = dst[i] op src[i]``; the two ranges must not overlap."""
    if dst.length != src.length:
        raise ProtocolError(f"reduce length mismatch: {dst} vs {src}")
    if dst.overlaps(src):
        raise AliasingError(f"reduce ranges overlap: {dst} and {src}")
    if dst.length == 0:
        return
    op.apply(_slice(memory, dst), _slice(memory, src))


def _slice(memory: Mapping[str, np.ndarray], region: Region) -> np.ndarray:
    try:
        arr = memory[region.buffer_id]
    except KeyError:
        raise ProtocolError(f"unknown buffer {region.buffer_id!r}") from None
    end = region.offset + region.length
    if region.offset < 0 or end > len(arr):
        raise ProtocolError(f"{region} outside buffer of length {len(arr)}")
    return arr[region.offset : end]


class Engine:
    def __init__(self, spec: TopologySpec, programs: Mapping[int, RankProgram], memory=None):
        self.spec = spec
        self.world = spec.world_size
        extra = [r for r in programs if not 0 <= r < self.world]
        if extra:
            raise ProtocolError(f"programs for ranks outside the world: {extra}")
        self.programs = [programs.get(r) or RankProgram(r) for r in range(self.world)]
        self.move_data = memory is not None
        self.memory: dict[str, np.ndarray] = dict(memory or {})
        if self.move_data:
            for prog in self.programs:
                if prog.scratch_size:
                    self.memory[prog.scratch_id] = np.zeros(prog.scratch_size, dtype=np.float64)
        infos = [rank_info(spec, r) for r in range(self.world)]
        self._node = [i.node_id for i in infos]
        self._device = [i.device for i in infos]

        self.pc = [0] * self.world
        self.waits = [0] * self.world
        self.pending: list[list[_Posted]] = [[] for _ in range(self.world)]
        self.waiting = [False] * self.world
        self.blocked_barrier: list[tuple | None] = [None] * self.world
        self.barrier_seq: dict[tuple, list[int]] = defaultdict(lambda: [0] * self.world)
        self.barrier_arrivals: dict[tuple, int] = defaultdict(int)
        self.unmatched_sends: dict[tuple, deque] = defaultdict(deque)
        self.unmatched_recvs: dict[tuple, deque] = defaultdict(deque)
        self.events: list[Event] = []

    def _locality(self, src: int, dst: int) -> str:
        if self._node[src] != self._node[dst]:
            return INTER_NODE
        if self._device[src] != self._device[dst]:
            return INTRA_NODE
        return INTRA_GPU

    def _match(self, send: _Posted, recv: _Posted) -> None:
        src, dst = send.rank, recv.rank
        if send.region.length != recv.region.length:
            raise ProtocolError(
                f"length mismatch on {src}->{dst} tag={send.tag}: "
                f"send {send.region.length}, recv {recv.region.length}"
            )
        if self.move_data and send.region.length:
            _slice(self.memory, recv.region)[:] = _slice(self.memory, send.region)
        step = max(self.waits[src], self.waits[dst])
        loc = self._locality(src, dst)
        n = send.region.length
        self.events.append(Event(step, "send", src, dst, send.tag, n, loc, send.stage))
        self.events.append(Event(step, "recv", src, dst, recv.tag, n, loc, recv.stage))
        send.done = recv.done = True

    def _post(self, rank: int, action) -> None:
        if isinstance(action, Send):
            op = _Posted(rank, action.dst, action.tag, action.region, action.stage, True)
            key = (rank, action.dst, action.tag)
            queue = self.unmatched_recvs.get(key)
            if queue:
                self._match(op, queue.popleft())
            else:
                self.unmatched_sends[key].append(op)
        else:
            op = _Posted(rank, action.src, action.tag, action.region, action.stage, False)
            key = (action.src, rank, action.tag)
            queue = self.unmatched_sends.get(key)
            if queue:
                self._match(queue.popleft(), op)
            else:
                self.unmatched_recvs[key].append(op)
        self.pending[rank].append(op)

    def _kernel(self, rank: int, action) -> None:
        step = max(self.waits[rank] - 1, 0)
        if isinstance(action, ReduceLocal):
            if self.move_data:
                reduce_local(self.memory, action.dst, action.src, action.op)
            elif action.dst.length != action.src.length:
                raise ProtocolError(f"reduce length mismatch: {action.dst} vs {action.src}")
            self.events.append(
                Event(step, "reduce", rank, rank, None, action.dst.length, None, action.stage)
            )
        else:
            if action.dst.length != action.src.length:
                raise ProtocolError(f"copy length mismatch: {action.dst} vs {action.src}")
            if action.dst.overlaps(action.src):
                raise AliasingError(f"copy ranges overlap: {action.dst} and {action.src}")
            if self.move_data and action.dst.length:
                _slice(self.memory, action.dst)[:] = _slice(self.memory, action.src)
            self.events.append(
                Event(step, "copy", rank, rank, None, action.dst.length, None, action.stage)
            )

    def _try_complete(self, rank: int) -> bool:
        """Finish the rank's outstanding wait if possible. True when it no longer blocks."""
        pend = self.pending[rank]
        if pend:
            if not all(op.done for op in pend):
                return False
            pend.clear()
            self.waits[rank] += 1
        self.waiting[rank] = False
        key = self.blocked_barrier[rank]
        if key is not None:
            if self.barrier_arrivals[key] < len(key[0]):
                return False
            self.blocked_barrier[rank] = None
        return True

    def _advance(self, rank: int) -> bool:
        """Run ``rank`` until it blocks or finishes. Returns True if anything happened."""
        progressed = False
        actions = self.programs[rank].actions
        while True:
            if self.waiting[rank] or self.blocked_barrier[rank] is not None:
                if not self._try_complete(rank):
                    return progressed
                progressed = True
            pc = self.pc[rank]
            if pc >= len(actions):
                if self.pending[rank]:
                    self.waiting[rank] = True
                    continue
                return progressed
            action = actions[pc]
            if isinstance(action, (Send, Recv)):
                self._post(rank, action)
            elif self.pending[rank]:
                # Wait, kernels and barriers all complete outstanding operations first
                self.waiting[rank] = True
                continue
            elif isinstance(action, (ReduceLocal, CopyLocal)):
                self._kernel(rank, action)
            elif isinstance(action, Barrier):
                if rank not in action.comm:
                    raise ProtocolError(f"rank {rank} entered a barrier on {action.comm} it is not part of")
                seq = self.barrier_seq[action.comm]
                key = (action.comm, seq[rank])
                seq[rank] += 1
                self.barrier_arrivals[key] += 1
                self.blocked_barrier[rank] = key
            elif not isinstance(action, Wait):
                raise ProtocolError(f"rank {rank}: unknown action {action!r}")
            self.pc[rank] = pc + 1
            progressed = True

    def _finished(self, rank: int) -> bool:
        return (
            self.pc[rank] >= len(self.programs[rank].actions)
            and not self.pending[rank]
            and self.blocked_barrier[rank] is None
        )

    def run(self) -> EventTrace:
        live = [r for r in range(self.world) if self.programs[r].actions]
        while live:
            progressed = False
            for r in live:
                if self._advance(r):
                    progressed = True
            still = [r for r in live if not self._finished(r)]
            if not progressed and still:
                raise DeadlockError(self._blocked_report(still))
            live = still
        return EventTrace(self.events, list(self.waits))

    def _blocked_report(self, ranks) -> dict[int, list[str]]:
        report = {}
        for r in ranks:
            ops = [op.describe() for op in self.pending[r] if not op.done]
            if self.blocked_barrier[r] is not None:
                ops.append(f"barrier on {self.blocked_barrier[r][0]}")
            report[r] = ops
        return report


def run(
    spec: TopologySpec,
    programs: Mapping[int, RankProgram],
    memory: Mapping[str, np.ndarray] | None = None,
) -> EventTrace:
    """Execute ``programs`` and return the event trace.

    ``memory`` maps buffer ids to arrays that are updated in place. Without it
    only the trace is produced and no data moves.
    """
    return Engine(spec, programs, memory).run()
