"""Device buffers shared between the processes of one GPU.

A leader process (local rank 0) allocates a buffer and publishes it in an
:class:`IpcRegistry`; every process on the same GPU then opens a
:class:`BufferView` onto its own contiguous slice. Publishing stands in for
broadcasting an IPC memory handle, so resolving before publication fails.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from lanereduce.errors import ConfigurationError, ConflictError, OwnershipError, ResolutionError
from lanereduce.simcore import Region
from lanereduce.topology import RankInfo, TopologySpec

# (count, gpu_index) -> float64 array of length count
FillFn = Callable[[int, int], np.ndarray]

RANDOM_INT_LIMIT = 2**20


def even_split(total: int, parts: int) -> list[int]:
    """Split ``total`` into ``parts`` counts, remainder going to the lowest indices."""
    base, extra = divmod(total, parts)
    return [base + 1 if i < extra else base for i in range(parts)]


def partition(total: int, parts: int, index: int) -> tuple[int, int]:
    """(offset, length) of slice ``index`` under :func:`even_split`."""
    base, extra = divmod(total, parts)
    offset = index * base + min(index, extra)
    return offset, base + (1 if index < extra else 0)


def make_fill(name: str, seed: int = 42) -> FillFn:
    if name == "ones":
        return lambda count, gpu_index: np.ones(count, dtype=np.float64)
    if name == "ramp":
        return lambda count, gpu_index: np.arange(count, dtype=np.float64)
    if name in ("rand", "seeded-random-int"):

        def fill(count: int, gpu_index: int) -> np.ndarray:
            rng = np.random.default_rng([seed, gpu_index])
            return rng.integers(0, RANDOM_INT_LIMIT, size=count).astype(np.float64)

        return fill
    raise ConfigurationError("fill", f"unknown fill generator {name!r}")


@dataclass
class SharedBuffer:
    buffer_id: str
    owner: RankInfo
    elements: np.ndarray

    @property
    def element_count(self) -> int:
        return len(self.elements)


@dataclass(frozen=True)
class BufferView:
    buffer_id: str
    offset: int
    length: int
    holder: RankInfo

    @property
    def region(self) -> Region:
        return Region(self.buffer_id, self.offset, self.length)


class IpcRegistry:
    """Per-GPU buffer handles, keyed by (node_id, gpu_id).

    ``name`` distinguishes registries (for example send vs receive buffers) and
    is folded into buffer ids so ids stay unique across registries.
    """

    def __init__(self, spec: TopologySpec, name: str = "buf"):
        self.spec = spec
        self.name = name
        self._buffers: dict[tuple[int, int], SharedBuffer] = {}

    def allocate(self, owner: RankInfo, count: int, fill: FillFn | None = None) -> SharedBuffer:
        if not owner.is_leader:
            raise OwnershipError(f"rank {owner.rank} (local rank {owner.local_rank}) is not a leader")
        if count <= 0:
            raise ConfigurationError("count", f"buffer size must be > 0, got {count}")
        if owner.device in self._buffers:
            raise ConflictError(f"{self.name}: GPU {owner.device} already has a published buffer")
        gpu_index = owner.node_id * self.spec.gpus_per_node + owner.gpu_id
        if fill is None:
            elements = np.zeros(count, dtype=np.float64)
        else:
            elements = np.asarray(fill(count, gpu_index), dtype=np.float64)
            if elements.shape != (count,):
                raise ValueError(f"fill produced shape {elements.shape}, expected ({count},)")
        buf = SharedBuffer(f"{self.name}:n{owner.node_id}g{owner.gpu_id}", owner, elements)
        self._buffers[owner.device] = buf
        return buf

    def resolve(self, holder: RankInfo) -> SharedBuffer:
        try:
            return self._buffers[holder.device]
        except KeyError:
            raise ResolutionError(
                f"{self.name}: no buffer published for GPU {holder.device} (rank {holder.rank})"
            ) from None

    def open_view(self, holder: RankInfo, ppg: int | None = None) -> BufferView:
        buf = self.resolve(holder)
        parts = self.spec.ppg if ppg is None else ppg
        local = holder.local_rank if parts > 1 else 0
        offset, length = partition(buf.element_count, parts, local)
        return BufferView(buf.buffer_id, offset, length, holder)

    def buffers(self) -> list[SharedBuffer]:
        return [self._buffers[k] for k in sorted(self._buffers)]

    def memory(self) -> dict[str, np.ndarray]:
        return {b.buffer_id: b.elements for b in self._buffers.values()}

    def __contains__(self, device: tuple[int, int]) -> bool:
        return device in self._buffers


def allocate(owner: RankInfo, count: int, fill: FillFn | None, registry: IpcRegistry) -> SharedBuffer:
    return registry.allocate(owner, count, fill)


def open_view(holder: RankInfo, registry: IpcRegistry, ppg: int | None = None) -> BufferView:
    return registry.open_view(holder, ppg)
