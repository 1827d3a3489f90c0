"""Cluster shape, per-rank locality coordinates and the communicators the algorithms use.

Ranks are laid out node-major, then GPU, then local rank::

    rank = (node_id * gpus_per_node + gpu_id) * ppg + local_rank

so consecutive ranks share a GPU, then a node, which keeps ring neighbours local.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

from lanereduce.errors import ConfigurationError, RankOutOfRange


@dataclass(frozen=True)
class TopologySpec:
    nodes: int
    gpus_per_node: int
    ppg: int = 1

    def __post_init__(self):
        for name in ("nodes", "gpus_per_node", "ppg"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigurationError(name, f"expected an integer, got {value!r}")
            if value < 1:
                raise ConfigurationError(name, f"must be >= 1, got {value}")

    @property
    def world_size(self) -> int:
        return self.nodes * self.gpus_per_node * self.ppg

    @property
    def gpu_count(self) -> int:
        return self.nodes * self.gpus_per_node

    def __str__(self) -> str:
        return f"nodes={self.nodes},gpus={self.gpus_per_node},ppg={self.ppg}"


@dataclass(frozen=True)
class RankInfo:
    rank: int
    node_id: int
    gpu_id: int
    local_rank: int

    @property
    def is_leader(self) -> bool:
        return self.local_rank == 0

    @property
    def device(self) -> tuple[int, int]:
        return (self.node_id, self.gpu_id)


def build_topology(nodes: int, gpus_per_node: int, ppg: int = 1) -> TopologySpec:
    return TopologySpec(nodes, gpus_per_node, ppg)


def rank_info(spec: TopologySpec, rank: int) -> RankInfo:
    if not 0 <= rank < spec.world_size:
        raise RankOutOfRange(f"rank {rank} outside [0, {spec.world_size}) for {spec}")
    device, local_rank = divmod(rank, spec.ppg)
    node_id, gpu_id = divmod(device, spec.gpus_per_node)
    return RankInfo(rank, node_id, gpu_id, local_rank)


def rank_of(spec: TopologySpec, node_id: int, gpu_id: int, local_rank: int) -> int:
    """Inverse of :func:`rank_info`."""
    return (node_id * spec.gpus_per_node + gpu_id) * spec.ppg + local_rank


def leaders(spec: TopologySpec) -> list[int]:
    return list(range(0, spec.world_size, spec.ppg))


@dataclass(frozen=True)
class CommunicatorMap:
    """Communicators for every process.

    ``new_comm[l]`` holds every rank with local rank ``l`` (one per GPU).
    ``comm_group[r]`` is the part of rank ``r``'s new_comm on its own node and
    ``comm_lane[r]`` the part on the same GPU index of every node. All member
    lists are ascending in canonical rank.
    """

    spec: TopologySpec
    world: tuple[int, ...]
    new_comm: dict[int, tuple[int, ...]] = field(repr=False)
    comm_group: dict[int, tuple[int, ...]] = field(repr=False)
    comm_lane: dict[int, tuple[int, ...]] = field(repr=False)

    @cached_property
    def infos(self) -> tuple[RankInfo, ...]:
        return tuple(rank_info(self.spec, r) for r in self.world)


def build_communicators(spec: TopologySpec) -> CommunicatorMap:
    g, q = spec.gpus_per_node, spec.ppg
    new_comm = {
        lr: tuple(rank_of(spec, n, d, lr) for n in range(spec.nodes) for d in range(g))
        for lr in range(q)
    }
    comm_group: dict[int, tuple[int, ...]] = {}
    comm_lane: dict[int, tuple[int, ...]] = {}
    for r in range(spec.world_size):
        info = rank_info(spec, r)
        comm_group[r] = tuple(rank_of(spec, info.node_id, d, info.local_rank) for d in range(g))
        comm_lane[r] = tuple(rank_of(spec, n, info.gpu_id, info.local_rank) for n in range(spec.nodes))
    return CommunicatorMap(
        spec=spec,
        world=tuple(range(spec.world_size)),
        new_comm=new_comm,
        comm_group=comm_group,
        comm_lane=comm_lane,
    )
