"""Simulated GPU-aware allreduce: ring, multi-lane and multiple-processes-per-GPU variants."""

from lanereduce.buffers import BufferView, IpcRegistry, SharedBuffer, allocate, make_fill, open_view
from lanereduce.collectives import (
    ALGORITHMS,
    ChunkPlan,
    compute_chunk_plan,
    oracle_allreduce,
    run_allreduce,
)
from lanereduce.costmodel import CostParams, ModeledTime, evaluate, sweep
from lanereduce.simcore import EventTrace, ReduceOp, Region, run
from lanereduce.topology import (
    CommunicatorMap,
    RankInfo,
    TopologySpec,
    build_communicators,
    build_topology,
    rank_info,
)

__all__ = [
    "ALGORITHMS",
    "BufferView",
    "ChunkPlan",
    "CommunicatorMap",
    "CostParams",
    "EventTrace",
    "IpcRegistry",
    "ModeledTime",
    "RankInfo",
    "ReduceOp",
    "Region",
    "SharedBuffer",
    "TopologySpec",
    "allocate",
    "build_communicators",
    "build_topology",
    "compute_chunk_plan",
    "evaluate",
    "make_fill",
    "open_view",
    "oracle_allreduce",
    "rank_info",
    "run",
    "run_allreduce",
    "sweep",
]
