import numpy as np
import pytest

from lanereduce.buffers import IpcRegistry, allocate, even_split, make_fill, open_view, partition
from lanereduce.errors import ConfigurationError, ConflictError, OwnershipError, ResolutionError
from lanereduce.topology import build_topology, rank_info


def brute_partition(total, parts):
    """Label every element with its owning part, then read each part's span back. Needs parts <= total."""
    owner = []
    base, extra = divmod(total, parts)
    for i in range(parts):
        owner += [i] * (base + (1 if i < extra else 0))
    views = []
    for i in range(parts):
        idx = [k for k, o in enumerate(owner) if o == i]
        views.append((idx[0], len(idx)))
    return views


@pytest.fixture
def spec():
    return build_topology(1, 2, 4)


def test_allocate_ones(spec):
    reg = IpcRegistry(spec)
    buf = allocate(rank_info(spec, 0), 8, make_fill("ones"), reg)
    assert buf.element_count == 8
    assert np.array_equal(buf.elements, np.ones(8))
    assert buf.owner.rank == 0


def test_non_leader_cannot_allocate(spec):
    reg = IpcRegistry(spec)
    with pytest.raises(OwnershipError):
        reg.allocate(rank_info(spec, 1), 8, make_fill("ones"))


def test_duplicate_allocation_conflicts(spec):
    reg = IpcRegistry(spec)
    reg.allocate(rank_info(spec, 0), 8)
    with pytest.raises(ConflictError):
        reg.allocate(rank_info(spec, 0), 8)


def test_zero_count_rejected(spec):
    with pytest.raises(ConfigurationError):
        IpcRegistry(spec).allocate(rank_info(spec, 0), 0)


def test_colocated_ranks_resolve_same_buffer(spec):
    reg = IpcRegistry(spec)
    buf = reg.allocate(rank_info(spec, 0), 2**20, make_fill("rand", seed=7))
    ids = {reg.resolve(rank_info(spec, r)).buffer_id for r in range(4)}
    assert ids == {buf.buffer_id}
    # ranks on the other GPU see nothing until their leader publishes
    with pytest.raises(ResolutionError):
        reg.resolve(rank_info(spec, 4))


def test_open_before_publish_fails(spec):
    with pytest.raises(ResolutionError):
        open_view(rank_info(spec, 2), IpcRegistry(spec))


def test_view_halves():
    spec = build_topology(1, 1, 2)
    reg = IpcRegistry(spec)
    reg.allocate(rank_info(spec, 0), 16)
    view = reg.open_view(rank_info(spec, 1))
    assert (view.offset, view.length) == (8, 8)


def test_view_remainder_first():
    spec = build_topology(1, 1, 4)
    reg = IpcRegistry(spec)
    reg.allocate(rank_info(spec, 0), 10)
    views = [reg.open_view(rank_info(spec, r)) for r in range(4)]
    assert [v.length for v in views] == [3, 3, 2, 2]
    assert [v.offset for v in views] == [0, 3, 6, 8]
    assert [(v.offset, v.length) for v in views] == brute_partition(10, 4)


def test_ppg_one_view_is_whole_buffer():
    spec = build_topology(2, 2, 1)
    reg = IpcRegistry(spec)
    reg.allocate(rank_info(spec, 3), 13)
    view = reg.open_view(rank_info(spec, 3))
    assert (view.offset, view.length) == (0, 13)


def test_partition_exhaustive():
    for total in range(1, 65):
        for parts in range(1, 9):
            if parts > total:
                continue
            views = [partition(total, parts, i) for i in range(parts)]
            assert views == brute_partition(total, parts)
            covered = []
            for offset, length in views:
                covered.extend(range(offset, offset + length))
            # disjoint, contiguous, ordered, exact cover
            assert covered == list(range(total))
            lengths = [length for _, length in views]
            assert max(lengths) - min(lengths) <= 1
            assert lengths == even_split(total, parts)


def test_fills():
    assert np.array_equal(make_fill("ramp")(5, 3), np.arange(5.0))
    a = make_fill("rand", seed=42)(1000, 0)
    b = make_fill("seeded-random-int", seed=42)(1000, 0)
    c = make_fill("rand", seed=42)(1000, 1)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert a.dtype == np.float64
    assert np.all(a == np.floor(a)) and a.min() >= 0 and a.max() < 2**20
    with pytest.raises(ConfigurationError):
        make_fill("gaussian")
