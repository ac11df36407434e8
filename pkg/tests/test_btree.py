import random

import pytest
from hypothesis import given, settings, strategies as st

from chunkcat.container import ChunkIndex, ChunkRecord, btree_insert, chunk_lookup
from chunkcat.errors import DuplicateChunkError, SpecError

coords_st = st.tuples(st.integers(0, 300), st.integers(0, 4))


def _rec(c, i=0):
    return ChunkRecord(c, 1000 + i, 10 + i)


def _check_occupancy(index):
    for node in index.nodes():
        assert len(node) <= 2 * index.rank_k
        assert node.keys == sorted(node.keys)


def test_empty_lookup_is_absent():
    assert chunk_lookup(ChunkIndex(32), (0, 0)) is None


def test_insert_then_lookup_roundtrip():
    idx = ChunkIndex(32)
    btree_insert(idx, _rec((3, 1)))
    assert chunk_lookup(idx, (3, 1)) == _rec((3, 1))


def test_k1_single_entry_is_one_node_of_depth_one():
    idx = ChunkIndex(1)
    btree_insert(idx, _rec((0, 0)))
    assert len(idx.nodes()) == 1
    assert idx.depth == 1


def test_k32_sixty_four_entries_fit_one_node_and_the_next_splits():
    idx = ChunkIndex(32)
    for i in range(64):
        btree_insert(idx, _rec((i, 0), i))
    assert len(idx.nodes()) == 1
    btree_insert(idx, _rec((64, 0), 64))
    assert len(idx.nodes()) >= 2
    assert idx.max_occupancy() <= 64


def test_split_halves_leave_left_with_floor_half():
    idx = ChunkIndex(2)
    for i in range(5):
        btree_insert(idx, _rec((i, 0), i))
    root = idx.root
    assert not root.leaf
    assert [len(c) for c in root.items] == [2, 3]


def test_duplicate_coordinates_rejected():
    idx = ChunkIndex(4)
    btree_insert(idx, _rec((1, 1)))
    with pytest.raises(DuplicateChunkError):
        btree_insert(idx, _rec((1, 1), 5))


def test_rank_must_be_positive():
    with pytest.raises(SpecError):
        ChunkIndex(0)


def test_replace_swaps_record():
    idx = ChunkIndex(1)
    for i in range(10):
        btree_insert(idx, _rec((i, 0), i))
    old = idx.replace(ChunkRecord((7, 0), 5, 5))
    assert old == _rec((7, 0), 7)
    assert chunk_lookup(idx, (7, 0)) == ChunkRecord((7, 0), 5, 5)
    assert len(idx) == 10


@pytest.mark.parametrize("k", [1, 2, 32])
def test_thousand_random_inserts_match_linear_scan(k):
    rng = random.Random(k)
    pool = [(r, c) for r in range(400) for c in range(3)]
    chosen = rng.sample(pool, 1000)
    idx, inserted = ChunkIndex(k), []
    for i, c in enumerate(chosen):
        btree_insert(idx, _rec(c, i))
        inserted.append(_rec(c, i))
    _check_occupancy(idx)
    for c in pool:
        expect = next((r for r in inserted if r.coords == c), None)
        assert chunk_lookup(idx, c) == expect
    assert [r.coords for r in idx] == sorted(chosen)


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 4), st.lists(st.tuples(st.booleans(), coords_st), max_size=200))
def test_interleaved_insert_lookup_matches_dict(k, ops):
    idx, ref = ChunkIndex(k), {}
    for i, (is_insert, c) in enumerate(ops):
        if is_insert:
            if c in ref:
                with pytest.raises(DuplicateChunkError):
                    btree_insert(idx, _rec(c, i))
            else:
                btree_insert(idx, _rec(c, i))
                ref[c] = _rec(c, i)
        else:
            assert chunk_lookup(idx, c) == ref.get(c)
    _check_occupancy(idx)
    assert len(idx) == len(ref)
    assert list(idx) == [ref[c] for c in sorted(ref)]
