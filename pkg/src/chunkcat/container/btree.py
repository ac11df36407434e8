"""B+-tree of rank k mapping chunk coordinates to stored chunk extents.

Every node holds at most ``2 * rank_k`` entries; the insertion that would
create the ``2k + 1``-th entry splits the node in two.  Records live in
the leaves, internal nodes hold ``(min key of child, child)`` pairs.
"""

from __future__ import annotations

from bisect import bisect_left, bisect_right
from collections import deque
from dataclasses import dataclass
from typing import Iterator, Optional

from ..errors import DuplicateChunkError, SpecError


@dataclass(frozen=True)
class ChunkRecord:
    coords: tuple
    offset: int
    nbytes: int


class Node:
    __slots__ = ("leaf", "keys", "items", "addr")

    def __init__(self, leaf, keys=None, items=None, addr=None):
        self.leaf = leaf
        self.keys = keys if keys is not None else []
        self.items = items if items is not None else []
        self.addr = addr

    def __len__(self):
        return len(self.keys)


class ChunkIndex:
    def __init__(self, rank_k: int = 32):
        if rank_k < 1:
            raise SpecError(f"btree rank k must be >= 1, got {rank_k}")
        self.rank_k = rank_k
        self.root: Optional[Node] = None
        self._count = 0

    @property
    def capacity(self) -> int:
        return 2 * self.rank_k

    def __len__(self):
        return self._count

    def __iter__(self) -> Iterator[ChunkRecord]:
        yield from self._walk(self.root)

    def _walk(self, node):
        if node is None:
            return
        if node.leaf:
            yield from node.items
        else:
            for child in node.items:
                yield from self._walk(child)

    def nodes(self) -> list[Node]:
        """All nodes in breadth-first order, root first."""
        out = []
        if self.root is None:
            return out
        queue = deque([self.root])
        while queue:
            node = queue.popleft()
            out.append(node)
            if not node.leaf:
                queue.extend(node.items)
        return out

    @property
    def depth(self) -> int:
        depth, node = 0, self.root
        while node is not None:
            depth += 1
            node = None if node.leaf else node.items[0]
        return depth

    def max_occupancy(self) -> int:
        return max((len(n) for n in self.nodes()), default=0)

    def lookup(self, coords) -> Optional[ChunkRecord]:
        coords = tuple(coords)
        node = self.root
        if node is None:
            return None
        while not node.leaf:
            i = bisect_right(node.keys, coords) - 1
            if i < 0:
                return None
            node = node.items[i]
        i = bisect_left(node.keys, coords)
        if i < len(node.keys) and node.keys[i] == coords:
            return node.items[i]
        return None

    def insert(self, record: ChunkRecord) -> None:
        coords = tuple(record.coords)
        if self.root is None:
            self.root = Node(leaf=True)
        split = self._insert(self.root, coords, record)
        if split is not None:
            old = self.root
            key, sibling = split
            self.root = Node(leaf=False, keys=[old.keys[0], key], items=[old, sibling])
        self._count += 1

    def _insert(self, node, coords, record):
        if node.leaf:
            i = bisect_left(node.keys, coords)
            if i < len(node.keys) and node.keys[i] == coords:
                raise DuplicateChunkError(f"chunk {coords} already indexed")
            node.keys.insert(i, coords)
            node.items.insert(i, record)
        else:
            i = max(bisect_right(node.keys, coords) - 1, 0)
            split = self._insert(node.items[i], coords, record)
            node.keys[i] = node.items[i].keys[0]
            if split is not None:
                key, sibling = split
                node.keys.insert(i + 1, key)
                node.items.insert(i + 1, sibling)
        if len(node.keys) > self.capacity:
            mid = len(node.keys) // 2
            sibling = Node(node.leaf, node.keys[mid:], node.items[mid:])
            del node.keys[mid:]
            del node.items[mid:]
            return sibling.keys[0], sibling
        return None

    def replace(self, record: ChunkRecord) -> ChunkRecord:
        """Swap the record stored under ``record.coords``; returns the old one."""
        coords = tuple(record.coords)
        node = self.root
        while node is not None and not node.leaf:
            i = bisect_right(node.keys, coords) - 1
            node = node.items[i] if i >= 0 else None
        if node is not None:
            i = bisect_left(node.keys, coords)
            if i < len(node.keys) and node.keys[i] == coords:
                old = node.items[i]
                node.items[i] = record
                return old
        raise KeyError(coords)


def btree_insert(index: ChunkIndex, entry: ChunkRecord) -> ChunkIndex:
    index.insert(entry)
    return index


def chunk_lookup(index: ChunkIndex, coords) -> Optional[ChunkRecord]:
    return index.lookup(coords)
