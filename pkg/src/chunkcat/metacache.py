"""Metadata cache, metadata-block allocation and offline block repacking."""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields

from .errors import SpecError

log = logging.getLogger(__name__)

MiB = 1 << 20
INDEPENDENT, AGGREGATED = "independent", "aggregated"


@dataclass
class CacheConfig:
    initial_size: int = 2 * MiB
    max_size: int = 128 * MiB
    auto_adjust: bool = True
    flush_mode: str = INDEPENDENT
    # resize rule: double the capacity when the hit rate over the last
    # `adjust_window` accesses falls below `hit_rate_threshold`
    hit_rate_threshold: float = 0.9
    adjust_window: int = 100

    def __post_init__(self):
        if self.initial_size < 0 or self.initial_size > self.max_size:
            raise SpecError(
                f"cache initial_size ({self.initial_size}) must be in [0, max_size={self.max_size}]"
            )
        if self.flush_mode not in (INDEPENDENT, AGGREGATED):
            raise SpecError(f"unknown flush mode {self.flush_mode!r}")


@dataclass
class CacheStats:
    hits: int = 0
    misses: int = 0
    evictions: int = 0
    flush_calls: int = 0
    bytes_flushed: int = 0

    @property
    def accesses(self):
        return self.hits + self.misses

    def copy(self):
        return CacheStats(**asdict(self))

    def __add__(self, other):
        return CacheStats(*(getattr(self, f.name) + getattr(other, f.name) for f in fields(self)))

    def __sub__(self, other):
        return CacheStats(*(getattr(self, f.name) - getattr(other, f.name) for f in fields(self)))

    def as_dict(self):
        return asdict(self)


def _entry_size(entry):
    return getattr(entry, "nbytes", 1)


class MetadataCache:
    """LRU cache of metadata entries keyed by object path.

    Entries expose ``nbytes`` and, when they can be written back,
    ``extents()`` returning ``[(offset, bytes), ...]``.  Dirty entries are
    never evicted; once dirty bytes exceed the capacity the whole cache is
    flushed to ``writer``.  A capacity of zero makes the cache a
    pass-through: nothing is retained and dirty entries are written at once.
    """

    def __init__(self, config: CacheConfig | None = None, writer=None):
        self.config = config or CacheConfig()
        self.capacity = self.config.initial_size
        self.writer = writer
        self.stats = CacheStats()
        self._entries: OrderedDict = OrderedDict()
        self._sizes: dict = {}
        self._dirty: set = set()
        # clean keys in LRU order, the only eviction candidates
        self._clean: OrderedDict = OrderedDict()
        self._size = 0
        self._dirty_size = 0
        self._window_hits = 0
        self._window_count = 0

    def __contains__(self, key):
        return key in self._entries

    def __len__(self):
        return len(self._entries)

    @property
    def size(self):
        return self._size

    def dirty_keys(self):
        return sorted(self._dirty)

    @property
    def dirty_bytes(self):
        return self._dirty_size

    def access(self, key, loader):
        if key in self._entries:
            self._entries.move_to_end(key)
            if key in self._clean:
                self._clean.move_to_end(key)
            self.stats.hits += 1
            self._record(True)
            return self._entries[key]
        self.stats.misses += 1
        self._record(False)
        entry = loader()
        if self.capacity > 0:
            self._store(key, entry)
            self._shrink(keep=key)
        return entry

    def is_dirty(self, key):
        return key in self._dirty

    def put(self, key, entry, dirty=False, shrink=True):
        if self.capacity == 0:
            if dirty:
                self._write_through(key, entry)
            return
        self._store(key, entry)
        if dirty and key not in self._dirty:
            self._dirty.add(key)
            self._dirty_size += self._sizes[key]
            self._clean.pop(key, None)
        if shrink:
            self._shrink(keep=key)

    def mark_dirty(self, key, entry):
        self.put(key, entry, dirty=True)

    def discard(self, key):
        if key in self._entries:
            del self._entries[key]
            size = self._sizes.pop(key)
            self._size -= size
            self._clean.pop(key, None)
            if key in self._dirty:
                self._dirty.discard(key)
                self._dirty_size -= size

    def _store(self, key, entry):
        old = self._sizes.get(key, 0)
        new = _entry_size(entry)
        self._entries[key] = entry
        self._entries.move_to_end(key)
        self._sizes[key] = new
        self._size += new - old
        if key in self._dirty:
            self._dirty_size += new - old
        else:
            self._clean[key] = None
            self._clean.move_to_end(key)

    def _record(self, hit):
        if not self.config.auto_adjust:
            return
        self._window_hits += hit
        self._window_count += 1
        if self._window_count >= self.config.adjust_window:
            rate = self._window_hits / self._window_count
            if rate < self.config.hit_rate_threshold and self.capacity < self.config.max_size:
                self.capacity = min(max(2 * self.capacity, 1), self.config.max_size)
                log.debug("metadata cache grown to %d bytes (hit rate %.2f)", self.capacity, rate)
            self._window_hits = self._window_count = 0

    def _shrink(self, keep=None):
        if self._size <= self.capacity:
            return
        if self.writer is not None and self.dirty_bytes > self.capacity:
            self.flush(self.writer)
        spared = None
        while self._size > self.capacity and self._clean:
            key = next(iter(self._clean))
            if key == keep:
                spared = self._clean.pop(key)
                continue
            self.discard(key)
            self.stats.evictions += 1
        if spared is not None:
            self._clean[keep] = None

    def _write_through(self, key, entry):
        if self.writer is None:
            raise SpecError("pass-through cache has no writer for dirty entries")
        extents = entry.extents()
        self.writer.write_extents(extents)
        self.stats.flush_calls += 1
        self.stats.bytes_flushed += sum(len(b) for _, b in extents)

    def flush(self, writer=None) -> CacheStats:
        """Persist every dirty entry; returns the stats delta of this flush."""
        writer = writer or self.writer
        before = self.stats.copy()
        prepare = getattr(writer, "prepare_flush", None)
        if prepare is not None:
            prepare({k: self._entries[k] for k in self.dirty_keys()})
        keys = self.dirty_keys()
        if not keys:
            return self.stats - before
        batches = [self._entries[k].extents() for k in keys]
        if self.config.flush_mode == AGGREGATED:
            merged = sorted((e for batch in batches for e in batch), key=lambda e: e[0])
            writer.write_extents(merged)
            self.stats.flush_calls += 1
        else:
            for batch in batches:
                writer.write_extents(batch)
                self.stats.flush_calls += 1
        self.stats.bytes_flushed += sum(len(b) for batch in batches for _, b in batch)
        for k in keys:
            self._sizes[k] = _entry_size(self._entries[k])
        self._size = sum(self._sizes.values())
        self._clean = OrderedDict.fromkeys(self._entries)
        self._dirty.clear()
        self._dirty_size = 0
        self._shrink()
        return self.stats - before


def cache_access(cache: MetadataCache, key, loader):
    return cache.access(key, loader)


def flush(cache: MetadataCache, file) -> CacheStats:
    return cache.flush(file)


class MetaAllocator:
    """File-space allocator that packs metadata into blocks.

    Raw data is appended at end of file.  Metadata goes into the open block
    when it fits; otherwise a new block of ``block_size`` bytes (or of the
    request size, if larger) is reserved at end of file.  Oversized requests
    get a dedicated block and leave the open block untouched.
    """

    def __init__(self, block_size, eof, extents=()):
        self.block_size = block_size
        self.eof = eof
        # [start, reserved, used]
        self.blocks = [[off, length, length] for off, length in extents]
        self._open = None

    @property
    def block_count(self):
        return len(self.blocks)

    def alloc_raw(self, size):
        off = self.eof
        self.eof += size
        return off

    def alloc_meta(self, size):
        if size <= 0:
            raise SpecError(f"metadata allocation size must be positive, got {size}")
        blk = self._open
        if blk is not None and blk[2] + size <= blk[1]:
            off = blk[0] + blk[2]
            blk[2] += size
            return off
        block = [self.eof, max(self.block_size, size), size]
        self.eof += block[1]
        self.blocks.append(block)
        if size <= self.block_size:
            self._open = block
        return block[0]

    def finish(self):
        """Give back the unused tail of the open block if it ends the file."""
        blk = self._open
        if blk is not None and blk[0] + blk[1] == self.eof:
            self.eof = blk[0] + blk[2]
            blk[1] = blk[2]
        self._open = None

    @property
    def used_bytes(self):
        return sum(b[2] for b in self.blocks)

    def extents(self):
        """Metadata regions as ``(offset, length)``, merging physically adjacent blocks."""
        out = []
        for start, reserved, used in sorted(self.blocks):
            if used == 0:
                continue
            if out and out[-1][2] == start:
                out[-1][1] = start + used - out[-1][0]
                out[-1][2] = start + reserved
            else:
                out.append([start, used, start + reserved])
        return [(s, n) for s, n, _ in out]


def alloc_meta_block(file, size):
    allocator = file.allocator if hasattr(file, "allocator") else file
    return allocator.alloc_meta(size)


def repack(src, dst, new_block_size, btree_rank_k=None) -> dict:
    """Rewrite ``src`` into ``dst`` with metadata blocks of ``new_block_size`` bytes.

    Objects, chunk payloads and values are preserved; only the placement of
    metadata changes.
    """
    from .container import FormatConfig, copy_file, open_file

    with open_file(src, io_mode="in_memory") as inp:
        cfg = FormatConfig(new_block_size, btree_rank_k or inp.config.btree_rank_k)
        before = len(inp.metadata_extents())
        blocks_before = inp.config.meta_block_size
        count = copy_file(inp, dst, cfg)
    with open_file(dst) as out:
        after = len(out.metadata_extents())
        size_after = out.file_size
    return {
        "objects": count,
        "meta_block_size_before": blocks_before,
        "meta_block_size_after": new_block_size,
        "extents_before": before,
        "extents_after": after,
        "bytes_after": size_after,
    }
