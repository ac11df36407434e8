"""Container file handles: creation, opening, datasets, chunk I/O and traversal."""

from __future__ import annotations

import bisect
import logging
import os
import posixpath
import threading
import time
from functools import lru_cache

import numpy as np

from ..errors import FormatError, ObjectExistsError, ObjectNotFoundError, RegionError, SpecError
from ..metacache import CacheConfig, MetaAllocator, MetadataCache
from .btree import ChunkIndex, ChunkRecord, Node
from .codec import compress, decompress
from .format import (
    CHUNKED, COMPACT, CONTIGUOUS, DSET_HEADER, GROUP_HEADER, INDEX_HEADER, KIND_DATASET,
    KIND_GROUP, NODE_SLOT, SUPERBLOCK, UNDEF, DatasetHeader, DatasetSpec, FormatConfig, Link,
    Superblock, decode_extents, decode_group, decode_node_header, encode_extents, encode_group,
    chunk_count, encode_node, node_size,
)

log = logging.getLogger(__name__)

ON_THE_FLY, IN_MEMORY = "on_the_fly", "in_memory"
IO_MODES = (ON_THE_FLY, IN_MEMORY)
EAGER, LAZY = "eager", "lazy"
SINGLE, COLLECTIVE = "single", "collective"


class GroupEntry:
    kind = KIND_GROUP

    def __init__(self, path, links=None, addr=UNDEF, length=0):
        self.path = path
        self.links = links if links is not None else {}
        self.addr = addr
        self.length = length
        self._sized = (-1, 0)

    @property
    def encoded_size(self):
        # links are only ever added, so the count identifies the size
        count, size = self._sized
        if count != len(self.links):
            size = GROUP_HEADER.size + sum(8 + 8 + len(n.encode()) for n in self.links)
            self._sized = (len(self.links), size)
        return size

    @property
    def nbytes(self):
        return max(self.encoded_size, self.length)

    def extents(self):
        return [(self.addr, encode_group(list(self.links.values())).ljust(self.length, b"\0"))]


class DatasetEntry:
    kind = KIND_DATASET

    def __init__(self, path, header: DatasetHeader, addr, index=None):
        self.path = path
        self.header = header
        self.addr = addr
        self.index = index

    @property
    def spec(self) -> DatasetSpec:
        return self.header.spec

    @property
    def nbytes(self):
        n = self.header.size
        if self.spec.layout == CHUNKED:
            n += INDEX_HEADER.size
            if self.index is not None:
                n += len(self.index.nodes()) * node_size(self.index.rank_k)
        return n

    def index_header(self) -> bytes:
        idx = self.index
        root = idx.root.addr if idx is not None and idx.root is not None else UNDEF
        return INDEX_HEADER.pack(
            b"CIDX", idx.rank_k, len(idx), root, idx.depth, 0
        )

    def extents(self):
        out = [(self.addr, self.header.encode())]
        if self.spec.layout == CHUNKED and self.index is not None:
            out.append((self.header.payload[0], self.index_header()))
            k = self.index.rank_k
            out.extend((n.addr, encode_node(n, k)) for n in self.index.nodes())
        return out


@lru_cache(maxsize=256)
def _compressed_fill(dtype_str, chunk_shape, fill_value, level):
    buf = np.full(chunk_shape, fill_value, dtype=np.dtype(dtype_str))
    return compress(buf.tobytes(), level)


def _split(path):
    parent, name = posixpath.split(path)
    return parent or "/", name


def _add_time(timings, key, t0):
    if timings is not None:
        timings[key] = timings.get(key, 0.0) + time.perf_counter() - t0


class FileHandle:
    """An open container file.

    ``in_memory`` handles read the whole file once at open and serve every
    later request from ``resident_image``.  ``on_the_fly`` handles read from
    the file on demand; metadata reads pull the whole enclosing metadata
    extent into a one-extent accumulator.
    """

    def __init__(self, path, fd, mode, io_mode, superblock, cache_config=None, image=None):
        self.path = os.fspath(path)
        self.mode = mode
        self.io_mode = io_mode
        self.superblock = superblock
        self.resident_image = image
        self.read_calls = 1 if image is not None else 0
        self.bytes_read = len(image) if image is not None else 0
        self.write_calls = 0
        self.bytes_written = 0
        self.lock = threading.RLock()
        self.cache = MetadataCache(cache_config or CacheConfig(), writer=self)
        if self.writable and self.cache.capacity == 0:
            raise SpecError("writable files need a metadata cache with non-zero capacity")
        self.allocator = None
        self._fd = fd
        self._extents = []
        self._acc = None
        self.closed = False

    # -- properties ---------------------------------------------------------

    @property
    def config(self) -> FormatConfig:
        return FormatConfig(self.superblock.meta_block_size, self.superblock.btree_rank_k)

    @property
    def writable(self):
        return self.mode != "r"

    @property
    def file_size(self):
        if self.resident_image is not None:
            return len(self.resident_image)
        return os.fstat(self._fd).st_size

    @property
    def object_table(self):
        return {path: addr for path, addr in self._object_addrs()}

    def metadata_extents(self):
        if self.allocator is not None:
            return self.allocator.extents()
        return list(self._extents)

    # -- raw I/O ------------------------------------------------------------

    def _pread(self, offset, n):
        if self.resident_image is not None:
            if offset + n > len(self.resident_image):
                raise FormatError(f"{self.path}: read past end of file")
            return self.resident_image[offset:offset + n]
        data = os.pread(self._fd, n, offset)
        self.read_calls += 1
        self.bytes_read += len(data)
        if len(data) != n:
            raise FormatError(f"{self.path}: truncated file (wanted {n} bytes at {offset})")
        return data

    def _read_meta(self, offset, n):
        if self.resident_image is not None or self.writable:
            return self._pread(offset, n)
        acc = self._acc
        if acc is not None and acc[0] <= offset and offset + n <= acc[0] + len(acc[1]):
            return acc[1][offset - acc[0]:offset - acc[0] + n]
        i = bisect.bisect_right(self._extents, (offset, float("inf"))) - 1
        if i >= 0:
            start, length = self._extents[i]
            if offset + n <= start + length:
                self._acc = (start, self._pread(start, length))
                return self._acc[1][offset - start:offset - start + n]
        return self._pread(offset, n)

    def write_extents(self, extents):
        """Write ``[(offset, bytes), ...]`` as one vectored call."""
        if not self.writable:
            raise SpecError(f"{self.path} is open read-only")
        with self.lock:
            total = 0
            for offset, data in extents:
                os.pwrite(self._fd, data, offset)
                total += len(data)
            self.write_calls += 1
            self.bytes_written += total

    # -- metadata objects ---------------------------------------------------

    def _group(self, path) -> GroupEntry:
        return self.cache.access(path, lambda: self._load_group(path))

    def _load_group(self, path):
        if path == "/":
            sb = self.superblock
            addr, length = sb.root_addr, sb.root_length
        else:
            parent, name = _split(path)
            link = self._group(parent).links.get(name)
            if link is None or link.kind != KIND_GROUP:
                raise ObjectNotFoundError(path)
            addr, length = link.addr, link.length
        if addr == UNDEF:
            raise FormatError(f"{self.path}: group {path} was never written")
        links = decode_group(self._read_meta(addr, length))
        return GroupEntry(path, {l.name: l for l in links}, addr, length)

    def _dataset(self, path) -> DatasetEntry:
        entry = self.cache.access(path, lambda: self._load_dataset(path))
        if not isinstance(entry, DatasetEntry):
            raise ObjectNotFoundError(path)
        return entry

    def _load_dataset(self, path):
        parent, name = _split(path)
        try:
            link = self._group(parent).links.get(name)
        except ObjectNotFoundError:
            link = None
        if link is None or link.kind != KIND_DATASET:
            raise ObjectNotFoundError(path)
        header = DatasetHeader.decode(self._read_meta(link.addr, link.length), path)
        return DatasetEntry(path, header, link.addr)

    def _index(self, entry: DatasetEntry) -> ChunkIndex:
        if entry.index is None:
            buf = self._read_meta(entry.header.payload[0], INDEX_HEADER.size)
            magic, k, count, root, depth, _ = INDEX_HEADER.unpack_from(buf)
            if magic != b"CIDX":
                raise FormatError(f"{entry.path}: bad chunk index header")
            index = ChunkIndex(k)
            if root != UNDEF:
                index.root = self._load_node(root, k)
                index._count = count
            entry.index = index
            self.cache.put(entry.path, entry, dirty=self.cache.is_dirty(entry.path))
        return entry.index

    def _load_node(self, addr, k):
        buf = self._read_meta(addr, node_size(k))
        leaf, count = decode_node_header(buf)
        node = Node(leaf, addr=addr)
        for i in range(count):
            a, b, c, d = NODE_SLOT.unpack_from(buf, 16 + i * NODE_SLOT.size)
            node.keys.append((a, b))
            node.items.append(ChunkRecord((a, b), c, d) if leaf else self._load_node(c, k))
        return node

    def _alloc_nodes(self, index):
        size = node_size(index.rank_k)
        for node in index.nodes():
            if node.addr is None:
                node.addr = self.allocator.alloc_meta(size)

    def prepare_flush(self, entries=None):
        """Give every dirty group an extent large enough for its link table."""
        while True:
            todo = [
                g for g in (self.cache._entries[k] for k in self.cache.dirty_keys())
                if isinstance(g, GroupEntry) and (g.addr == UNDEF or g.encoded_size > g.length)
            ]
            if not todo:
                return
            todo.sort(key=lambda g: (-g.path.count("/"), g.path))
            for g in todo:
                g.length = g.encoded_size
                g.addr = self.allocator.alloc_meta(g.length)
                self.cache.put(g.path, g, dirty=True, shrink=False)
                if g.path == "/":
                    self.superblock.root_addr = g.addr
                    self.superblock.root_length = g.length
                    continue
                parent_path, name = _split(g.path)
                parent = self._group(parent_path)
                parent.links[name] = Link(name, KIND_GROUP, g.addr, g.length)
                self.cache.put(parent_path, parent, dirty=True, shrink=False)

    def flush(self):
        """Write all dirty metadata; returns the cache stats delta."""
        self._require_writable()
        with self.lock:
            return self.cache.flush(self)

    def _write_superblock(self):
        self.write_extents([(0, self.superblock.encode())])

    def _require_writable(self):
        if not self.writable:
            raise SpecError(f"{self.path} is open read-only")

    # -- groups and datasets --------------------------------------------------

    def exists(self, path):
        with self.lock:
            if path == "/":
                return True
            parent, name = _split(path)
            try:
                return name in self._group(parent).links
            except ObjectNotFoundError:
                return False

    def create_group(self, path):
        self._require_writable()
        with self.lock:
            if path == "/" or self.exists(path):
                entry = self._group(path)
                return entry
            parent, name = _split(path)
            pentry = self.create_group(parent)
            entry = GroupEntry(path)
            pentry.links[name] = Link(name, KIND_GROUP, UNDEF, 0)
            self.cache.put(path, entry, dirty=True)
            self.cache.put(parent, pentry, dirty=True)
            return entry

    def create_dataset(self, spec: DatasetSpec, fill_policy=EAGER):
        self._require_writable()
        spec.validate()
        if fill_policy not in (EAGER, LAZY):
            raise SpecError(f"unknown fill policy {fill_policy!r}")
        with self.lock:
            if self.exists(spec.path):
                raise ObjectExistsError(spec.path)
            parent, name = _split(spec.path)
            pentry = self.create_group(parent)
            header = DatasetHeader(spec)
            if spec.layout == COMPACT:
                header.inline = np.full(spec.dims, spec.fill_value, spec.dtype).tobytes()
                header.payload = (len(header.inline), 0)
                header.allocated = True
            elif spec.layout == CONTIGUOUS:
                header.payload = (UNDEF, spec.nbytes)
            addr = self.allocator.alloc_meta(header.size)
            entry = DatasetEntry(spec.path, header, addr)
            if spec.layout == CHUNKED:
                header.payload = (self.allocator.alloc_meta(INDEX_HEADER.size), 0)
                entry.index = ChunkIndex(self.superblock.btree_rank_k)
            if spec.nbytes == 0:
                header.allocated = True
            elif fill_policy == EAGER:
                self._materialize(entry)
            pentry.links[name] = Link(name, KIND_DATASET, addr, header.size)
            self.cache.put(spec.path, entry, dirty=True)
            self.cache.put(parent, pentry, dirty=True)
            return Dataset(self, spec.path)

    def _materialize(self, entry: DatasetEntry):
        """Allocate storage and write the fill value everywhere not yet stored."""
        spec = entry.spec
        if spec.layout == CHUNKED:
            index = self._index(entry)
            fill = _compressed_fill(
                spec.dtype.str, spec.chunk_shape, spec.fill_value, spec.compression_level
            )
            nr = -(-spec.dims[0] // spec.chunk_shape[0])
            nc = -(-spec.dims[1] // spec.chunk_shape[1])
            writes = []
            for ci in range(nr):
                for cj in range(nc):
                    if index.lookup((ci, cj)) is None:
                        off = self.allocator.alloc_raw(len(fill))
                        index.insert(ChunkRecord((ci, cj), off, len(fill)))
                        self._alloc_nodes(index)
                        writes.append((off, fill))
            if writes:
                self.write_extents(writes)
        elif spec.layout == CONTIGUOUS and entry.header.payload[0] == UNDEF and spec.nbytes:
            off = self.allocator.alloc_raw(spec.nbytes)
            entry.header.payload = (off, spec.nbytes)
            self.write_extents(
                [(off, np.full(spec.dims, spec.fill_value, spec.dtype).tobytes())]
            )
        entry.header.allocated = True

    def open_dataset(self, path, parallel_write=False):
        """Open a dataset; opening for parallel write materializes a deferred fill."""
        with self.lock:
            entry = self._dataset(path)
            if parallel_write and not entry.header.allocated:
                self._require_writable()
                self._materialize(entry)
                self.cache.put(path, entry, dirty=True)
            return Dataset(self, path)

    def dataset_spec(self, path) -> DatasetSpec:
        with self.lock:
            return self._dataset(path).spec

    def is_allocated(self, path) -> bool:
        with self.lock:
            return self._dataset(path).header.allocated

    # -- chunk level access -------------------------------------------------

    def chunk_records(self, path) -> list:
        with self.lock:
            entry = self._dataset(path)
            if entry.spec.layout != CHUNKED:
                return []
            return list(self._index(entry))

    def chunk_index(self, path) -> ChunkIndex:
        with self.lock:
            return self._index(self._dataset(path))

    def read_chunk(self, path, coords, timings=None):
        """Stored record and compressed payload for ``coords``, or ``None``."""
        with self.lock:
            rec = self._index(self._dataset(path)).lookup(tuple(coords))
            if rec is None:
                return None
            t0 = time.perf_counter()
            data = self._pread(rec.offset, rec.nbytes)
            _add_time(timings, "file_read", t0)
            return rec, data

    def store_chunks(self, path, items):
        """Store compressed chunks ``[(coords, payload), ...]`` in one write call.

        A payload no larger than the currently stored one is written in
        place; otherwise fresh space is appended at end of file.
        """
        self._require_writable()
        with self.lock:
            entry = self._dataset(path)
            index = self._index(entry)
            writes = []
            for coords, payload in items:
                coords = tuple(coords)
                old = index.lookup(coords)
                if old is not None and len(payload) <= old.nbytes:
                    index.replace(ChunkRecord(coords, old.offset, len(payload)))
                    writes.append((old.offset, payload))
                    continue
                off = self.allocator.alloc_raw(len(payload))
                rec = ChunkRecord(coords, off, len(payload))
                if old is None:
                    index.insert(rec)
                    self._alloc_nodes(index)
                else:
                    index.replace(rec)
                writes.append((off, payload))
            if writes:
                self.write_extents(writes)
            entry.header.allocated = entry.header.allocated or self._fully_indexed(entry)
            self.cache.put(path, entry, dirty=True)

    @staticmethod
    def _fully_indexed(entry):
        spec = entry.spec
        return len(entry.index) == chunk_count(spec.dims, spec.chunk_shape)

    def decode_chunk(self, spec, payload, timings=None):
        t0 = time.perf_counter()
        arr = np.frombuffer(decompress(payload), dtype=spec.dtype).reshape(spec.chunk_shape)
        _add_time(timings, "decompress", t0)
        return arr

    # -- region I/O ------------------------------------------------------------

    def read_region(self, path, rows=None, timings=None):
        with self.lock:
            entry = self._dataset(path)
            spec = entry.spec
            r0, r1 = (0, spec.dims[0]) if rows is None else rows
            if not 0 <= r0 <= r1 <= spec.dims[0]:
                raise RegionError(f"{path}: rows [{r0}, {r1}) outside [0, {spec.dims[0]})")
            out = np.empty((r1 - r0, spec.dims[1]), dtype=spec.dtype)
            if r1 == r0 or spec.dims[1] == 0:
                return out
            if spec.layout == COMPACT:
                full = np.frombuffer(entry.header.inline, spec.dtype).reshape(spec.dims)
                out[:] = full[r0:r1]
            elif spec.layout == CONTIGUOUS:
                addr = entry.header.payload[0]
                if addr == UNDEF:
                    out[:] = spec.fill_value
                else:
                    t0 = time.perf_counter()
                    buf = self._pread(addr + r0 * spec.row_bytes, (r1 - r0) * spec.row_bytes)
                    _add_time(timings, "file_read", t0)
                    out[:] = np.frombuffer(buf, spec.dtype).reshape(out.shape)
            else:
                index = self._index(entry)
                cr, cc = spec.chunk_shape
                ncols = -(-spec.dims[1] // cc)
                for ci in range(r0 // cr, (r1 - 1) // cr + 1):
                    lo, hi = max(r0, ci * cr), min(r1, (ci + 1) * cr)
                    for cj in range(ncols):
                        c0, c1 = cj * cc, min(spec.dims[1], (cj + 1) * cc)
                        rec = index.lookup((ci, cj))
                        if rec is None:
                            out[lo - r0:hi - r0, c0:c1] = spec.fill_value
                            continue
                        t0 = time.perf_counter()
                        payload = self._pread(rec.offset, rec.nbytes)
                        _add_time(timings, "file_read", t0)
                        chunk = self.decode_chunk(spec, payload, timings)
                        out[lo - r0:hi - r0, c0:c1] = chunk[lo - ci * cr:hi - ci * cr, :c1 - c0]
            return out

    def write_region(self, path, row_start, data, timings=None):
        """Serial write of ``data`` at ``row_start``; partial chunks are read-modified-written."""
        self._require_writable()
        with self.lock:
            entry = self._dataset(path)
            spec = entry.spec
            data = np.asarray(data, dtype=spec.dtype)
            if data.ndim == 1:
                data = data.reshape(-1, spec.dims[1] if spec.dims[1] else 1)
            r0, r1 = row_start, row_start + data.shape[0]
            if data.shape[1] != spec.dims[1] or not 0 <= r0 <= r1 <= spec.dims[0]:
                raise RegionError(
                    f"{path}: cannot write {data.shape} at row {row_start} into {spec.dims}"
                )
            if r0 == r1:
                return
            if spec.layout == COMPACT:
                full = np.frombuffer(entry.header.inline, spec.dtype).reshape(spec.dims).copy()
                full[r0:r1] = data
                entry.header.inline = full.tobytes()
                self.cache.put(path, entry, dirty=True)
            elif spec.layout == CONTIGUOUS:
                if entry.header.payload[0] == UNDEF:
                    self._materialize(entry)
                    self.cache.put(path, entry, dirty=True)
                t0 = time.perf_counter()
                self.write_extents(
                    [(entry.header.payload[0] + r0 * spec.row_bytes, data.tobytes())]
                )
                _add_time(timings, "file_write", t0)
            else:
                cr, cc = spec.chunk_shape
                ncols = -(-spec.dims[1] // cc)
                items = []
                for ci in range(r0 // cr, (r1 - 1) // cr + 1):
                    lo, hi = max(r0, ci * cr), min(r1, (ci + 1) * cr)
                    for cj in range(ncols):
                        c0, c1 = cj * cc, min(spec.dims[1], (cj + 1) * cc)
                        full = hi - lo == cr and c1 - c0 == cc
                        if full:
                            chunk = np.ascontiguousarray(data[lo - r0:hi - r0, c0:c1])
                        else:
                            found = self.read_chunk(path, (ci, cj), timings)
                            if found is None:
                                chunk = np.full(spec.chunk_shape, spec.fill_value, spec.dtype)
                            else:
                                chunk = self.decode_chunk(spec, found[1], timings).copy()
                            chunk[lo - ci * cr:hi - ci * cr, :c1 - c0] = data[lo - r0:hi - r0, c0:c1]
                        t0 = time.perf_counter()
                        items.append(((ci, cj), compress(chunk.tobytes(), spec.compression_level)))
                        _add_time(timings, "compress", t0)
                t0 = time.perf_counter()
                self.store_chunks(path, items)
                _add_time(timings, "file_write", t0)

    # -- traversal ------------------------------------------------------------

    def _object_addrs(self):
        out = []
        for path, spec, _ in self.visit():
            if path == "/":
                out.append((path, self.superblock.root_addr))
            elif spec is None:
                out.append((path, self._group(path).addr))
            else:
                out.append((path, self._dataset(path).addr))
        return out

    def visit(self, callback=None):
        """Every group and dataset exactly once, in lexicographic path order.

        Returns ``[(path, spec, dims), ...]`` where ``spec`` and ``dims`` are
        ``None`` for groups.  ``callback(path, spec)`` is invoked per object.
        """
        with self.lock:
            found = []
            stack = ["/"]
            while stack:
                gpath = stack.pop()
                found.append((gpath, None, None))
                group = self._group(gpath)
                for name in sorted(group.links, reverse=True):
                    link = group.links[name]
                    child = posixpath.join(gpath, name)
                    if link.kind == KIND_GROUP:
                        stack.append(child)
                    else:
                        spec = self._dataset(child).spec
                        found.append((child, spec, spec.dims))
            found.sort(key=lambda item: item[0])
            if callback is not None:
                for path, spec, _ in found:
                    callback(path, spec)
            return found

    def datasets(self) -> list:
        return [spec for _, spec, _ in self.visit() if spec is not None]

    # -- accounting ---------------------------------------------------------

    def raw_bytes(self):
        total = 0
        for spec in self.datasets():
            if spec.layout == CHUNKED:
                total += sum(r.nbytes for r in self.chunk_records(spec.path))
            elif spec.layout == CONTIGUOUS and self._dataset(spec.path).header.payload[0] != UNDEF:
                total += spec.nbytes
        return total

    def metadata_bytes(self):
        sb = self.superblock
        return SUPERBLOCK.size + sum(n for _, n in self.metadata_extents()) + sb.extent_length

    # -- lifecycle ------------------------------------------------------------

    def close(self):
        if self.closed:
            return
        with self.lock:
            try:
                if self.writable:
                    self.cache.flush(self)
                    self.allocator.finish()
                    table = encode_extents(self.allocator.extents())
                    addr = self.allocator.alloc_raw(len(table))
                    self.superblock.extent_addr = addr
                    self.superblock.extent_length = len(table)
                    self.write_extents([(addr, table), (0, self.superblock.encode())])
                    os.ftruncate(self._fd, self.allocator.eof)
            finally:
                if self._fd is not None:
                    os.close(self._fd)
                    self._fd = None
                self.closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __repr__(self):
        return f"<FileHandle {self.path!r} mode={self.mode} io_mode={self.io_mode}>"


class Dataset:
    """Lightweight view of one dataset inside an open file."""

    def __init__(self, handle: FileHandle, path):
        self.handle = handle
        self.path = path

    @property
    def spec(self) -> DatasetSpec:
        return self.handle.dataset_spec(self.path)

    @property
    def dims(self):
        return self.spec.dims

    @property
    def index(self) -> ChunkIndex:
        return self.handle.chunk_index(self.path)

    def read(self, rows=None):
        return self.handle.read_region(self.path, rows)

    def write(self, row_start, data):
        self.handle.write_region(self.path, row_start, data)

    def __repr__(self):
        return f"<Dataset {self.path} {self.spec.element_type}{list(self.dims)}>"


# -- module level operations -------------------------------------------------


def create_file(path, cfg: FormatConfig | None = None, cache: CacheConfig | None = None):
    """Create (truncating) a container file holding an empty root group."""
    cfg = cfg or FormatConfig()
    if not isinstance(cfg, FormatConfig):
        raise SpecError("cfg must be a FormatConfig")
    fd = os.open(os.fspath(path), os.O_RDWR | os.O_CREAT | os.O_TRUNC, 0o644)
    sb = Superblock(cfg.meta_block_size, cfg.btree_rank_k)
    handle = FileHandle(path, fd, "w", ON_THE_FLY, sb, cache)
    handle.allocator = MetaAllocator(cfg.meta_block_size, SUPERBLOCK.size)
    root = GroupEntry("/")
    handle.cache.put("/", root, dirty=True)
    handle.flush()
    handle._write_superblock()
    return handle


def open_file(path, io_mode=ON_THE_FLY, mode="r", cache: CacheConfig | None = None):
    """Open an existing container file.

    ``mode`` is ``"r"`` or ``"r+"``; ``in_memory`` is only available for
    read-only handles.
    """
    if io_mode not in IO_MODES:
        raise SpecError(f"unknown io_mode {io_mode!r}")
    if mode not in ("r", "r+"):
        raise SpecError(f"unknown mode {mode!r}")
    if io_mode == IN_MEMORY and mode != "r":
        raise SpecError("in_memory io_mode is read-only")
    path = os.fspath(path)
    fd = os.open(path, os.O_RDONLY if mode == "r" else os.O_RDWR)
    try:
        image = None
        if io_mode == IN_MEMORY:
            size = os.fstat(fd).st_size
            image = os.pread(fd, size, 0)
            sb = Superblock.decode(image[:SUPERBLOCK.size])
            os.close(fd)
            fd = None
        else:
            sb = Superblock.decode(os.pread(fd, SUPERBLOCK.size, 0))
        handle = FileHandle(path, fd, mode, io_mode, sb, cache, image)
        if fd is not None:
            handle.read_calls += 1
            handle.bytes_read += SUPERBLOCK.size
        if sb.root_addr == UNDEF or sb.extent_addr == UNDEF:
            raise FormatError(f"{path}: file was not closed cleanly")
        handle._extents = sorted(decode_extents(handle._pread(sb.extent_addr, sb.extent_length)))
        if mode == "r+":
            handle.allocator = MetaAllocator(
                sb.meta_block_size, os.fstat(fd).st_size, handle._extents
            )
        return handle
    except BaseException:
        if fd is not None:
            os.close(fd)
        raise


def create_dataset(file: FileHandle, spec: DatasetSpec, create_mode=COLLECTIVE, fill_policy=None):
    """Create a dataset.  Without an explicit ``fill_policy`` collective creation
    fills eagerly and single-process creation defers the fill."""
    if create_mode not in (SINGLE, COLLECTIVE):
        raise SpecError(f"unknown create mode {create_mode!r}")
    if fill_policy is None:
        fill_policy = EAGER if create_mode == COLLECTIVE else LAZY
    return file.create_dataset(spec, fill_policy)


def read_region(handle: FileHandle, dataset, slab=None, timings=None):
    return handle.read_region(dataset, slab, timings)


def write_region(handle: FileHandle, dataset, row_start, data):
    handle.write_region(dataset, row_start, data)


def visit_objects(handle: FileHandle, callback=None):
    return handle.visit(callback)


def copy_file(src: FileHandle, dst_path, cfg: FormatConfig, cache: CacheConfig | None = None):
    """Copy every object of ``src`` into a new file; chunk payloads are copied verbatim."""
    count = 0
    with create_file(dst_path, cfg, cache) as dst:
        for path, spec, _ in src.visit():
            count += 1
            if spec is None:
                if path != "/":
                    dst.create_group(path)
                continue
            dst.create_dataset(spec, fill_policy=LAZY)
            if spec.layout == CHUNKED:
                items = []
                for rec in src.chunk_records(path):
                    items.append((rec.coords, src._pread(rec.offset, rec.nbytes)))
                if items:
                    dst.store_chunks(path, items)
                if src.is_allocated(path):
                    dst.open_dataset(path, parallel_write=True)
            elif spec.nbytes:
                dst.write_region(path, 0, src.read_region(path))
    return count


def file_stats(path) -> dict:
    with open_file(path, io_mode=IN_MEMORY) as h:
        found = h.visit()
        datasets = [s for _, s, _ in found if s is not None]
        return {
            "path": os.fspath(path),
            "meta_block_size": h.config.meta_block_size,
            "btree_rank_k": h.config.btree_rank_k,
            "groups": len(found) - len(datasets),
            "datasets": len(datasets),
            "zero_size_datasets": sum(1 for s in datasets if s.nbytes == 0),
            "datasets_2d": sum(1 for s in datasets if s.dims[1] != 1),
            "output_bytes": h.file_size,
            "metadata_bytes": h.metadata_bytes(),
            "raw_bytes": h.raw_bytes(),
            "logical_bytes": sum(s.nbytes for s in datasets),
            "metadata_extents": len(h.metadata_extents()),
        }
