"""In-process rank workers and the chunk-ownership collective write protocol.

A :class:`ProcessGroup` runs one function on ``P`` worker threads (SPMD
style); each worker gets a :class:`Comm` exposing barrier, allgather,
alltoall and reductions.  Every collective must be entered by all ranks;
a rank that never arrives makes the others fail with
:class:`CollectiveTimeout` once the deadline passes.
"""

from __future__ import annotations

import logging
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field, fields

import numpy as np

from .container.format import CHUNKED, DatasetSpec
from .container.codec import compress
from .errors import CollectiveError, CollectiveTimeout, OverlapError, RegionError, SpecError

log = logging.getLogger(__name__)

TIME_KEYS = ("decompress", "file_read", "transfer", "compress", "file_write", "other")


class Comm:
    def __init__(self, group: "ProcessGroup", rank: int):
        self._group = group
        self.rank = rank
        self.size = group.size

    def barrier(self):
        try:
            self._group._barrier.wait()
        except threading.BrokenBarrierError:
            raise CollectiveTimeout(
                f"rank {self.rank}: collective aborted or timed out after {self._group.timeout}s"
            ) from None

    def allgather(self, obj):
        slots = self._group._slots
        slots[self.rank] = obj
        self.barrier()
        out = list(slots)
        self.barrier()
        return out

    def bcast(self, obj, root=0):
        return self.allgather(obj if self.rank == root else None)[root]

    def gather(self, obj, root=0):
        out = self.allgather(obj)
        return out if self.rank == root else None

    def alltoall(self, outgoing):
        """``outgoing[d]`` goes to rank ``d``; returns what each rank sent here."""
        if len(outgoing) != self.size:
            raise CollectiveError("alltoall needs one item per rank")
        table = self.allgather(outgoing)
        return [table[src][self.rank] for src in range(self.size)]

    def allreduce_sum(self, local):
        return allreduce_sum(self, local)

    def allreduce_max(self, value):
        return max(self.allgather(value))


class ProcessGroup:
    def __init__(self, size: int, timeout: float = 60.0):
        if size < 1:
            raise SpecError(f"process group size must be >= 1, got {size}")
        self.size = size
        self.timeout = timeout
        self._barrier = threading.Barrier(size, timeout=timeout)
        self._slots = [None] * size

    def run(self, fn, *args, **kwargs) -> list:
        """Run ``fn(comm, *args, **kwargs)`` on every rank; returns per-rank results."""
        self._barrier = threading.Barrier(self.size, timeout=self.timeout)
        self._slots = [None] * self.size
        results = [None] * self.size
        errors = [None] * self.size

        def worker(rank):
            try:
                results[rank] = fn(Comm(self, rank), *args, **kwargs)
            except BaseException as exc:
                errors[rank] = exc
                self._barrier.abort()

        if self.size == 1:
            worker(0)
        else:
            threads = [
                threading.Thread(target=worker, args=(r,), name=f"rank-{r}", daemon=True)
                for r in range(self.size)
            ]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
        primary = [e for e in errors if e is not None and not isinstance(e, CollectiveTimeout)]
        if primary:
            raise primary[0]
        timeouts = [e for e in errors if e is not None]
        if timeouts:
            raise timeouts[0]
        return results


def spawn_group(P: int, timeout: float = 60.0) -> ProcessGroup:
    return ProcessGroup(P, timeout)


def allreduce_sum(comm: Comm, local):
    vectors = comm.allgather(np.asarray(local, dtype=np.int64))
    lengths = {v.shape for v in vectors}
    if len(lengths) != 1:
        raise CollectiveError(f"allreduce_sum length mismatch across ranks: {sorted(lengths)}")
    return np.sum(vectors, axis=0)


# -- counters ----------------------------------------------------------------


@dataclass
class IoCounters:
    bytes_rmw_read: int = 0
    bytes_transferred: int = 0
    bytes_compressed_out: int = 0
    write_calls: int = 0
    read_calls: int = 0
    collective_reads: int = 0
    collective_writes: int = 0
    idle_ranks: int = 0
    rmw_chunks: int = 0
    chunks_written: int = 0
    times: dict = field(default_factory=lambda: dict.fromkeys(TIME_KEYS, 0.0))

    def __add__(self, other):
        out = IoCounters()
        for f in fields(self):
            if f.name == "times":
                out.times = {k: self.times.get(k, 0.0) + other.times.get(k, 0.0) for k in TIME_KEYS}
            else:
                setattr(out, f.name, getattr(self, f.name) + getattr(other, f.name))
        return out

    @classmethod
    def merge(cls, items):
        out = cls()
        for item in items:
            out = out + item
        return out

    def as_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "times"}
        d["times"] = {k: round(v, 6) for k, v in self.times.items()}
        return d


def _tick(counters, key, t0):
    counters.times[key] += time.perf_counter() - t0


# -- ownership ---------------------------------------------------------------


@dataclass(frozen=True)
class WriteRequest:
    rank: int
    slab: tuple
    data: object = None


@dataclass
class OwnershipMap:
    owners: dict
    coverage: dict
    chunk_elements: int

    def owned_by(self, rank):
        return sorted(c for c, r in self.owners.items() if r == rank)

    @property
    def distinct_owners(self):
        return set(self.owners.values())


def _check_slabs(requests, spec: DatasetSpec):
    spans = []
    for req in requests:
        r0, r1 = req.slab
        if not 0 <= r0 <= r1 <= spec.dims[0]:
            raise RegionError(f"rank {req.rank}: slab {req.slab} outside [0, {spec.dims[0]})")
        if r1 > r0:
            spans.append((r0, r1, req.rank))
    spans.sort()
    for (a0, a1, ra), (b0, b1, rb) in zip(spans, spans[1:]):
        if b0 < a1:
            raise OverlapError(f"slabs of rank {ra} {a0, a1} and rank {rb} {b0, b1} overlap")


def _touched_chunks(slab, spec):
    """``(coords, row lo, row hi, col lo, col hi)`` for each chunk a row slab touches."""
    r0, r1 = slab
    if r1 <= r0:
        return
    cr, cc = spec.chunk_shape
    cols = spec.dims[1]
    for ci in range(r0 // cr, (r1 - 1) // cr + 1):
        lo, hi = max(r0, ci * cr), min(r1, (ci + 1) * cr)
        for cj in range(-(-cols // cc)):
            yield (ci, cj), lo, hi, cj * cc, min(cols, (cj + 1) * cc)


def assign_chunk_owners(requests, dataset: DatasetSpec) -> OwnershipMap:
    """Each touched chunk goes to the rank covering most of it; ties go to the lowest rank."""
    if dataset.layout != CHUNKED:
        raise SpecError(f"{dataset.path} is not chunked")
    _check_slabs(requests, dataset)
    coverage = defaultdict(lambda: defaultdict(int))
    for req in requests:
        for coords, lo, hi, c0, c1 in _touched_chunks(req.slab, dataset):
            coverage[coords][req.rank] += (hi - lo) * (c1 - c0)
    owners = {c: min(cov, key=lambda r: (-cov[r], r)) for c, cov in coverage.items()}
    cr, cc = dataset.chunk_shape
    return OwnershipMap(owners, {c: dict(v) for c, v in coverage.items()}, cr * cc)


# -- collective I/O ------------------------------------------------------------


def independent_read(counters: IoCounters, handle, dataset, slab=None):
    counters.read_calls += 1
    return handle.read_region(dataset, slab, timings=counters.times)


def collective_read(comm: Comm, handle, dataset, slab, counters: IoCounters):
    """Every rank reads its slab of the same input dataset; counted once per call."""
    t0 = time.perf_counter()
    comm.allgather(tuple(slab))
    _tick(counters, "other", t0)
    out = handle.read_region(dataset, slab, timings=counters.times)
    if comm.rank == 0:
        counters.collective_reads += 1
    return out


def collective_write(comm: Comm, handle, dataset, slab, data, counters: IoCounters | None = None):
    """Write this rank's row slab of ``dataset`` together with every other rank.

    Phases: ownership assignment, fragment transfer to owners,
    read-modify-write of chunks not fully covered, concurrent compression by
    owners, and one ordered write of all compressed chunks by rank 0.
    """
    counters = counters if counters is not None else IoCounters()
    t_start = time.perf_counter()
    labelled_before = sum(counters.times[k] for k in TIME_KEYS if k != "other")
    counters.collective_writes += 1
    spec = handle.dataset_spec(dataset)
    slab = tuple(int(x) for x in slab)
    if data is None:
        data = np.empty((0, spec.dims[1]), spec.dtype)
    data = np.asarray(data, dtype=spec.dtype).reshape(slab[1] - slab[0], spec.dims[1])

    requests = [WriteRequest(r, s) for r, s in enumerate(comm.allgather(slab))]
    if spec.layout != CHUNKED:
        _check_slabs(requests, spec)
        pieces = comm.gather((slab, data))
        if comm.rank == 0:
            t0 = time.perf_counter()
            for (r0, r1), piece in pieces:
                if r1 > r0:
                    handle.write_region(dataset, r0, piece)
                    counters.write_calls += 1
            _tick(counters, "file_write", t0)
        comm.barrier()
        return counters

    ownership = assign_chunk_owners(requests, spec)

    # fragments travel to their chunk owners
    t0 = time.perf_counter()
    outgoing = [[] for _ in range(comm.size)]
    for coords, lo, hi, c0, c1 in _touched_chunks(slab, spec):
        piece = data[lo - slab[0]:hi - slab[0], c0:c1]
        dest = ownership.owners[coords]
        outgoing[dest].append((coords, lo, hi, c0, c1, piece))
        if dest != comm.rank:
            counters.bytes_transferred += piece.nbytes
    incoming = comm.alltoall(outgoing)
    _tick(counters, "transfer", t0)

    fragments = defaultdict(list)
    for batch in incoming:
        for coords, *rest in batch:
            fragments[coords].append(rest)

    cr, cc = spec.chunk_shape
    compressed = []
    for coords in ownership.owned_by(comm.rank):
        frags = fragments[coords]
        covered = sum((hi - lo) * (c1 - c0) for lo, hi, c0, c1, _ in frags)
        chunk = None
        if covered < cr * cc:
            found = handle.read_chunk(dataset, coords, timings=counters.times)
            if found is not None:
                rec, payload = found
                counters.bytes_rmw_read += rec.nbytes
                counters.rmw_chunks += 1
                chunk = handle.decode_chunk(spec, payload, counters.times).copy()
        if chunk is None:
            chunk = np.full(spec.chunk_shape, spec.fill_value, spec.dtype)
        base_r, base_c = coords[0] * cr, coords[1] * cc
        for lo, hi, c0, c1, piece in frags:
            chunk[lo - base_r:hi - base_r, c0 - base_c:c1 - base_c] = piece
        t0 = time.perf_counter()
        payload = compress(chunk.tobytes(), spec.compression_level)
        _tick(counters, "compress", t0)
        counters.bytes_compressed_out += len(payload)
        compressed.append((coords, payload))
    comm.barrier()

    gathered = comm.gather(compressed)
    if comm.rank == 0:
        items = sorted((item for batch in gathered for item in batch), key=lambda i: i[0])
        if items:
            t0 = time.perf_counter()
            handle.store_chunks(dataset, items)
            _tick(counters, "file_write", t0)
            counters.write_calls += 1
            counters.chunks_written += len(items)
            counters.idle_ranks += comm.size - len(ownership.distinct_owners)
    comm.barrier()
    labelled = sum(counters.times[k] for k in TIME_KEYS if k != "other") - labelled_before
    counters.times["other"] += max(0.0, time.perf_counter() - t_start - labelled)
    return counters
