"""Parallel concatenation of many container files into one output file.

The workflow runs on a :class:`~chunkcat.collective.ProcessGroup`:

1. input files are split into contiguous per-rank blocks,
2. every rank scans its files and the per-dataset row counts are summed
   across ranks,
3. a :class:`ConcatPlan` fixes output offsets and round counts,
4. the output datasets are created at their aggregated sizes,
5. each dataset is filled in one or more buffered rounds of reads followed
   by a collective write.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np

from .collective import (
    IoCounters, ProcessGroup, allreduce_sum, collective_read, collective_write, independent_read,
)
from .container import (
    CHUNKED, COLLECTIVE, COMPACT, CONTIGUOUS, EAGER, IN_MEMORY, LAZY, ON_THE_FLY, SINGLE,
    DatasetSpec, FormatConfig, create_file, file_stats, open_file,
)
from .container.codec import check_level
from .container.format import ELEMENT_TYPES
from .errors import ConcatError, SchemaMismatchError, SpecError
from .metacache import AGGREGATED, CacheConfig

log = logging.getLogger(__name__)

MiB = 1 << 20
FILE_BASED, DATASET_BASED = "file", "dataset"
STRATEGIES = (FILE_BASED, DATASET_BASED)
PHASES = ("metadata_collection", "dataset_creation", "rw_1d", "rw_2d", "file_close")


def default_output_cache() -> CacheConfig:
    return CacheConfig(
        initial_size=128 * MiB, max_size=128 * MiB, auto_adjust=False, flush_mode=AGGREGATED
    )


@dataclass
class ConcatConfig:
    inputs: list = field(default_factory=list)
    output: str = "concat.caf"
    processes: int = 1
    buffer_size: int = 64 * MiB
    strategy: str = FILE_BASED
    io_mode: str = IN_MEMORY
    chunk_bytes_1d: int = MiB
    chunk_rows_2d: int = 128
    compression_level: int = 6
    empty_layout: str = CONTIGUOUS
    create_mode: str = COLLECTIVE
    cache: CacheConfig = field(default_factory=default_output_cache)
    meta_block_size: int = 4 * MiB
    timeout: float = 120.0

    def validate(self):
        if not self.inputs:
            raise SpecError("at least one input file is required")
        if self.processes < 1:
            raise SpecError(f"processes must be >= 1, got {self.processes}")
        if self.buffer_size <= 0:
            raise SpecError(f"buffer_size must be positive, got {self.buffer_size}")
        if self.strategy not in STRATEGIES:
            raise SpecError(f"strategy must be one of {STRATEGIES}")
        if self.io_mode not in (IN_MEMORY, ON_THE_FLY):
            raise SpecError(f"unknown io_mode {self.io_mode!r}")
        if self.chunk_bytes_1d < 1 or self.chunk_rows_2d < 1:
            raise SpecError("chunk sizes must be positive")
        check_level(self.compression_level)
        if self.empty_layout not in (COMPACT, CONTIGUOUS, CHUNKED):
            raise SpecError(f"unknown layout {self.empty_layout!r}")
        if self.create_mode not in (SINGLE, COLLECTIVE):
            raise SpecError(f"unknown create mode {self.create_mode!r}")
        FormatConfig(self.meta_block_size)
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["inputs"] = [os.fspath(p) for p in self.inputs]
        d["output"] = os.fspath(self.output)
        return d

    @classmethod
    def from_dict(cls, d) -> "ConcatConfig":
        d = dict(d)
        if isinstance(d.get("cache"), dict):
            d["cache"] = CacheConfig(**d["cache"])
        return cls(**d)


# -- planning ----------------------------------------------------------------


def assign_files(files, P: int) -> list:
    """Contiguous blocks in input order; the first ``F mod P`` ranks get one extra file."""
    if P < 1:
        raise SpecError(f"P must be >= 1, got {P}")
    F = len(files)
    base, extra = divmod(F, P)
    out, start = [], 0
    for r in range(P):
        n = base + (r < extra)
        out.append(list(files[start:start + n]))
        start += n
    return out


def plan_rounds(local_sizes, B) -> int:
    """Number of collective write rounds so that no rank buffers more than ``B`` bytes."""
    if B <= 0:
        raise SpecError(f"buffer size must be positive, got {B}")
    return max((-(-int(s) // int(B)) for s in local_sizes), default=0)


@dataclass(frozen=True)
class SchemaEntry:
    path: str
    element_type: str
    cols: int

    @property
    def row_bytes(self):
        return np.dtype(_dtype(self.element_type)).itemsize * self.cols


def _dtype(element_type):
    return ELEMENT_TYPES[element_type]


@dataclass
class ConcatPlan:
    """Where every input row lands and how many rounds each dataset takes."""

    P: int
    B: int
    strategy: str
    assignment: list      # rank -> list of input file indices
    schema: list          # SchemaEntry per dataset, lexicographic
    groups: list
    file_rows: np.ndarray  # F x D
    rounds: list

    @property
    def F(self):
        return self.file_rows.shape[0]

    @property
    def D(self):
        return len(self.schema)

    @cached_property
    def global_rows(self) -> np.ndarray:
        return self.file_rows.sum(axis=0)

    @property
    def global_dims(self) -> list:
        return [(int(n), e.cols) for n, e in zip(self.global_rows, self.schema)]

    @cached_property
    def write_offsets(self) -> np.ndarray:
        return np.cumsum(self.file_rows, axis=0) - self.file_rows

    def rank_slab(self, rank, d) -> tuple:
        """Output rows this rank contributes to dataset ``d`` over all rounds."""
        if self.strategy == DATASET_BASED:
            total = int(self.global_rows[d])
            return total * rank // self.P, total * (rank + 1) // self.P
        files = self.assignment[rank]
        if not files:
            return 0, 0
        start = int(self.write_offsets[files[0], d])
        return start, start + int(self.file_rows[files, d].sum())

    def round_slab(self, rank, d, i) -> tuple:
        lo, hi = self.rank_slab(rank, d)
        n, R = hi - lo, self.rounds[d]
        return lo + n * i // R, lo + n * (i + 1) // R

    def file_pieces(self, d, slab, files=None):
        """``(file, local_lo, local_hi)`` for each input file overlapping ``slab``."""
        lo, hi = slab
        out = []
        for f in range(self.F) if files is None else files:
            start = int(self.write_offsets[f, d])
            end = start + int(self.file_rows[f, d])
            a, b = max(lo, start), min(hi, end)
            if a < b:
                out.append((f, a - start, b - start))
        return out


def build_plan(schema, groups, file_rows, P, B, strategy=FILE_BASED) -> ConcatPlan:
    file_rows = np.asarray(file_rows, dtype=np.int64).reshape(len(file_rows), len(schema))
    F = file_rows.shape[0]
    assignment = assign_files(list(range(F)), P)
    plan = ConcatPlan(P, B, strategy, assignment, list(schema), list(groups), file_rows, [])
    for d, entry in enumerate(plan.schema):
        local = []
        for r in range(P):
            lo, hi = plan.rank_slab(r, d)
            local.append((hi - lo) * entry.row_bytes)
        plan.rounds.append(plan_rounds(local, B))
    return plan


def output_spec(entry: SchemaEntry, rows: int, cfg: ConcatConfig) -> DatasetSpec:
    """Layout and chunk shape of one output dataset.

    Chunk shape does not depend on the row count, so a small 1D dataset
    lives in a single, mostly unfilled chunk.
    """
    if rows == 0:
        layout = cfg.empty_layout
    else:
        layout = CHUNKED
    itemsize = np.dtype(_dtype(entry.element_type)).itemsize
    if entry.cols == 1:
        chunk_rows = max(1, cfg.chunk_bytes_1d // itemsize)
    else:
        chunk_rows = cfg.chunk_rows_2d
    return DatasetSpec(
        entry.path, entry.element_type, (rows, entry.cols), layout=layout,
        chunk_shape=(chunk_rows, entry.cols) if layout == CHUNKED else None,
        compression_level=cfg.compression_level,
    )


# -- report ------------------------------------------------------------------


@dataclass
class RunReport:
    F: int = 0
    D: int = 0
    P: int = 0
    B: int = 0
    strategy: str = FILE_BASED
    io_mode: str = IN_MEMORY
    create_mode: str = COLLECTIVE
    empty_layout: str = CONTIGUOUS
    compression_level: int = 6
    datasets_1d: int = 0
    datasets_2d: int = 0
    datasets_empty: int = 0
    phases: dict = field(default_factory=lambda: dict.fromkeys(PHASES + ("total",), 0.0))
    counters_1d: dict = field(default_factory=lambda: IoCounters().as_dict())
    counters_2d: dict = field(default_factory=lambda: IoCounters().as_dict())
    output_bytes: int = 0
    metadata_bytes: int = 0
    raw_bytes: int = 0
    logical_bytes: int = 0
    rounds: dict = field(default_factory=dict)
    per_rank: list = field(default_factory=list)
    output_cache: dict = field(default_factory=dict)
    output: str = ""
    partial: bool = False
    error: str | None = None

    @property
    def compression_ratio(self):
        return self.logical_bytes / self.raw_bytes if self.raw_bytes else float("inf")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, indent=2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def from_dict(cls, d) -> "RunReport":
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunReport":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# -- the run -----------------------------------------------------------------


def _describe(handle):
    groups, schema, rows = [], [], []
    for path, spec, _ in handle.visit():
        if spec is None:
            groups.append(path)
        else:
            schema.append(SchemaEntry(path, spec.element_type, spec.dims[1]))
            rows.append(spec.dims[0])
    return groups, schema, rows


def collect_and_aggregate(comm, files, io_mode, handles=None):
    """Scan this rank's files and agree on the schema and per-file row counts.

    Returns ``(groups, schema, local_file_rows, global_rows)``; every rank
    receives the same schema and global row vector.
    """
    handles = handles if handles is not None else {}
    mine = None
    local_rows = []
    for f, path in files:
        h = handles.get(f) or open_file(path, io_mode=io_mode)
        handles[f] = h
        desc = _describe(h)
        if mine is None:
            mine = (desc[0], desc[1], path)
        elif desc[:2] != mine[:2]:
            raise SchemaMismatchError(f"{path}: schema differs from {mine[2]}")
        local_rows.append(desc[2])
    everyone = [m for m in comm.allgather(mine) if m is not None]
    ref = everyone[0]
    for other in everyone[1:]:
        if other[:2] != ref[:2]:
            raise SchemaMismatchError(f"{other[2]}: schema differs from {ref[2]}")
    groups, schema = ref[0], ref[1]
    local_sum = np.sum(np.asarray(local_rows, dtype=np.int64).reshape(len(local_rows), len(schema)), axis=0)
    global_rows = allreduce_sum(comm, local_sum)
    return groups, schema, local_rows, global_rows


def _check_group_rows(schema, rows):
    by_group = {}
    for entry, n in zip(schema, rows):
        by_group.setdefault(entry.path.rsplit("/", 1)[0], set()).add(int(n))
    bad = {g: sorted(v) for g, v in by_group.items() if len(v) > 1}
    if bad:
        raise SchemaMismatchError(f"groups whose datasets disagree on row count: {bad}")


def create_output(comm, plan: ConcatPlan, cfg: ConcatConfig):
    """Create every output dataset at its aggregated size; returns the shared handle."""
    fcfg = FormatConfig(cfg.meta_block_size)
    specs = [output_spec(e, n, cfg) for e, (n, _) in zip(plan.schema, plan.global_dims)]
    if cfg.create_mode == SINGLE:
        handle = None
        if comm.rank == 0:
            with create_file(cfg.output, fcfg, cfg.cache) as out:
                for g in plan.groups:
                    if g != "/":
                        out.create_group(g)
                for spec in specs:
                    out.create_dataset(spec, fill_policy=LAZY)
            handle = open_file(cfg.output, mode="r+", cache=cfg.cache)
        handle = comm.bcast(handle)
        for spec in specs:
            handle.open_dataset(spec.path, parallel_write=True)
        comm.barrier()
        return handle
    handle = comm.bcast(create_file(cfg.output, fcfg, cfg.cache) if comm.rank == 0 else None)
    if comm.rank == 0:
        for g in plan.groups:
            if g != "/":
                handle.create_group(g)
    for spec in specs:
        # every rank takes part in each creation; rank 0 performs the update
        comm.barrier()
        if comm.rank == 0:
            handle.create_dataset(spec, fill_policy=EAGER)
    comm.barrier()
    return handle


def concatenate_dataset(comm, d, plan: ConcatPlan, inputs: dict, out, counters: IoCounters):
    """Run all rounds for dataset ``d``; ``inputs`` maps file index to an open handle."""
    entry = plan.schema[d]
    dtype = _dtype(entry.element_type)
    for i in range(plan.rounds[d]):
        slab = plan.round_slab(comm.rank, d, i)
        parts = []
        if plan.strategy == FILE_BASED:
            for f, lo, hi in plan.file_pieces(d, slab, plan.assignment[comm.rank]):
                parts.append(independent_read(counters, inputs[f], entry.path, (lo, hi)))
        else:
            wanted = {f: (lo, hi) for f, lo, hi in plan.file_pieces(d, slab)}
            for f in _files_in_round(plan, d, i):
                got = collective_read(comm, inputs[f], entry.path, wanted.get(f, (0, 0)), counters)
                if f in wanted:
                    parts.append(got)
        data = np.concatenate(parts) if parts else np.empty((0, entry.cols), dtype)
        collective_write(comm, out, entry.path, slab, data, counters)
    return counters


def _files_in_round(plan, d, i):
    files = set()
    for r in range(plan.P):
        files.update(f for f, _, _ in plan.file_pieces(d, plan.round_slab(r, d, i)))
    return sorted(files)


def _rank_body(comm, cfg: ConcatConfig, shared: dict):
    timers = shared["phases"]
    t_total = time.perf_counter()
    mark = time.perf_counter()

    def phase_done(name):
        nonlocal mark
        comm.barrier()
        if comm.rank == 0:
            now = time.perf_counter()
            timers[name] = now - mark
            mark = now

    files = list(enumerate(cfg.inputs))
    mine = assign_files(files, comm.size)[comm.rank]
    handles = {}
    shared["inputs"][comm.rank] = handles
    try:
        groups, schema, local_rows, global_rows = collect_and_aggregate(
            comm, mine, cfg.io_mode, handles
        )
        meta_reads = sum(h.read_calls for h in handles.values())
        all_rows = [rows for batch in comm.allgather(local_rows) for rows in batch]
        plan = build_plan(schema, groups, all_rows, comm.size, cfg.buffer_size, cfg.strategy)
        if not np.array_equal(plan.global_rows, global_rows):
            raise ConcatError("per-file row counts disagree with the reduced totals")
        _check_group_rows(schema, global_rows)
        if comm.rank == 0:
            shared["plan"] = plan
        phase_done("metadata_collection")

        out = create_output(comm, plan, cfg)
        if comm.rank == 0:
            shared["output"] = out
        phase_done("dataset_creation")

        if plan.strategy == DATASET_BASED:
            inputs = {}
            for table in comm.allgather(handles):
                inputs.update(table)
        else:
            inputs = handles
        counters = {1: IoCounters(), 2: IoCounters()}
        for kind, name in ((1, "rw_1d"), (2, "rw_2d")):
            for d, entry in enumerate(plan.schema):
                if (entry.cols == 1) == (kind == 1) and plan.rounds[d]:
                    concatenate_dataset(comm, d, plan, inputs, out, counters[kind])
            phase_done(name)

        if comm.rank == 0:
            out.close()
        for h in handles.values():
            h.close()
        phase_done("file_close")
        if comm.rank == 0:
            timers["total"] = time.perf_counter() - t_total
        return {
            "rank": comm.rank,
            "files": [f for f, _ in mine],
            "metadata_read_calls": meta_reads,
            "read_calls": counters[1].read_calls + counters[2].read_calls,
            "collective_reads": counters[1].collective_reads + counters[2].collective_reads,
            "collective_writes": counters[1].collective_writes + counters[2].collective_writes,
            "counters_1d": counters[1],
            "counters_2d": counters[2],
        }
    except BaseException:
        for h in handles.values():
            h.close()
        raise


def run(cfg: ConcatConfig) -> RunReport:
    """Concatenate ``cfg.inputs`` into ``cfg.output`` and report what happened."""
    cfg.validate()
    report = RunReport(
        F=len(cfg.inputs), P=cfg.processes, B=cfg.buffer_size, strategy=cfg.strategy,
        io_mode=cfg.io_mode, create_mode=cfg.create_mode, empty_layout=cfg.empty_layout,
        compression_level=cfg.compression_level, output=os.fspath(cfg.output),
    )
    shared = {"phases": report.phases, "inputs": [None] * cfg.processes}
    group = ProcessGroup(cfg.processes, timeout=cfg.timeout)
    t0 = time.perf_counter()
    try:
        results = group.run(_rank_body, cfg, shared)
    except BaseException as exc:
        report.partial = True
        report.error = f"{type(exc).__name__}: {exc}"
        report.phases["total"] = time.perf_counter() - t0
        out = shared.get("output")
        if out is not None:
            try:
                out.close()
            except Exception:
                log.warning("could not close partial output %s", cfg.output)
        if "plan" in shared:
            _fill_plan_stats(report, shared["plan"])
        raise ConcatError(f"concatenation failed: {report.error}", report) from exc

    plan = shared["plan"]
    _fill_plan_stats(report, plan)
    c1 = IoCounters.merge(r["counters_1d"] for r in results)
    c2 = IoCounters.merge(r["counters_2d"] for r in results)
    report.counters_1d, report.counters_2d = c1.as_dict(), c2.as_dict()
    report.per_rank = [
        {k: v for k, v in r.items() if not k.startswith("counters")} for r in results
    ]
    report.output_cache = shared["output"].cache.stats.as_dict()
    stats = file_stats(cfg.output)
    report.output_bytes = stats["output_bytes"]
    report.metadata_bytes = stats["metadata_bytes"]
    report.raw_bytes = stats["raw_bytes"]
    report.logical_bytes = stats["logical_bytes"]
    log.info(
        "concatenated %d files, %d datasets into %s (%d bytes)",
        report.F, report.D, cfg.output, report.output_bytes,
    )
    return report


def _fill_plan_stats(report: RunReport, plan: ConcatPlan):
    report.D = plan.D
    rows = plan.global_rows
    report.datasets_empty = int(sum(1 for n in rows if n == 0))
    report.datasets_1d = sum(1 for e in plan.schema if e.cols == 1)
    report.datasets_2d = plan.D - report.datasets_1d
    hist = {}
    for R in plan.rounds:
        hist[str(R)] = hist.get(str(R), 0) + 1
    report.rounds = dict(sorted(hist.items(), key=lambda kv: int(kv[0])))


def max_rounds(report: RunReport) -> int:
    return max((int(k) for k in report.rounds), default=0)


def naive_concatenate(paths) -> dict:
    """Serial reference: every dataset's rows stacked in input order, read fully into memory."""
    out = {}
    for p in paths:
        with open_file(p, io_mode=IN_MEMORY) as h:
            for path, spec, _ in h.visit():
                if spec is not None:
                    out.setdefault(path, []).append(h.read_region(path))
    return {k: np.concatenate(v) for k, v in out.items()}


__all__ = [
    "ConcatConfig", "ConcatPlan", "RunReport", "SchemaEntry", "assign_files", "build_plan",
    "collect_and_aggregate", "concatenate_dataset", "create_output", "max_rounds",
    "naive_concatenate", "output_spec", "plan_rounds", "run", "FILE_BASED", "DATASET_BASED",
]
