"""End-to-end acceptance checks, one marked test group per criterion.

The conftest summary hook prints a PASS/FAIL line for each criterion number.
"""

import filecmp
import random
import time

import numpy as np
import pytest

from chunkcat import concat, synth
from chunkcat.collective import WriteRequest, assign_chunk_owners
from chunkcat.concat import ConcatConfig, plan_rounds
from chunkcat.container import (
    CHUNKED, COMPACT, CONTIGUOUS, ON_THE_FLY, IN_MEMORY, ChunkIndex, ChunkRecord, DatasetSpec,
    FormatConfig, btree_insert, chunk_lookup, create_file, file_stats, open_file,
)
from chunkcat.metacache import AGGREGATED, INDEPENDENT, CacheConfig, MetadataCache, flush, repack

from caf_reader import CafFile
from corpora import dense_spec

acceptance = pytest.mark.acceptance


def _oracle(paths):
    """Serial in-memory concatenation through the stand-alone byte reader."""
    parts = {}
    for p in paths:
        caf = CafFile(p)
        for path in caf.datasets():
            parts.setdefault(path, []).append(caf.read(path))
    return {k: np.concatenate(v) for k, v in parts.items()}


def _run(paths, out, **kw):
    return concat.run(ConcatConfig(inputs=list(paths), output=str(out), **kw))


# -- 1 -----------------------------------------------------------------------------------------


@acceptance(1, "oracle equivalence over P x B x strategy")
def test_oracle_equivalence_grid(tiny_corpus, tmp_path):
    assert len(tiny_corpus) == 16
    expect = _oracle(tiny_corpus)
    assert len(expect) == 100
    assert sum(1 for v in expect.values() if v.shape[0] == 0) == 84
    assert sum(1 for v in expect.values() if v.shape[1] > 1) == 2
    start = time.perf_counter()
    for P in (1, 2, 4, 8):
        for B in (64 << 10, 64 << 20):
            for strategy in ("file", "dataset"):
                out = tmp_path / f"out_{P}_{B}_{strategy}.caf"
                _run(tiny_corpus, out, processes=P, buffer_size=B, strategy=strategy)
                caf = CafFile(out)
                assert set(caf.datasets()) == set(expect)
                for path, ref in expect.items():
                    got = caf.read(path)
                    assert got.dtype == ref.dtype and got.shape == ref.shape
                    assert got.tobytes() == ref.tobytes(), (P, B, strategy, path)
    assert time.perf_counter() - start < 60


# -- 2 -----------------------------------------------------------------------------------------


@acceptance(2, "rounds formula")
def test_rounds_seven_point_two_over_one():
    assert plan_rounds([int(7.2e9)], int(1e9)) == 8


@acceptance(2, "rounds formula")
def test_rounds_fits_in_one():
    assert plan_rounds([int(1e9)], int(1e9)) == 1
    assert plan_rounds([1], int(1e9)) == 1


# -- 3 -----------------------------------------------------------------------------------------


def _random_pattern(rng):
    rows = rng.randint(1, 700)
    cols = rng.choice([1, 1, 2, 5])
    chunk = (rng.randint(1, 96), rng.randint(1, cols))
    P = rng.randint(1, 9)
    cuts = sorted(rng.randint(0, rows) for _ in range(P - 1))
    bounds = [0, *cuts, rows]
    ranks = list(range(P))
    rng.shuffle(ranks)
    reqs = []
    for i in range(P):
        lo, hi = bounds[i], bounds[i + 1]
        if rng.random() < 0.2:
            hi = lo
        reqs.append(WriteRequest(ranks[i], (lo, hi)))
    return DatasetSpec("/d", "int32", (rows, cols), chunk_shape=chunk), reqs


@acceptance(3, "chunk ownership properties")
def test_thousand_random_slab_patterns():
    rng = random.Random(20240611)
    violations = 0
    for _ in range(1000):
        spec, reqs = _random_pattern(rng)
        cr, cc = spec.chunk_shape
        cover = {}
        for req in reqs:
            for r in range(*req.slab):
                for c in range(spec.dims[1]):
                    per = cover.setdefault((r // cr, c // cc), {})
                    per[req.rank] = per.get(req.rank, 0) + 1
        owners = assign_chunk_owners(reqs, spec).owners
        if set(owners) != set(cover):
            violations += 1
            continue
        for key, per in cover.items():
            best = max(per.values())
            if per[owners[key]] != best or owners[key] != min(r for r, n in per.items() if n == best):
                violations += 1
    assert violations == 0


# -- 4 -----------------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def dense_corpus(tmp_path_factory):
    return synth.generate(dense_spec(file_count=8, datasets=50), tmp_path_factory.mktemp("dense"))


@acceptance(4, "read-op accounting")
def test_file_based_reads_per_rank(dense_corpus, tmp_path):
    report = _run(dense_corpus, tmp_path / "f.caf", processes=4, strategy="file")
    assert report.F == 8 and report.D == 50
    assert [r["read_calls"] for r in report.per_rank] == [100, 100, 100, 100]


@acceptance(4, "read-op accounting")
def test_dataset_based_collective_reads(dense_corpus, tmp_path):
    report = _run(dense_corpus, tmp_path / "d.caf", processes=4, strategy="dataset")
    assert report.counters_1d["collective_reads"] + report.counters_2d["collective_reads"] == 400


# -- 5 -----------------------------------------------------------------------------------------


@acceptance(5, "read-modify-write direction")
@pytest.mark.parametrize("P", [2, 4])
def test_rmw_on_small_1d_and_not_on_aligned_2d(tmp_path, P):
    spec = synth.preset("tiny", file_count=4, seed=21, big_2d_row_range=(256, 256))
    paths = synth.generate(spec, tmp_path / "in")
    chunk_1d_rows = (1 << 20) // 8
    for p in paths:
        for h in CafFile(p).datasets().values():
            if h["dims"][1] == 1:
                assert h["dims"][0] < chunk_1d_rows
            else:
                assert h["dims"][0] % 128 == 0
    report = _run(paths, tmp_path / "out.caf", processes=P, buffer_size=64 << 20)
    assert report.counters_1d["bytes_rmw_read"] > 0
    assert report.counters_2d["bytes_rmw_read"] == 0
    assert report.counters_2d["chunks_written"] > 0


# -- 6 -----------------------------------------------------------------------------------------


def _zero_only_file(path, layout):
    with create_file(path) as fh:
        for g in range(6):
            for d in range(12):
                cols = 4 if d == 0 else 1
                fh.create_dataset(DatasetSpec(
                    f"/g{g}/d{d}", "float32", (0, cols), layout=layout,
                    chunk_shape=(1024, cols) if layout == CHUNKED else None,
                ))
    return file_stats(path)["output_bytes"]


@acceptance(6, "empty dataset layout sizes")
def test_zero_size_layouts_built_directly(tmp_path):
    compact = _zero_only_file(tmp_path / "compact.caf", COMPACT)
    contiguous = _zero_only_file(tmp_path / "contiguous.caf", CONTIGUOUS)
    chunked = _zero_only_file(tmp_path / "chunked.caf", CHUNKED)
    assert compact == contiguous
    assert chunked > contiguous


@acceptance(6, "empty dataset layout sizes")
def test_zero_size_layouts_through_concat(tmp_path):
    spec = synth.preset("tiny", file_count=3, zero_size_fraction=1.0, big_2d_count=0,
                        second_dim_one_fraction=1.0)
    paths = synth.generate(spec, tmp_path / "in")
    sizes = {
        layout: _run(paths, tmp_path / f"{layout}.caf", empty_layout=layout).output_bytes
        for layout in (COMPACT, CONTIGUOUS, CHUNKED)
    }
    assert sizes[COMPACT] == sizes[CONTIGUOUS]
    assert sizes[CHUNKED] > sizes[CONTIGUOUS]


# -- 7 -----------------------------------------------------------------------------------------


@acceptance(7, "compression levels")
def test_compression_levels_on_repetitive_corpus(tiny_corpus, tmp_path, tiny_spec):
    assert tiny_spec.value_model["name"] == "repetitive"
    start = time.perf_counter()
    reports = {lvl: _run(tiny_corpus, tmp_path / f"l{lvl}.caf", compression_level=lvl)
               for lvl in (2, 4, 6)}
    elapsed = time.perf_counter() - start
    assert reports[2].output_bytes >= reports[4].output_bytes >= reports[6].output_bytes
    assert reports[6].compression_ratio >= 30
    assert synth.validate(tiny_corpus).compression_ratio >= 30
    assert elapsed < 30


# -- 8 -----------------------------------------------------------------------------------------


@acceptance(8, "chunk index B-tree")
@pytest.mark.parametrize("k", [1, 32])
def test_btree_ten_thousand_entries(k):
    rng = random.Random(k)
    coords = rng.sample([(r, c) for r in range(5000) for c in range(4)], 10_000)
    idx = ChunkIndex(k)
    inserted = []
    for i, c in enumerate(coords):
        rec = ChunkRecord(c, 4096 + i, 1 + i % 97)
        btree_insert(idx, rec)
        inserted.append(rec)
        if i % 997 == 0:
            probe = rng.choice(inserted)
            assert chunk_lookup(idx, probe.coords) == next(r for r in inserted if r.coords == probe.coords)
    assert idx.max_occupancy() <= 2 * k
    for node in idx.nodes():
        assert len(node) <= 2 * k
    present = {r.coords: r for r in inserted}
    for c in rng.sample(coords, 500):
        assert chunk_lookup(idx, c) == next(r for r in inserted if r.coords == c)
    for c in [(5000, 0), (-1, 0), (17, 9)]:
        assert chunk_lookup(idx, c) is None and c not in present
    assert sorted(r.coords for r in idx) == sorted(present)


@acceptance(8, "chunk index B-tree")
def test_btree_sixty_fifth_entry_splits():
    idx = ChunkIndex(32)
    for i in range(64):
        btree_insert(idx, ChunkRecord((i, 0), 100 + i, 8))
    assert len(idx.nodes()) == 1 and idx.max_occupancy() == 64
    btree_insert(idx, ChunkRecord((64, 0), 200, 8))
    assert len(idx.nodes()) > 1 and idx.max_occupancy() <= 64


# -- 9 -----------------------------------------------------------------------------------------


def _observables(path):
    caf = CafFile(path)
    return {
        p: (kind, None if h is None else (h["element_type"], h["dims"], caf.read(p).tobytes()))
        for p, (kind, h) in caf.objects().items()
    }


@acceptance(9, "metadata block repack")
def test_repack_scattered_file(scattered_corpus, tmp_path):
    src = scattered_corpus[0]
    assert file_stats(src)["meta_block_size"] == 2048
    dst = tmp_path / "repacked.caf"
    summary = repack(src, dst, 4 << 20)
    assert summary["extents_after"] < summary["extents_before"]
    assert file_stats(dst)["metadata_extents"] == summary["extents_after"]
    assert _observables(src) == _observables(dst)
    with open_file(src) as a, open_file(dst) as b:
        assert [(p, s) for p, s, _ in a.visit()] == [(p, s) for p, s, _ in b.visit()]


# -- 10 ----------------------------------------------------------------------------------------


class _Extents:
    def __init__(self, key, offset):
        self.key, self.offset, self.nbytes = key, offset, 1

    def extents(self):
        return [(self.offset, self.key.encode())]


class _Writer:
    def __init__(self):
        self.calls = 0

    def write_extents(self, extents):
        self.calls += 1


def _build(path, mode):
    with create_file(path, FormatConfig(2048), CacheConfig(flush_mode=mode)) as fh:
        for i in range(150):
            spec = DatasetSpec(f"/g{i % 9}/d{i:03d}", "int64", (i % 4, 1), chunk_shape=(8, 1))
            fh.create_dataset(spec)
            if i % 4:
                fh.write_region(spec.path, 0, np.full(i % 4, i, dtype=np.int64))


@acceptance(10, "flush mode equivalence")
def test_flush_modes_bit_identical(tmp_path):
    _build(tmp_path / "ind.caf", INDEPENDENT)
    _build(tmp_path / "agg.caf", AGGREGATED)
    assert filecmp.cmp(tmp_path / "ind.caf", tmp_path / "agg.caf", shallow=False)


@acceptance(10, "flush mode equivalence")
@pytest.mark.parametrize("n", [1, 37, 500])
def test_flush_call_counts(n):
    for mode, expect in ((INDEPENDENT, n), (AGGREGATED, 1)):
        cache = MetadataCache(CacheConfig(initial_size=1 << 20, max_size=1 << 20, flush_mode=mode))
        for i in range(n):
            cache.put(f"e{i}", _Extents(f"e{i}", 16 * i), dirty=True)
        writer = _Writer()
        assert flush(cache, writer).flush_calls == expect == writer.calls


# -- 11 ----------------------------------------------------------------------------------------


@acceptance(11, "in-memory metadata collection")
@pytest.mark.parametrize("P", [1, 2, 4])
def test_in_memory_reads_once_per_file(scattered_corpus, tmp_path, P):
    F = len(scattered_corpus)
    mem = _run(scattered_corpus, tmp_path / "mem.caf", processes=P, io_mode=IN_MEMORY)
    otf = _run(scattered_corpus, tmp_path / "otf.caf", processes=P, io_mode=ON_THE_FLY)
    assert [r["metadata_read_calls"] for r in mem.per_rank] == [F // P] * P
    for a, b in zip(mem.per_rank, otf.per_rank):
        assert b["metadata_read_calls"] > a["metadata_read_calls"]
    dims_mem = {p: h["dims"] for p, h in CafFile(tmp_path / "mem.caf").datasets().items()}
    dims_otf = {p: h["dims"] for p, h in CafFile(tmp_path / "otf.caf").datasets().items()}
    assert dims_mem == dims_otf


# -- 12 ----------------------------------------------------------------------------------------


@acceptance(12, "generator statistics")
def test_nd_like_statistics_and_regeneration(tmp_path):
    spec = synth.preset("nd_like", seed=42)
    first = synth.generate(spec, tmp_path / "a")
    second = synth.generate(spec, tmp_path / "b")
    assert all(filecmp.cmp(x, y, shallow=False) for x, y in zip(first, second))
    for p in first:
        caf = CafFile(p)
        objects = caf.objects()
        groups = sum(1 for path, (kind, _) in objects.items() if kind == "group" and path != "/")
        dims = [h["dims"] for kind, h in objects.values() if kind == "dataset"]
        assert groups == 999
        assert len(dims) == 15973
        assert sum(1 for d in dims if d[1] != 1) == 8
        zero = sum(1 for d in dims if d[0] == 0)
        assert abs(zero / len(dims) - 13392 / 15973) <= 0.01
        assert zero == 13392
