"""Deterministic generator of container-file corpora with a controlled shape.

Every file in a corpus shares one schema: the same groups, the same datasets,
the same element types and column widths.  Datasets in a group share their
row count within a file.  Zero-size datasets are chosen at schema level as
whole groups, so the same datasets are empty in every file.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .container import FormatConfig, DatasetSpec, create_file, open_file
from .container.file import IN_MEMORY, LAZY
from .errors import CorpusValidationError, SchemaMismatchError, SpecError

log = logging.getLogger(__name__)

_SCHEMA_KEY = 0
_FILE_KEY = 1


@dataclass
class CorpusSpec:
    file_count: int = 4
    groups_per_file: int = 10
    # one int for every group, or one entry per group
    datasets_per_group: object = 10
    zero_size_fraction: float = 0.84
    second_dim_one_fraction: float = 0.99
    rows_distribution: dict = field(
        default_factory=lambda: {"name": "log_uniform", "low": 1, "high": 1000}
    )
    big_2d_count: int | None = None
    big_2d_row_range: tuple = (256, 2048)
    big_2d_cols: int = 32
    value_model: dict = field(default_factory=lambda: {"name": "repetitive", "pattern_len": 16})
    element_types: dict = field(
        default_factory=lambda: {"float32": 0.5, "float64": 0.15, "int32": 0.25, "int64": 0.1}
    )
    seed: int = 0
    chunk_rows: int = 1024
    compression_level: int = 6
    meta_block_size: int = 2048
    btree_rank_k: int = 32
    name: str = "custom"

    def __post_init__(self):
        self.big_2d_row_range = tuple(self.big_2d_row_range)
        self.validate()

    @property
    def group_sizes(self) -> list:
        if isinstance(self.datasets_per_group, int):
            return [self.datasets_per_group] * self.groups_per_file
        return list(self.datasets_per_group)

    @property
    def dataset_count(self) -> int:
        return sum(self.group_sizes)

    @property
    def two_d_count(self) -> int:
        if self.big_2d_count is not None:
            return self.big_2d_count
        return round((1 - self.second_dim_one_fraction) * self.dataset_count)

    def validate(self):
        for name in ("zero_size_fraction", "second_dim_one_fraction"):
            if not 0 <= getattr(self, name) <= 1:
                raise SpecError(f"{name} must lie in [0, 1]")
        if self.file_count < 0 or self.groups_per_file < 0 or self.big_2d_cols < 1:
            raise SpecError("counts must be non-negative")
        sizes = self.group_sizes
        if len(sizes) != self.groups_per_file or any(s < 0 for s in sizes):
            raise SpecError("datasets_per_group must give a non-negative size for every group")
        if self.two_d_count > self.dataset_count:
            raise SpecError("more 2D datasets than datasets")
        if round(self.zero_size_fraction * self.dataset_count) + self.two_d_count > self.dataset_count:
            raise SpecError("2D datasets always hold rows, so they cannot also count as zero-size")
        dist = self.rows_distribution
        if dist.get("name") not in ("log_uniform", "uniform", "fixed"):
            raise SpecError(f"unknown rows distribution {dist.get('name')!r}")
        if dist.get("name") != "fixed" and not 1 <= dist["low"] <= dist["high"]:
            raise SpecError("rows distribution needs 1 <= low <= high")
        lo, hi = self.big_2d_row_range
        if not 1 <= lo <= hi:
            raise SpecError("big_2d_row_range needs 1 <= low <= high")
        if self.value_model.get("name") not in ("repetitive", "low_entropy", "random"):
            raise SpecError(f"unknown value model {self.value_model.get('name')!r}")
        if not self.element_types or any(t not in _DTYPES for t in self.element_types):
            raise SpecError(f"element types must be drawn from {sorted(_DTYPES)}")
        FormatConfig(self.meta_block_size, self.btree_rank_k)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["big_2d_row_range"] = list(self.big_2d_row_range)
        return d

    @classmethod
    def from_dict(cls, d) -> "CorpusSpec":
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "CorpusSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


_DTYPES = {"int32": np.int32, "int64": np.int64, "float32": np.float32, "float64": np.float64}


def preset(name, **overrides) -> CorpusSpec:
    """Named corpus shapes; keyword arguments override any field."""
    if name == "tiny":
        base = dict(
            file_count=16, groups_per_file=8, datasets_per_group=[14] * 6 + [8, 8],
            zero_size_fraction=0.84, second_dim_one_fraction=0.98, big_2d_count=2,
            rows_distribution={"name": "log_uniform", "low": 1, "high": 300},
            big_2d_row_range=(256, 1024), big_2d_cols=16,
        )
    elif name == "nd_like":
        base = dict(
            file_count=4, groups_per_file=999, datasets_per_group=[16] * 988 + [15] * 11,
            zero_size_fraction=13392 / 15973, second_dim_one_fraction=1 - 8 / 15973,
            big_2d_count=8, rows_distribution={"name": "log_uniform", "low": 1, "high": 2000},
            big_2d_row_range=(512, 4096), big_2d_cols=32,
        )
    elif name == "fd_like":
        base = dict(
            file_count=8, groups_per_file=701, datasets_per_group=[19] * 313 + [18] * 388,
            zero_size_fraction=9374 / 12931, second_dim_one_fraction=1 - 6 / 12931,
            big_2d_count=6, rows_distribution={"name": "log_uniform", "low": 1, "high": 500},
            big_2d_row_range=(256, 2048), big_2d_cols=32,
        )
    else:
        raise SpecError(f"unknown preset {name!r}; choose tiny, nd_like or fd_like")
    base.update(overrides)
    base.setdefault("name", name)
    return CorpusSpec(**base)


PRESETS = ("tiny", "nd_like", "fd_like")


# -- schema ------------------------------------------------------------------


@dataclass(frozen=True)
class SchemaDataset:
    path: str
    group: int
    element_type: str
    cols: int
    zero: bool


@dataclass
class Schema:
    groups: list
    datasets: list
    zero_groups: frozenset
    two_d_groups: frozenset


def _closest_subset(sizes, target):
    """Indices of a subset of ``sizes`` whose sum is as close to ``target`` as possible."""
    reach = [1]
    for s in sizes:
        reach.append(reach[-1] | (reach[-1] << s))
    final = reach[-1]
    total = sum(sizes)
    best = min((t for t in range(total + 1) if final >> t & 1), key=lambda t: (abs(t - target), t))
    chosen, t = [], best
    for i in reversed(range(len(sizes))):
        if not reach[i] >> t & 1:
            chosen.append(i)
            t -= sizes[i]
    return chosen


def build_schema(spec: CorpusSpec) -> Schema:
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(_SCHEMA_KEY,)))
    sizes = spec.group_sizes
    n2d = spec.two_d_count
    order = rng.permutation(len(sizes))
    target = round(spec.zero_size_fraction * spec.dataset_count)
    picked = _closest_subset([sizes[g] for g in order], target)
    zero_groups = frozenset(int(order[i]) for i in picked)
    if sum(sizes[g] for g in range(len(sizes)) if g not in zero_groups) < n2d:
        raise SpecError("not enough non-empty datasets to host the 2D datasets")

    slots = [(g, j) for g in range(len(sizes)) if g not in zero_groups for j in range(sizes[g])]
    two_d = set()
    if n2d:
        two_d = {slots[i] for i in rng.choice(len(slots), size=n2d, replace=False)}

    names = list(spec.element_types)
    weights = np.array([spec.element_types[n] for n in names], dtype=float)
    weights /= weights.sum()
    groups = [f"/grp{g:04d}" for g in range(len(sizes))]
    datasets = []
    for g, size in enumerate(sizes):
        kinds = rng.choice(len(names), size=size, p=weights)
        for j in range(size):
            datasets.append(SchemaDataset(
                path=f"{groups[g]}/var{j:03d}", group=g, element_type=names[kinds[j]],
                cols=spec.big_2d_cols if (g, j) in two_d else 1, zero=g in zero_groups,
            ))
    return Schema(groups, datasets, zero_groups, frozenset(g for g, _ in two_d))


# -- values ------------------------------------------------------------------


def _draw(rng, dtype, n):
    if np.issubdtype(dtype, np.integer):
        return rng.integers(-1000, 1000, size=n).astype(dtype)
    return rng.normal(0.0, 100.0, size=n).astype(dtype)


def make_values(rng, model: dict, rows, cols, dtype) -> np.ndarray:
    n = rows * cols
    name = model["name"]
    if name == "repetitive":
        vals = np.resize(_draw(rng, dtype, model.get("pattern_len", 16)), n)
    elif name == "low_entropy":
        alphabet = _draw(rng, dtype, model.get("alphabet", 8))
        vals = alphabet[rng.integers(0, len(alphabet), size=n)]
    else:
        vals = _draw(rng, dtype, n)
    return vals.reshape(rows, cols)


def _sample_rows(rng, dist):
    name = dist["name"]
    if name == "fixed":
        return int(dist["value"])
    lo, hi = dist["low"], dist["high"]
    if name == "uniform":
        return int(rng.integers(lo, hi + 1))
    return int(min(hi, max(lo, math.floor(math.exp(rng.uniform(math.log(lo), math.log(hi + 1)))))))


def file_name(spec: CorpusSpec, index: int) -> str:
    return f"{spec.name}_{index:05d}.caf"


def write_file(spec: CorpusSpec, schema: Schema, index: int, path) -> str:
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(_FILE_KEY, index)))
    rows = []
    for g in range(len(schema.groups)):
        if g in schema.zero_groups:
            rows.append(0)
        elif g in schema.two_d_groups:
            rows.append(int(rng.integers(spec.big_2d_row_range[0], spec.big_2d_row_range[1] + 1)))
        else:
            rows.append(_sample_rows(rng, spec.rows_distribution))
    cfg = FormatConfig(spec.meta_block_size, spec.btree_rank_k)
    with create_file(path, cfg) as fh:
        for ds in schema.datasets:
            n = rows[ds.group]
            dspec = DatasetSpec(
                ds.path, ds.element_type, (n, ds.cols), chunk_shape=(spec.chunk_rows, ds.cols),
                compression_level=spec.compression_level,
            )
            fh.create_dataset(dspec, fill_policy=LAZY)
            if n:
                fh.write_region(ds.path, 0, make_values(
                    rng, spec.value_model, n, ds.cols, _DTYPES[ds.element_type]
                ))
    return os.fspath(path)


def generate(spec: CorpusSpec, out_dir, workers: int = 1) -> list:
    """Write ``spec.file_count`` files into ``out_dir``; returns their paths in order."""
    os.makedirs(out_dir, exist_ok=True)
    schema = build_schema(spec)
    paths = [os.path.join(out_dir, file_name(spec, i)) for i in range(spec.file_count)]
    if workers <= 1:
        for i, p in enumerate(paths):
            write_file(spec, schema, i, p)
    else:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(lambda ip: write_file(spec, schema, *ip), enumerate(paths)))
    log.info("generated %d files in %s", len(paths), out_dir)
    return paths


# -- validation --------------------------------------------------------------


@dataclass
class SchemaReport:
    files: int
    groups: int
    datasets: int
    zero_size: int
    two_d: int
    zero_fraction: float
    one_d_fraction: float
    logical_bytes: int
    stored_bytes: int

    @property
    def compression_ratio(self):
        return self.logical_bytes / self.stored_bytes if self.stored_bytes else float("inf")

    def as_dict(self):
        d = asdict(self)
        d["compression_ratio"] = self.compression_ratio
        return d


def _describe(handle):
    schema, rows, logical, stored = [], {}, 0, 0
    for path, spec, _ in handle.visit():
        if spec is None:
            continue
        schema.append((path, spec.element_type, spec.dims[1]))
        rows[path] = spec.dims[0]
        logical += spec.nbytes
        stored += sum(r.nbytes for r in handle.chunk_records(path))
    return schema, rows, logical, stored


def validate(paths, spec: CorpusSpec | None = None, tolerance: float = 0.01) -> SchemaReport:
    """Check schema identity, group-shared dims and (with ``spec``) fraction targets."""
    if not paths:
        raise CorpusValidationError("empty corpus")
    reference = None
    zero_sets = []
    logical = stored = 0
    for p in paths:
        with open_file(p, io_mode=IN_MEMORY) as h:
            schema, rows, lb, sb = _describe(h)
        logical += lb
        stored += sb
        if reference is None:
            reference = schema
        elif schema != reference:
            diff = sorted(set(schema) ^ set(reference))[:5]
            raise SchemaMismatchError(f"{p}: schema differs from {paths[0]}: {diff}")
        by_group = {}
        for path, n in rows.items():
            by_group.setdefault(path.rsplit("/", 1)[0], set()).add(n)
        bad = {g: sorted(v) for g, v in by_group.items() if len(v) > 1}
        if bad:
            raise CorpusValidationError(f"{p}: groups with differing first dims: {bad}")
        zero_sets.append(frozenset(path for path, n in rows.items() if n == 0))
    if len(set(zero_sets)) != 1:
        raise CorpusValidationError("zero-size datasets differ between files")
    d = len(reference)
    zero = len(zero_sets[0])
    two_d = sum(1 for _, _, cols in reference if cols != 1)
    report = SchemaReport(
        files=len(paths), groups=len({p.rsplit("/", 1)[0] for p, _, _ in reference}),
        datasets=d, zero_size=zero, two_d=two_d,
        zero_fraction=zero / d if d else 0.0, one_d_fraction=(d - two_d) / d if d else 1.0,
        logical_bytes=logical, stored_bytes=stored,
    )
    if spec is not None:
        if abs(report.zero_fraction - spec.zero_size_fraction) > tolerance:
            raise CorpusValidationError(
                f"zero-size fraction {report.zero_fraction:.4f} misses target "
                f"{spec.zero_size_fraction:.4f} by more than {tolerance}"
            )
        if abs(report.one_d_fraction - spec.second_dim_one_fraction) > tolerance:
            raise CorpusValidationError(
                f"1D fraction {report.one_d_fraction:.4f} misses target "
                f"{spec.second_dim_one_fraction:.4f} by more than {tolerance}"
            )
    return report
