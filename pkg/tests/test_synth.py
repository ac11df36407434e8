import filecmp
import json
import os

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from chunkcat import synth
from chunkcat.container import CONTIGUOUS, DatasetSpec, create_file
from chunkcat.errors import CorpusValidationError, SchemaMismatchError, SpecError

from caf_reader import CafFile


def _recount(paths):
    """Tally schema statistics straight from the bytes of every file."""
    per_file = []
    for p in paths:
        ds = CafFile(p).datasets()
        per_file.append({path: (h["element_type"], h["dims"]) for path, h in ds.items()})
    return per_file


def _same_files(a, b):
    return all(filecmp.cmp(x, y, shallow=False) for x, y in zip(a, b, strict=True))


def test_same_seed_gives_byte_identical_corpus(tmp_path, tiny_spec):
    a = synth.generate(tiny_spec, tmp_path / "a")
    b = synth.generate(tiny_spec, tmp_path / "b")
    assert [os.path.basename(p) for p in a] == [os.path.basename(p) for p in b]
    assert _same_files(a, b)


def test_worker_count_does_not_change_output(tmp_path, tiny_spec):
    a = synth.generate(tiny_spec, tmp_path / "serial")
    b = synth.generate(tiny_spec, tmp_path / "pool", workers=4)
    assert _same_files(a, b)


def test_different_seed_changes_values(tmp_path):
    a = synth.generate(synth.preset("tiny", seed=1, file_count=1), tmp_path / "a")
    b = synth.generate(synth.preset("tiny", seed=2, file_count=1), tmp_path / "b")
    assert not _same_files(a, b)


def test_schema_is_identical_and_groups_share_rows(tiny_corpus):
    files = _recount(tiny_corpus)
    schemas = [{p: (t, d[1]) for p, (t, d) in f.items()} for f in files]
    assert all(s == schemas[0] for s in schemas)
    for f in files:
        rows = {}
        for path, (_, dims) in f.items():
            rows.setdefault(path.rsplit("/", 1)[0], set()).add(dims[0])
        assert all(len(v) == 1 for v in rows.values())
    zero = [{p for p, (_, d) in f.items() if d[0] == 0} for f in files]
    assert all(z == zero[0] for z in zero)


def test_tiny_preset_counts(tiny_corpus):
    f = _recount(tiny_corpus)[0]
    assert len(tiny_corpus) == 16
    assert len(f) == 100
    assert sum(1 for _, d in f.values() if d[0] == 0) == 84
    assert sum(1 for _, d in f.values() if d[1] != 1) == 2


def test_nd_like_counts_match_targets(tmp_path):
    paths = synth.generate(synth.preset("nd_like", file_count=1), tmp_path)
    f = _recount(paths)[0]
    caf = CafFile(paths[0])
    groups = [p for p, (kind, _) in caf.objects().items() if kind == "group" and p != "/"]
    assert len(groups) == 999
    assert len(f) == 15973
    assert sum(1 for _, d in f.values() if d[0] == 0) == 13392
    assert sum(1 for _, d in f.values() if d[1] != 1) == 8


def test_nd_like_raw_budget_upper_bound():
    spec = synth.preset("nd_like")
    widest = max(np.dtype(t).itemsize for t in spec.element_types)
    non_empty = spec.dataset_count - round(spec.zero_size_fraction * spec.dataset_count)
    per_file = (non_empty * spec.rows_distribution["high"] * widest
                + spec.two_d_count * spec.big_2d_row_range[1] * spec.big_2d_cols * widest)
    assert spec.file_count * per_file <= 256 << 20


def test_renamed_dataset_is_a_schema_mismatch(tmp_path):
    spec = synth.CorpusSpec(file_count=2, groups_per_file=2, datasets_per_group=3,
                            zero_size_fraction=0.5, big_2d_count=0, seed=5)
    paths = synth.generate(spec, tmp_path / "ok")
    synth.validate(paths, spec, tolerance=0.2)
    donor = CafFile(paths[1])
    odd = tmp_path / "odd.caf"
    with create_file(odd) as fh:
        for i, (path, h) in enumerate(sorted(donor.datasets().items())):
            name = path + "_renamed" if i == 0 else path
            fh.create_dataset(DatasetSpec(name, h["element_type"], h["dims"], layout=CONTIGUOUS))
            if h["dims"][0]:
                fh.write_region(name, 0, donor.read(path))
    with pytest.raises(SchemaMismatchError):
        synth.validate([paths[0], str(odd)])


def test_group_with_uneven_rows_fails_validation(tmp_path):
    p = tmp_path / "bad.caf"
    with create_file(p) as fh:
        fh.create_dataset(DatasetSpec("/g/a", "int32", (3, 1), layout=CONTIGUOUS))
        fh.create_dataset(DatasetSpec("/g/b", "int32", (4, 1), layout=CONTIGUOUS))
    with pytest.raises(CorpusValidationError):
        synth.validate([str(p)])


def test_validate_rejects_missed_fraction(tmp_path, tiny_corpus, tiny_spec):
    off = synth.preset("tiny", zero_size_fraction=0.5)
    synth.validate(tiny_corpus, tiny_spec)
    with pytest.raises(CorpusValidationError):
        synth.validate(tiny_corpus, off)


@settings(max_examples=10, deadline=None)
@given(
    seed=st.integers(0, 2**63 - 1),
    groups=st.integers(100, 140),
    per_group=st.lists(st.integers(1, 6), min_size=140, max_size=140),
    zero=st.floats(0.0, 1.0),
    one_d=st.floats(0.9, 1.0),
)
def test_reported_fractions_match_recount(tmp_path_factory, seed, groups, per_group, zero, one_d):
    sizes = per_group[:groups]
    assume(round(zero * sum(sizes)) + round((1 - one_d) * sum(sizes)) <= sum(sizes))
    spec = synth.CorpusSpec(
        file_count=2, groups_per_file=groups, datasets_per_group=sizes,
        zero_size_fraction=zero, second_dim_one_fraction=one_d, seed=seed,
        rows_distribution={"name": "uniform", "low": 1, "high": 8},
        big_2d_row_range=(8, 16), big_2d_cols=2, value_model={"name": "random"},
    )
    paths = synth.generate(spec, tmp_path_factory.mktemp("rand"))
    report = synth.validate(paths, spec)
    f = _recount(paths)[0]
    d = len(f)
    zero_count = sum(1 for _, dims in f.values() if dims[0] == 0)
    one_d_count = sum(1 for _, dims in f.values() if dims[1] == 1)
    assert report.datasets == d == spec.dataset_count
    assert report.zero_fraction == zero_count / d
    assert report.one_d_fraction == one_d_count / d
    assert abs(zero_count / d - zero) <= 0.01
    assert abs(one_d_count / d - one_d) <= 0.01


def test_repetitive_corpus_compresses_thirty_fold(tiny_corpus):
    logical = stored = 0
    for p in tiny_corpus:
        caf = CafFile(p)
        for h in caf.datasets().values():
            rows, cols = h["dims"]
            logical += rows * cols * np.dtype(h["element_type"]).itemsize
            stored += sum(nbytes for _, _, nbytes in caf.chunk_records(h))
    assert logical / stored >= 30
    assert synth.validate(tiny_corpus).compression_ratio == pytest.approx(logical / stored)


@pytest.mark.parametrize("model", [
    {"name": "repetitive", "pattern_len": 16},
    {"name": "low_entropy", "alphabet": 4},
    {"name": "random"},
])
def test_value_models_order_compressibility(model):
    rng = np.random.default_rng(0)
    values = synth.make_values(rng, model, 4096, 1, np.float64)
    assert values.shape == (4096, 1) and values.dtype == np.float64
    if model["name"] == "repetitive":
        assert len(np.unique(values)) <= 16


def test_spec_json_roundtrip(tmp_path):
    spec = synth.preset("fd_like", seed=99)
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(spec.to_dict()))
    assert synth.CorpusSpec.from_json(path) == spec


@pytest.mark.parametrize("bad", [
    dict(zero_size_fraction=1.5),
    dict(second_dim_one_fraction=-0.1),
    dict(file_count=-1),
    dict(datasets_per_group=[1, 2]),
    dict(big_2d_count=1000),
    dict(zero_size_fraction=0.95, big_2d_count=10),
    dict(rows_distribution={"name": "zipf"}),
    dict(value_model={"name": "noise"}),
    dict(element_types={"complex128": 1.0}),
])
def test_invalid_specs_are_rejected(bad):
    with pytest.raises(SpecError):
        synth.CorpusSpec(**bad)


def test_unknown_preset():
    with pytest.raises(SpecError):
        synth.preset("huge")
    assert set(synth.PRESETS) == {"tiny", "nd_like", "fd_like"}
