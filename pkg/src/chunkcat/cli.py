"""``chunkcat`` command line: gen, concat, inspect, repack and report-diff.

Exit status is 0 on success, 1 for usage errors (bad flags, invalid
configuration, missing inputs) and 2 when the operation itself fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import __version__, concat, synth
from .container import COMPACT, CONTIGUOUS, CHUNKED, IN_MEMORY, ON_THE_FLY, file_stats, open_file
from .errors import ChunkcatError, ConcatError, SpecError
from .metacache import AGGREGATED, INDEPENDENT, CacheConfig, repack

log = logging.getLogger("chunkcat")

IO_MODES = {"inmem": IN_MEMORY, "otf": ON_THE_FLY}
IO_FLAGS = {v: k for k, v in IO_MODES.items()}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _size(text):
    """Byte count with an optional K/M/G (binary) suffix."""
    t = text.strip().upper().removesuffix("B").removesuffix("I")
    scale = {"K": 1 << 10, "M": 1 << 20, "G": 1 << 30}.get(t[-1:], 1)
    if scale != 1:
        t = t[:-1]
    try:
        value = int(float(t) * scale)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a byte count: {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"byte count must not be negative: {text!r}")
    return value


def _add_concat_flags(p):
    d = concat.ConcatConfig()
    cache = d.cache
    p.add_argument("inputs", nargs="*", help="input container files, concatenated in this order")
    p.add_argument("-o", "--output", help=f"output file (default: {d.output})")
    p.add_argument("--config", help="JSON file from --dump-config used as the base configuration")
    p.add_argument("--processes", type=int, help=f"rank workers P (default: {d.processes})")
    p.add_argument("--buffer-size", type=_size,
                   help=f"per-rank I/O buffer in bytes, K/M/G suffixes allowed (default: {d.buffer_size})")
    p.add_argument("--strategy", choices=concat.STRATEGIES,
                   help=f"file: each rank reads whole assigned files; dataset: ranks split every "
                        f"dataset and read all files collectively (default: {d.strategy})")
    p.add_argument("--io-mode", choices=sorted(IO_MODES),
                   help=f"inmem loads each input file with one read; otf reads on demand "
                        f"(default: {IO_FLAGS[d.io_mode]})")
    p.add_argument("--chunk-bytes-1d", type=_size,
                   help=f"chunk size of 1D output datasets in bytes (default: {d.chunk_bytes_1d})")
    p.add_argument("--chunk-rows-2d", type=int,
                   help=f"chunk rows of 2D output datasets (default: {d.chunk_rows_2d})")
    p.add_argument("--compression-level", type=int,
                   help=f"zlib level 0-9 (default: {d.compression_level})")
    p.add_argument("--empty-layout", choices=(COMPACT, CONTIGUOUS, CHUNKED),
                   help=f"layout of zero-size output datasets (default: {d.empty_layout})")
    p.add_argument("--create-mode", choices=("single", "collective"),
                   help=f"single: rank 0 creates, fill happens at open; collective: all ranks "
                        f"create with eager fill (default: {d.create_mode})")
    p.add_argument("--meta-cache-size", type=_size,
                   help=f"output metadata cache capacity in bytes (default: {cache.max_size})")
    p.add_argument("--meta-cache-fixed", action=argparse.BooleanOptionalAction, default=None,
                   help="keep the cache at --meta-cache-size instead of growing it on a poor "
                        "hit rate (default: fixed)")
    p.add_argument("--meta-block-size", type=_size,
                   help=f"metadata block size of the output (default: {d.meta_block_size})")
    p.add_argument("--flush-mode", choices=(INDEPENDENT, AGGREGATED),
                   help=f"metadata flush: one write per entry or one vectored write "
                        f"(default: {cache.flush_mode})")
    p.add_argument("--timeout", type=float,
                   help=f"seconds before a stalled collective fails (default: {d.timeout})")
    p.add_argument("--report", help="write the RunReport JSON here")
    p.add_argument("--table", action="store_true", help="print the report as a text table")
    p.add_argument("--dump-config", action="store_true",
                   help="print the resolved configuration as JSON and exit")


def config_from_args(args) -> concat.ConcatConfig:
    if args.config:
        with open(args.config) as fh:
            cfg = concat.ConcatConfig.from_dict(json.load(fh))
    else:
        cfg = concat.ConcatConfig()
    if args.inputs:
        cfg.inputs = list(args.inputs)
    simple = (
        "output", "processes", "buffer_size", "strategy", "chunk_bytes_1d", "chunk_rows_2d",
        "compression_level", "empty_layout", "create_mode", "meta_block_size", "timeout",
    )
    for name in simple:
        value = getattr(args, name)
        if value is not None:
            setattr(cfg, name, value)
    if args.io_mode is not None:
        cfg.io_mode = IO_MODES[args.io_mode]
    cache = cfg.cache
    size = args.meta_cache_size if args.meta_cache_size is not None else cache.max_size
    fixed = args.meta_cache_fixed if args.meta_cache_fixed is not None else not cache.auto_adjust
    cfg.cache = CacheConfig(
        initial_size=size if fixed else min(cache.initial_size, size),
        max_size=size,
        auto_adjust=not fixed,
        flush_mode=args.flush_mode or cache.flush_mode,
        hit_rate_threshold=cache.hit_rate_threshold,
        adjust_window=cache.adjust_window,
    )
    return cfg


def render_table(report: concat.RunReport) -> str:
    lines = [
        f"files F={report.F}  datasets D={report.D} (1D {report.datasets_1d}, "
        f"2D {report.datasets_2d}, empty {report.datasets_empty})  P={report.P}  B={report.B}",
        f"strategy={report.strategy}  io_mode={report.io_mode}  create={report.create_mode}  "
        f"level={report.compression_level}",
        "",
        f"{'phase':<22}{'seconds':>12}",
    ]
    for name, secs in report.phases.items():
        lines.append(f"{name:<22}{secs:>12.4f}")
    lines += ["", f"{'counter':<22}{'1D':>14}{'2D':>14}"]
    for key, v1 in report.counters_1d.items():
        if key == "times":
            continue
        lines.append(f"{key:<22}{v1:>14}{report.counters_2d[key]:>14}")
    for key in report.counters_1d["times"]:
        t1, t2 = report.counters_1d["times"][key], report.counters_2d["times"][key]
        lines.append(f"{'time.' + key:<22}{t1:>14.4f}{t2:>14.4f}")
    lines += [
        "",
        f"output bytes    {report.output_bytes}",
        f"metadata bytes  {report.metadata_bytes}",
        f"raw bytes       {report.raw_bytes}",
        f"logical bytes   {report.logical_bytes}",
        "rounds          " + ", ".join(f"R={k}: {v}" for k, v in report.rounds.items()),
    ]
    if report.partial:
        lines.append(f"PARTIAL: {report.error}")
    return "\n".join(lines)


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        elif isinstance(v, (int, float)) and not isinstance(v, bool):
            out[key] = v
    return out


def diff_reports(a: dict, b: dict) -> list:
    """``(field, a, b, ratio)`` for every numeric field that differs."""
    fa, fb = _flatten(a), _flatten(b)
    rows = []
    for key in sorted(set(fa) | set(fb)):
        va, vb = fa.get(key), fb.get(key)
        if va == vb:
            continue
        ratio = vb / va if va and vb is not None else None
        rows.append((key, va, vb, ratio))
    return rows


# -- subcommands ---------------------------------------------------------------


def cmd_gen(args):
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.files is not None:
        overrides["file_count"] = args.files
    if args.spec:
        spec = synth.CorpusSpec.from_json(args.spec)
        if overrides:
            spec = synth.CorpusSpec.from_dict({**spec.to_dict(), **overrides})
    else:
        spec = synth.preset(args.preset, **overrides)
    if args.dump_config:
        print(json.dumps(spec.to_dict(), indent=2))
        return 0
    paths = synth.generate(spec, args.out, workers=args.workers)
    report = synth.validate(paths, spec)
    print(json.dumps({"paths": paths, **report.as_dict()}, indent=2))
    return 0


def cmd_concat(args):
    cfg = config_from_args(args)
    if args.dump_config:
        print(json.dumps(cfg.to_dict(), indent=2))
        return 0
    if not cfg.inputs:
        raise UsageError("concat needs at least one input file")
    missing = [p for p in cfg.inputs if not os.path.exists(p)]
    if missing:
        raise UsageError(f"input files not found: {missing[:5]}")
    try:
        cfg.validate()
    except SpecError as exc:
        raise UsageError(str(exc)) from None
    try:
        report = concat.run(cfg)
    except ConcatError as exc:
        if args.report and exc.report is not None:
            exc.report.save(args.report)
        raise
    if args.report:
        report.save(args.report)
    if args.table:
        print(render_table(report))
    elif not args.report:
        print(report.to_json())
    return 0


def cmd_inspect(args):
    stats = file_stats(args.file)
    if args.objects:
        with open_file(args.file, io_mode=IN_MEMORY) as h:
            stats["objects"] = [
                {"path": p, "kind": "group"} if s is None else {
                    "path": p, "kind": "dataset", "element_type": s.element_type,
                    "dims": list(s.dims), "layout": s.layout,
                    "chunk_shape": list(s.chunk_shape) if s.chunk_shape else None,
                    "chunks": len(h.chunk_records(p)),
                }
                for p, s, _ in h.visit()
            ]
    print(json.dumps(stats, indent=2))
    return 0


def cmd_repack(args):
    summary = repack(args.src, args.dst, args.meta_block_size, args.btree_rank_k)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_report_diff(args):
    with open(args.a) as fa, open(args.b) as fb:
        a, b = json.load(fa), json.load(fb)
    rows = diff_reports(a, b)
    if args.json:
        print(json.dumps([dict(zip(("field", "a", "b", "ratio"), r)) for r in rows], indent=2))
        return 0
    print(f"{'field':<36}{'a':>16}{'b':>16}{'b/a':>10}")
    for key, va, vb, ratio in rows:
        r = f"{ratio:.3f}" if ratio is not None else "-"
        print(f"{key:<36}{_fmt(va):>16}{_fmt(vb):>16}{r:>10}")
    return 0


def _fmt(v):
    if v is None:
        return "-"
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def build_parser():
    p = _Parser(prog="chunkcat", description="Parallel concatenation of chunked container files.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic corpus")
    g.add_argument("--preset", choices=synth.PRESETS, default="tiny",
                   help="corpus shape (default: tiny)")
    g.add_argument("--spec", help="CorpusSpec JSON file; replaces --preset")
    g.add_argument("--seed", type=int, help="seed for schema and values (default: 0)")
    g.add_argument("--files", type=int, help="override the preset's file count")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--workers", type=int, default=1, help="parallel file writers (default: 1)")
    g.add_argument("--dump-config", action="store_true", help="print the CorpusSpec and exit")
    g.set_defaults(func=cmd_gen)

    c = sub.add_parser("concat", help="concatenate container files")
    _add_concat_flags(c)
    c.set_defaults(func=cmd_concat)

    i = sub.add_parser("inspect", help="print structure and size statistics of a file")
    i.add_argument("file")
    i.add_argument("--objects", action="store_true", help="also list every group and dataset")
    i.set_defaults(func=cmd_inspect)

    r = sub.add_parser("repack", help="rewrite a file with a different metadata block size")
    r.add_argument("--meta-block-size", type=_size, required=True,
                   help="new metadata block size in bytes")
    r.add_argument("--btree-rank-k", type=int, help="new chunk index rank (default: keep)")
    r.add_argument("src")
    r.add_argument("dst")
    r.set_defaults(func=cmd_repack)

    d = sub.add_parser("report-diff", help="compare two RunReport JSON files")
    d.add_argument("a")
    d.add_argument("b")
    d.add_argument("--json", action="store_true", help="machine-readable output")
    d.set_defaults(func=cmd_report_diff)
    return p


def _setup_logging():
    level = os.environ.get("CHUNKCAT_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"chunkcat: error: {exc}", file=sys.stderr)
        return 1
    except (ChunkcatError, OSError, ValueError) as exc:
        log.debug("command failed", exc_info=True)
        print(f"chunkcat: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
