"""Command line interface: ``dumpy <verb> ...``.

Every option may also come from a JSON file given with ``--config``;
flags on the command line win over the file. ``DUMPY_DIR`` sets the
default index directory.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from .config import IndexConfig
from .exceptions import DumpyError
from .metrics import DistanceKind

log = logging.getLogger("dumpy")

_MODES = ("approx", "extended", "fuzzy", "exact", "parallel-exact")
_CFG_FIELDS = {f.name for f in fields(IndexConfig)}


def _index_dir(args) -> Path:
    d = args.index or os.environ.get("DUMPY_DIR")
    if not d:
        raise SystemExit("no index directory: pass --index or set DUMPY_DIR")
    return Path(d)


def _emit(args, records: list[dict], columns: list[str]) -> None:
    if args.format == "jsonl":
        for r in records:
            print(json.dumps(r, default=_jsonable))
        return
    widths = [max(len(c), *(len(_cell(r.get(c))) for r in records)) if records else len(c) for c in columns]
    print("  ".join(c.ljust(w) for c, w in zip(columns, widths)))
    for r in records:
        print("  ".join(_cell(r.get(c)).ljust(w) for c, w in zip(columns, widths)))


def _cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, (list, tuple)):
        return ",".join(_cell(x) for x in v)
    return "" if v is None else str(v)


def _jsonable(v):
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.floating):
        return float(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(type(v).__name__)


def _config(args, n: int) -> IndexConfig:
    values = {k: v for k, v in vars(args).items() if k in _CFG_FIELDS and v is not None}
    if args.binary_split:
        values["split"] = "binary"
    values["n"] = n
    return IndexConfig(**values)


def _queries(path):
    from .sax_stage import open_dataset

    return open_dataset(path).read()


def cmd_gen(args) -> None:
    from .sax_stage import gen_noisy_queries, gen_random_walk, open_dataset

    if args.noisy_from:
        ds = gen_noisy_queries(open_dataset(args.noisy_from), args.count, args.snr, args.seed, args.out)
    else:
        ds = gen_random_walk(args.count, args.n, args.seed, args.out)
    _emit(args, [{"path": str(ds.path), "count": ds.count, "n": ds.n}], ["path", "count", "n"])


def cmd_sax(args) -> None:
    from .sax_stage import build_sax_table, open_dataset

    ds = open_dataset(args.data)
    t = time.perf_counter()
    table = build_sax_table(ds, args.w or 16, args.c or 256, workers=args.workers)
    table.save(args.out)
    _emit(args, [{"path": args.out, "count": table.count, "w": table.w, "seconds": time.perf_counter() - t}],
          ["path", "count", "w", "seconds"])


def cmd_build(args) -> None:
    from .build import build_index
    from .evaluation import index_stats
    from .parallel_build import BuildPipelinePlan, parallel_build, pipeline_report
    from .sax_stage import open_dataset

    ds = open_dataset(args.data)
    cfg = _config(args, ds.n)
    d = _index_dir(args)
    t = time.perf_counter()
    if args.parallel:
        index = parallel_build(ds, cfg, d, BuildPipelinePlan.uniform(args.workers))
    else:
        index = build_index(ds, cfg, d)
    rec = {"index": str(d), "mode": "parallel" if args.parallel else "serial",
           "seconds": time.perf_counter() - t, **index_stats(index)}
    if args.parallel:
        rep = pipeline_report(index)
        rec["overlap_fraction"] = rep["overlap_fraction"]
        rec.update({f"{s}_s": v["wall_s"] for s, v in rep["stages"].items()})
    index.close()
    _emit(args, [rec], list(rec))


def _run_queries(index, Q, args):
    from .query import (approx_search, dumpyos_f_search, exact_search, extended_approx_search,
                        parallel_exact_search)

    dist = DistanceKind.parse(args.dist or index.cfg.distance, args.window or index.cfg.window)
    out = []
    for q in Q:
        t = time.perf_counter()
        if args.mode == "approx":
            res = approx_search(index, q, args.k, dist)
        elif args.mode == "extended":
            res = extended_approx_search(index, q, args.k, args.nbr, dist)
        elif args.mode == "fuzzy":
            res = dumpyos_f_search(index, q, args.k, args.nbr, args.f, dist)
        elif args.mode == "parallel-exact":
            res = parallel_exact_search(index, q, args.k, dist, args.eta, args.workers)
        else:
            res = exact_search(index, q, args.k, dist)
        out.append((res, time.perf_counter() - t))
    return dist, out


def cmd_query(args) -> None:
    from .persist import load

    index = load(_index_dir(args))
    Q = _queries(args.queries)
    _, out = _run_queries(index, Q, args)
    recs = [{"query": i, "ordinals": res.ordinals.tolist(), "distances": res.distances.tolist(),
             "ms": 1000 * sec, "packs": res.counters["nodes_visited"], "scanned": res.counters["series_scanned"]}
            for i, (res, sec) in enumerate(out)]
    _emit(args, recs, ["query", "ordinals", "distances", "ms", "packs", "scanned"])


def cmd_oracle(args) -> None:
    from .evaluation import brute_force_knn
    from .sax_stage import open_dataset

    ds = open_dataset(args.data)
    dist = DistanceKind.parse(args.dist or "ed", args.window or 0.1)
    gt = brute_force_knn(ds, _queries(args.queries), args.k, dist, cache_dir=args.cache)
    recs = [{"query": i, "ordinals": o.tolist(), "distances": d.tolist()}
            for i, (o, d) in enumerate(zip(gt.ordinals, gt.distances))]
    _emit(args, recs, ["query", "ordinals", "distances"])


def cmd_eval(args) -> None:
    from .evaluation import brute_force_knn, error_ratio, map_score
    from .persist import load
    from .sax_stage import open_dataset

    index = load(_index_dir(args))
    Q = _queries(args.queries)
    dist, out = _run_queries(index, Q, args)
    gt = brute_force_knn(open_dataset(args.data), Q, args.k, dist, cache_dir=args.cache)
    ords = [r.ordinals for r, _ in out]
    dists = [r.distances for r, _ in out]
    ms = np.array([1000 * s for _, s in out])
    mean_ratio, _, skipped = error_ratio(dists, gt.distances, args.k)
    rec = {
        "mode": args.mode, "k": args.k, "nbr": args.nbr, "dist": str(dist), "queries": len(Q),
        "map": map_score(ords, gt.ordinals, args.k, dists, gt.distances),
        "error_ratio": mean_ratio, "zero_distance_terms": skipped,
        "p50_ms": float(np.percentile(ms, 50)), "p95_ms": float(np.percentile(ms, 95)),
        "packs_per_query": float(np.mean([r.counters["nodes_visited"] for r, _ in out])),
        "bytes_per_query": float(np.mean([r.counters["bytes_read"] for r, _ in out])),
    }
    _emit(args, [rec], list(rec))


def cmd_stats(args) -> None:
    from .evaluation import index_stats
    from .persist import load

    rec = {"index": str(_index_dir(args)), **index_stats(load(_index_dir(args)))}
    _emit(args, [rec], list(rec))


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with option values")
    common.add_argument("--format", choices=("table", "jsonl"), default="table")
    common.add_argument("--index", help="index directory (default: $DUMPY_DIR)")
    common.add_argument("-v", "--verbose", action="store_true")

    search = argparse.ArgumentParser(add_help=False)
    search.add_argument("--mode", choices=_MODES, default="exact")
    search.add_argument("--k", type=int, default=1)
    search.add_argument("--nbr", type=int, default=1)
    search.add_argument("--f", type=float, default=0.3, help="fuzzy boundary fraction")
    search.add_argument("--dist", choices=("ed", "dtw"))
    search.add_argument("--window", type=float, help="DTW band as a fraction of n")
    search.add_argument("--eta", type=int, default=24, help="buffer slots of parallel exact search")
    search.add_argument("--workers", type=int, default=8)

    p = argparse.ArgumentParser(prog="dumpy", description="Disk-backed data series similarity index.")
    sub = p.add_subparsers(dest="verb", required=True)
    p._verbs = sub.choices

    g = sub.add_parser("gen", parents=[common], help="generate random-walk data or noisy queries")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=1000)
    g.add_argument("--n", type=int, default=256)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noisy-from", help="dataset to draw noisy copies from")
    g.add_argument("--snr", type=float, default=20.0, help="signal to noise ratio in dB")
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("sax", parents=[common], help="compute the SAX table of a dataset")
    s.add_argument("data")
    s.add_argument("--out", required=True)
    s.add_argument("--w", type=int)
    s.add_argument("--c", type=int)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_sax)

    b = sub.add_parser("build", parents=[common], help="build an index")
    b.add_argument("data")
    mode = b.add_mutually_exclusive_group()
    mode.add_argument("--serial", action="store_true")
    mode.add_argument("--parallel", action="store_true")
    b.add_argument("--workers", type=int, default=5)
    b.add_argument("--fuzzy", type=float)
    b.add_argument("--binary-split", action="store_true")
    b.add_argument("--exhaustive-split", action="store_true", default=None)
    for name, typ in (("w", int), ("c", int), ("th", int), ("alpha", float), ("fill-low", float),
                      ("fill-high", float), ("rho", float), ("max-replication", int), ("window", float),
                      ("batch-rows", int)):
        b.add_argument(f"--{name}", type=typ)
    b.add_argument("--distance", choices=("ed", "dtw"))
    b.set_defaults(func=cmd_build)

    q = sub.add_parser("query", parents=[common, search], help="answer queries from a query file")
    q.add_argument("queries")
    q.set_defaults(func=cmd_query)

    e = sub.add_parser("eval", parents=[common, search], help="score a query mode against brute force")
    e.add_argument("data")
    e.add_argument("queries")
    e.add_argument("--cache", help="ground-truth cache directory")
    e.set_defaults(func=cmd_eval)

    st = sub.add_parser("stats", parents=[common], help="index structure statistics")
    st.set_defaults(func=cmd_stats)

    o = sub.add_parser("oracle", parents=[common], help="brute-force kNN")
    o.add_argument("data")
    o.add_argument("queries")
    o.add_argument("--k", type=int, default=1)
    o.add_argument("--dist", choices=("ed", "dtw"))
    o.add_argument("--window", type=float)
    o.add_argument("--cache", help="ground-truth cache directory")
    o.set_defaults(func=cmd_oracle)
    return p


def _apply_config(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        values = json.loads(Path(args.config).read_text())
    except (OSError, ValueError) as exc:
        raise SystemExit(f"cannot read config {args.config}: {exc}")
    if not isinstance(values, dict):
        raise SystemExit(f"{args.config}: expected a JSON object")
    values = {k.replace("-", "_"): v for k, v in values.items()}
    unknown = sorted(set(values) - set(vars(args)))
    if unknown:
        raise SystemExit(f"{args.config}: unknown option(s) {', '.join(unknown)}")
    # file values become defaults, so flags given on the command line still win
    parser._verbs[args.verb].set_defaults(**values)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = _parser()
    args = _apply_config(parser, argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except DumpyError as exc:
        print(f"dumpy: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"dumpy: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
