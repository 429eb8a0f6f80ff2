"""Four-stage concurrent build.

Stage 1 computes the SAX table from a double-buffered scan and grows the
first layer. Stage 2 writes the packs sitting directly below the root
while Stage 3 grows the deeper subtrees, one task per first-layer
internal node, largest first. After both finish, Stage 4 scans the raw
data again and fills the remaining packs, routing one buffer while the
next is read and the previous one is flushed.

Every decision is taken from the completed SAX table, and node ids and
extents are assigned in the same order as the serial build, so the output
does not depend on worker counts or scheduling.
"""
from __future__ import annotations

import threading
import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass

import numpy as np

from .build import _Fuzzer, assemble_at, deeper_duplicates, finish, grow_first_layer, route_batch
from .config import IndexConfig
from .index import Index
from .persist import save
from .sax_stage import DEFAULT_BATCH_BYTES, DatasetHandle, SaxTable
from .series import bits_for, paa, prepare, promote_rows, sax_from_paa
from .tree import LeafPack, grow_subtree

__all__ = ["BuildPipelinePlan", "parallel_build", "pipeline_report"]


@dataclass(frozen=True)
class BuildPipelinePlan:
    sax_workers: int = 5
    subtree_workers: int = 5
    routing_workers: int = 5
    flush_workers: int = 5
    buffer_rows: int = 0  # rows per F buffer, 0 picks half the default batch
    sbuffer_records: int = 256

    def __post_init__(self):
        for name in ("sax_workers", "subtree_workers", "routing_workers", "flush_workers", "sbuffer_records"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.buffer_rows < 0:
            raise ValueError("buffer_rows must be >= 0")

    @classmethod
    def uniform(cls, workers: int, **kw) -> "BuildPipelinePlan":
        return cls(workers, workers, workers, workers, **kw)

    @property
    def serial(self) -> bool:
        return max(self.sax_workers, self.subtree_workers, self.routing_workers, self.flush_workers) == 1

    def rows_per_buffer(self, n: int) -> int:
        return self.buffer_rows or max(1, DEFAULT_BATCH_BYTES // (8 * n))


class _Recorder:
    """Stage events, busy intervals and byte counters of one build."""

    def __init__(self):
        self.t0 = time.perf_counter()
        self.events: list[tuple[float, str, str]] = []
        self.spans: list[tuple[float, float, str, str]] = []
        self.bytes = defaultdict(lambda: {"read": 0, "write": 0})
        self.walls: dict[str, list] = {}
        self._lock = threading.Lock()

    def now(self) -> float:
        return time.perf_counter() - self.t0

    def event(self, stage: str, what: str) -> None:
        with self._lock:
            t = self.now()
            self.events.append((t, stage, what))
            if what == "start":
                self.walls[stage] = [t, t]
            elif what == "end":
                self.walls[stage][1] = t

    @contextmanager
    def span(self, stage: str, kind: str):
        a = self.now()
        try:
            yield
        finally:
            b = self.now()
            with self._lock:
                self.spans.append((a, b, stage, kind))

    def count(self, stage: str, read: int = 0, write: int = 0) -> None:
        with self._lock:
            self.bytes[stage]["read"] += read
            self.bytes[stage]["write"] += write

    def overlap_fraction(self) -> float:
        """Share of busy time during which two or more activities ran at once."""
        if not self.spans:
            return 0.0
        edges = sorted([(a, 1) for a, _, _, _ in self.spans] + [(b, -1) for _, b, _, _ in self.spans])
        busy = multi = 0.0
        depth, last = 0, edges[0][0]
        for t, step in edges:
            if depth >= 1:
                busy += t - last
            if depth >= 2:
                multi += t - last
            depth += step
            last = t
        return multi / busy if busy > 0 else 0.0


class _SBuffers:
    """Per-pack staging areas, each flushed as one contiguous append."""

    def __init__(self, index: Index, plan: BuildPipelinePlan, limit: int, rec: _Recorder, stage: str):
        self.index, self.rec, self.stage = index, rec, stage
        self.cap = plan.sbuffer_records
        self.limit = max(limit, self.cap)
        self.buf: dict[int, list] = defaultdict(list)
        self.sizes: dict[int, int] = defaultdict(int)
        self.total = 0
        self.slot: dict[int, int] = defaultdict(int)
        n = plan.flush_workers
        self.workers = [ThreadPoolExecutor(1) for _ in range(n)] if not plan.serial else None
        self.futures: list = []

    def _write(self, pack: LeafPack, slot: int, recs: np.ndarray) -> None:
        with self.rec.span(self.stage, "write"):
            self.index.store.write(pack.file_id, pack.offset + slot, recs)
        self.rec.count(self.stage, write=recs.nbytes)

    def flush(self, pid: int) -> None:
        parts = self.buf.pop(pid, None)
        if not parts:
            return
        recs = parts[0] if len(parts) == 1 else np.concatenate(parts)
        self.total -= self.sizes.pop(pid)
        slot = self.slot[pid]
        self.slot[pid] += len(recs)
        pack = self.index.nodes[pid]
        if self.workers is None:
            self._write(pack, slot, recs)
        else:
            self.futures.append(self.workers[pid % len(self.workers)].submit(self._write, pack, slot, recs))

    def add(self, blocks) -> None:
        for pid, recs in blocks:
            self.buf[pid].append(recs)
            self.sizes[pid] += len(recs)
            self.total += len(recs)
            if self.sizes[pid] >= self.cap:
                self.flush(pid)
        if self.total > self.limit:
            for pid in sorted(self.buf):
                self.flush(pid)

    def drain(self) -> None:
        for pid in sorted(self.buf):
            self.flush(pid)
        for fut in self.futures:
            fut.result()
        self.futures = []
        if self.workers is not None:
            for w in self.workers:
                w.shutdown()
        for pid, used in self.slot.items():
            self.index.nodes[pid].count = used


def _ranges(count: int, step: int):
    return [(a, min(a + step, count)) for a in range(0, count, step)]


def _read(ds: DatasetHandle, rng, rec: _Recorder, stage: str) -> np.ndarray:
    with rec.span(stage, "read"):
        block = ds.read(*rng)
    rec.count(stage, read=block.nbytes)
    return block


def _double_buffered(ds: DatasetHandle, ranges, rec: _Recorder, stage: str, serial: bool):
    """Yield blocks in order; the next block is read while the caller works on the current one."""
    if serial:
        for rng in ranges:
            yield rng[0], _read(ds, rng, rec, stage)
        return
    with ThreadPoolExecutor(1) as loader:
        pending = loader.submit(_read, ds, ranges[0], rec, stage) if ranges else None
        for i, rng in enumerate(ranges):
            block = pending.result()
            if i + 1 < len(ranges):
                pending = loader.submit(_read, ds, ranges[i + 1], rec, stage)
            yield rng[0], block


def _cuts(m: int, parts: int):
    cuts = np.linspace(0, m, parts + 1).astype(int)
    return [(a, b) for a, b in zip(cuts[:-1], cuts[1:]) if b > a]


def _stage1(ds, cfg, plan, rec, pool):
    rec.event("stage1", "start")
    w, c = cfg.w, cfg.c
    rows = np.empty((ds.count, w), dtype=np.uint8)
    paas = np.empty((ds.count, w), dtype=np.float64) if cfg.fuzzy > 0 else None

    def summarize(block, start, lo, hi):
        with rec.span("stage1", "compute"):
            p = paa(prepare(block[lo:hi]), w)
            rows[start + lo:start + hi] = sax_from_paa(p, c)
            if paas is not None:
                paas[start + lo:start + hi] = p

    ranges = _ranges(ds.count, plan.rows_per_buffer(ds.n))
    for start, block in _double_buffered(ds, ranges, rec, "stage1", plan.serial):
        parts = _cuts(len(block), plan.sax_workers)
        if pool is None:
            for lo, hi in parts:
                summarize(block, start, lo, hi)
        else:
            for f in [pool.submit(summarize, block, start, lo, hi) for lo, hi in parts]:
                f.result()
    table = SaxTable(w, bits_for(c), rows)
    with rec.span("stage1", "compute"):
        nodes, first = grow_first_layer(rows, cfg)
    rec.event("stage1", "end")
    return table, paas, nodes, first


def _stage2(ds, index, table, paas, plan, rec):
    """Fuzzy copies into first-layer packs, then write those packs."""
    rec.event("stage2", "start")
    cfg, nodes = index.cfg, index.nodes
    root = nodes[0]
    fz = None
    extra: dict = {}
    d_ord = d_pack = np.empty(0, dtype=np.int64)
    if cfg.fuzzy > 0:
        with rec.span("stage2", "compute"):
            fz = _Fuzzer(nodes, table.rows, paas, cfg)
            for nd in nodes[1:]:
                if nd.is_leaf:
                    fz.into_pack(nd)
            extra = dict(fz.plan.extra)
            d_ord, d_pack = fz.plan.arrays()
    is_pack = np.array([nd.is_leaf for nd in nodes])
    is_pack[0] = False
    for fid, cid in enumerate(index.children(0)):
        if is_pack[cid]:
            p = nodes[cid]
            p.file_id, p.capacity, p.count = fid, p.size + extra.get(cid, 0), 0
            p.offset = index.store.allocate(fid, p.capacity)
            p.deleted = np.zeros(p.capacity, dtype=bool)
    step = plan.rows_per_buffer(ds.n)
    sbuf = _SBuffers(index, plan, step, rec, "stage2")
    lut = root.lut()
    for start, block in _double_buffered(ds, _ranges(ds.count, step), rec, "stage2", plan.serial):
        with rec.span("stage2", "compute"):
            sax = table.rows[start:start + len(block)]
            target = lut[promote_rows(root.depths, sax, root.csl, cfg.b)]
            blocks = route_batch(index, start, prepare(block), sax, d_ord, d_pack, only_packs=is_pack, target=target)
        sbuf.add(blocks)
    sbuf.drain()
    rec.event("stage2", "end")
    return fz


def _stage3(first, sax, cfg, plan, rec, pool):
    rec.event("stage3", "start")

    def grow(child, rows):
        with rec.span("stage3", "compute"):
            return grow_subtree(child, rows, sax, cfg)

    gids = [child.id for child, _ in first]
    order = sorted(range(len(first)), key=lambda i: (-len(first[i][1]), gids[i]))
    if pool is None:
        local = {gids[i]: grow(*first[i]) for i in order}
    else:
        futs = {gids[i]: pool.submit(grow, *first[i]) for i in order}
        local = {g: f.result() for g, f in futs.items()}
    rec.event("stage3", "end")
    return [(g, local[g]) for g in gids]


def _stage4(ds, index, table, plan, dup, rec, pool):
    rec.event("stage4", "start")
    nodes = index.nodes
    deep = np.array([nd.is_leaf and nd.parent != 0 for nd in nodes])
    d_ord, d_pack = dup
    step = plan.rows_per_buffer(ds.n)
    sbuf = _SBuffers(index, plan, step, rec, "stage4")

    def route(block, start, lo, hi):
        with rec.span("stage4", "compute"):
            return route_batch(index, start + lo, prepare(block[lo:hi]), table.rows[start + lo:start + hi],
                               d_ord, d_pack, only_packs=deep)

    for start, block in _double_buffered(ds, _ranges(ds.count, step), rec, "stage4", plan.serial):
        parts = _cuts(len(block), plan.routing_workers)
        if pool is None:
            outs = [route(block, start, lo, hi) for lo, hi in parts]
        else:
            outs = [f.result() for f in [pool.submit(route, block, start, lo, hi) for lo, hi in parts]]
        merged: dict[int, list] = defaultdict(list)
        for blocks in outs:
            for pid, recs in blocks:
                merged[pid].append(recs)
        sbuf.add((pid, np.concatenate(merged[pid])) for pid in sorted(merged))
    sbuf.drain()
    rec.event("stage4", "end")


def parallel_build(ds: DatasetHandle, cfg: IndexConfig, directory, plan: BuildPipelinePlan | None = None) -> Index:
    """Build the same index as the serial build with a staged, multi-threaded pipeline."""
    plan = plan or BuildPipelinePlan()
    if ds.n != cfg.n:
        raise ValueError(f"dataset series length {ds.n} does not match config n={cfg.n}")
    rec = _Recorder()
    trace: list = []
    sax_pool = ThreadPoolExecutor(plan.sax_workers) if not plan.serial else None
    sub_pool = ThreadPoolExecutor(plan.subtree_workers) if not plan.serial else None
    route_pool = ThreadPoolExecutor(plan.routing_workers) if not plan.serial else None
    try:
        table, paas, nodes, first = _stage1(ds, cfg, plan, rec, sax_pool)
        index = Index(cfg, directory, nodes)
        index.store.write_trace = trace
        if not len(table.rows):
            from .build import build_index

            return build_index(ds, cfg, directory, table)
        if plan.serial:
            fz = _stage2(ds, index, table, paas, plan, rec)
            subtrees = _stage3(first, table.rows, cfg, plan, rec, None)
        else:
            with ThreadPoolExecutor(1) as side:
                s2 = side.submit(_stage2, ds, index, table, paas, plan, rec)
                subtrees = _stage3(first, table.rows, cfg, plan, rec, sub_pool)
                fz = s2.result()
        rec.event("barrier", "stage2+3")
        for gid, local in subtrees:
            assemble_at(index.nodes, gid, local)
        index.nodes[0].invalidate()
        index.touch()
        dup = (np.empty(0, np.int64), np.empty(0, np.int64))
        duplicate_plan = None
        if fz is not None:
            duplicate_plan = deeper_duplicates(fz)
            dup = duplicate_plan.arrays()
        for fid, cid in enumerate(index.children(0)):
            if not index.nodes[cid].is_leaf:
                index.store.file_end[fid] = 0
                for pid in sorted(index.subtree_packs(cid)):
                    p = index.nodes[pid]
                    p.file_id, p.count = fid, 0
                    p.capacity = p.size + (duplicate_plan.extra.get(pid, 0) if duplicate_plan else 0)
                    p.offset = index.store.allocate(fid, p.capacity)
                    p.deleted = np.zeros(p.capacity, dtype=bool)
        _stage4(ds, index, table, plan, dup, rec, route_pool)
    finally:
        for pool in (sax_pool, sub_pool, route_pool):
            if pool is not None:
                pool.shutdown()
    index.store.write_trace = None
    finish(index, table, duplicate_plan)
    save(index)
    index.build_report = _report(rec, plan, ds, index, trace)
    return index


def _report(rec: _Recorder, plan: BuildPipelinePlan, ds: DatasetHandle, index: Index, trace) -> dict:
    stages = {}
    for name in ("stage1", "stage2", "stage3", "stage4"):
        a, b = rec.walls.get(name, (0.0, 0.0))
        stages[name] = {"wall_s": b - a, **rec.bytes[name]}
    return {
        "plan": asdict(plan),
        "wall_s": rec.now(),
        "stages": stages,
        "overlap_fraction": 0.0 if plan.serial else rec.overlap_fraction(),
        "events": list(rec.events),
        "write_trace": list(trace),
        "record_bytes": index.store.recsize,
        "dataset_bytes": ds.count * ds.n * 4,
    }


def pipeline_report(index: Index) -> dict:
    """Stage timings and counters of the build that produced ``index``.

    A serial build reports its two passes and an overlap fraction of 0.
    """
    rep = index.build_report
    if rep is None:
        raise ValueError("index carries no build report (loaded from disk?)")
    if "stages" in rep:
        return rep
    return {"plan": None, "wall_s": sum(rep.values()), "stages": dict(rep), "overlap_fraction": 0.0}
