"""Approximate, fuzzy-boundary and exact kNN search over a built index."""
from __future__ import annotations

import heapq
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .exceptions import InternalError
from .index import Index
from .metrics import ED, DistanceKind, envelope, query_bounds, region_lb_sq, scan_dtw, scan_ed
from .series import interval_bounds, paa, prepare, promote_isax, promote_isax_fixed, sax_from_paa

__all__ = [
    "QueryResult",
    "adapted_routing",
    "approx_search",
    "dumpyos_f_search",
    "exact_search",
    "extended_approx_search",
    "parallel_exact_search",
]

# slack on pruning comparisons so rounding in a bound can never cost exactness
_PRUNE_RTOL = 1e-9


@dataclass
class QueryResult:
    ordinals: np.ndarray
    distances: np.ndarray
    counters: dict = field(default_factory=dict)
    visited: list = field(default_factory=list)
    pruned: list = field(default_factory=list)

    def __len__(self):
        return len(self.ordinals)


class _Search:
    """Per-query state: summaries of the query and the running k best."""

    def __init__(self, index: Index, q, k: int, dist: DistanceKind = ED):
        cfg = index.cfg
        self.index, self.k, self.dist = index, int(k), dist
        q = np.asarray(q, dtype=np.float64).reshape(-1)
        if len(q) != cfg.n:
            raise ValueError(f"query length {len(q)} does not match index n={cfg.n}")
        self.q = prepare(q).astype(np.float64)
        self.paa = paa(self.q, cfg.w)
        self.sax = sax_from_paa(self.paa, cfg.c)
        self.qlo, self.qhi = query_bounds(self.q, cfg.w, dist)
        self.radius = dist.radius(cfg.n) if dist.is_dtw else 0
        self.env = envelope(self.q, self.radius) if dist.is_dtw else None
        self.top = np.full(self.k, np.inf)
        self.res_d2 = np.empty(0)
        self.res_ord = np.empty(0, dtype=np.int64)
        self.seen = np.zeros(max(index.next_ordinal, 1), dtype=bool)
        self.visited: list[int] = []
        self.visited_set: set[int] = set()
        self.pruned: list = []
        self.counters = {"nodes_visited": 0, "series_scanned": 0, "bytes_read": 0, "lb_computations": 0}

    # -- bounds ----------------------------------------------------------
    def lb_sq(self, nid: int) -> float:
        nd = self.index.nodes[nid]
        self.counters["lb_computations"] += 1
        cfg = self.index.cfg
        return float(region_lb_sq(self.qlo, self.qhi, nd.codes, nd.depths, cfg.n, cfg.c))

    def lb_many(self, ids) -> np.ndarray:
        if not len(ids):
            return np.empty(0)
        nodes = self.index.nodes
        codes = np.stack([nodes[i].codes for i in ids])
        depths = np.stack([nodes[i].depths for i in ids])
        self.counters["lb_computations"] += len(ids)
        cfg = self.index.cfg
        return region_lb_sq(self.qlo, self.qhi, codes, depths, cfg.n, cfg.c)

    def kth(self) -> float:
        return self.top[-1]

    def prunable(self, lb2: float) -> bool:
        return lb2 > self.top[-1] * (1.0 + _PRUNE_RTOL)

    # -- scanning --------------------------------------------------------
    def load(self, pid: int):
        pack = self.index.nodes[pid]
        return pid, self.index.read_pack(pack), pack.live_mask()

    def distances(self, recs, live, top) -> np.ndarray:
        mask = live & ~self.seen[recs["ordinal"].astype(np.int64)]
        S = recs["series"]
        if self.dist.is_dtw:
            return scan_dtw(S, self.q, self.radius, self.env, mask, top)
        return scan_ed(S, self.q, mask, top)

    def merge(self, ords, d2) -> None:
        keep = np.isfinite(d2)
        ords = np.concatenate([self.res_ord, ords[keep].astype(np.int64)])
        d2 = np.concatenate([self.res_d2, d2[keep]])
        order = np.lexsort((ords, d2))
        ords, d2 = ords[order], d2[order]
        _, first = np.unique(ords, return_index=True)
        first.sort()
        ords, d2 = ords[first][: self.k], d2[first][: self.k]
        self.res_ord, self.res_d2 = ords, d2
        self.top[:] = np.inf
        self.top[: len(d2)] = d2

    def account(self, pid: int, recs) -> None:
        self.visited.append(pid)
        self.visited_set.add(pid)
        self.counters["nodes_visited"] += 1
        self.counters["series_scanned"] += len(recs)
        self.counters["bytes_read"] += recs.nbytes

    def mark_seen(self, recs, live) -> None:
        self.seen[recs["ordinal"][live].astype(np.int64)] = True

    def scan(self, pid: int) -> None:
        if pid in self.visited_set:
            return
        _, recs, live = self.load(pid)
        self.account(pid, recs)
        d2 = self.distances(recs, live, self.top.copy())
        self.mark_seen(recs, live)
        self.merge(recs["ordinal"], d2)

    def result(self) -> QueryResult:
        return QueryResult(self.res_ord.copy(), np.sqrt(self.res_d2), dict(self.counters),
                           list(self.visited), list(self.pruned))

    # -- routing ---------------------------------------------------------
    def nearest_child(self, nid: int) -> int:
        kids = self.index.children(nid)
        lbs = self.lb_many(kids)
        return kids[int(np.lexsort((kids, lbs))[0])]

    def path(self) -> tuple[list[int], bool]:
        """Routing path root -> leaf; missing entries fall back to the lowest-bound child.

        Returns the path and whether every step was a direct routing-table hit.
        """
        index, b = self.index, self.index.cfg.b
        path, direct = [0], True
        nd = index.root
        if not nd.is_leaf and not nd.routing:
            return [], False
        while not nd.is_leaf:
            cid = nd.routing.get(promote_isax(nd.depths, self.sax, nd.csl, b))
            if cid is None:
                direct = False
                cid = self.nearest_child(nd.id)
            path.append(cid)
            nd = index.nodes[cid]
        return path, direct

    def ordered_packs(self, nid: int) -> list[int]:
        packs = self.index.subtree_packs(nid)
        if len(packs) == 1:
            return list(packs)
        lbs = self.lb_many(packs)
        return [packs[i] for i in np.lexsort((packs, lbs))]

    def visit_order(self, nbr: int):
        """Packs in extended-search order: the target leaf, the rest of the
        stopping node's subtree, then its siblings' subtrees by lower bound."""
        path, _ = self.path()
        if not path:
            return
        index = self.index
        stop = next(i for i, nid in enumerate(path) if index.leaf_count(nid) <= nbr)
        target = path[-1]
        yield target
        for pid in self.ordered_packs(path[stop]):
            if pid != target:
                yield pid
        if stop == 0:
            return
        sibs = [c for c in index.children(path[stop - 1]) if c != path[stop]]
        lbs = self.lb_many(sibs)
        for i in np.lexsort((sibs, lbs)):
            yield from self.ordered_packs(sibs[i])


def _budgeted(ctx: _Search, nbr: int) -> None:
    for pid in ctx.visit_order(nbr):
        if len(ctx.visited) >= nbr:
            break
        ctx.scan(pid)


def extended_approx_search(index: Index, q, k: int, nbr: int = 1, dist: DistanceKind = ED) -> QueryResult:
    """kNN among the ``nbr`` packs nearest to the query's routing path."""
    if nbr < 1:
        raise ValueError("nbr must be >= 1")
    ctx = _Search(index, q, k, DistanceKind.parse(dist))
    with index.lock.read():
        _budgeted(ctx, nbr)
    return ctx.result()


def approx_search(index: Index, q, k: int, dist: DistanceKind = ED) -> QueryResult:
    """kNN inside the single pack the query routes to."""
    return extended_approx_search(index, q, k, 1, dist)


def adapted_routing(index: Index, nid: int, query_sax, ctx: _Search | None = None) -> int:
    """Descend from a fuzzy node towards the leaf closest to the query."""
    b = index.cfg.b
    nd = index.nodes[nid]
    if nd.is_leaf:
        return nid
    query_sax = np.asarray(query_sax)
    off = [s for s in range(index.cfg.w) if (int(query_sax[s]) >> (b - int(nd.depths[s]))) != int(nd.codes[s])]
    if len(off) != 1:
        raise InternalError(f"node {nid} is not a one-segment fuzzy node ({len(off)} mismatching segments)")
    seg = off[0]
    bit = 1 - (int(nd.codes[seg]) & 1)
    while not nd.is_leaf:
        cid = nd.routing.get(promote_isax_fixed(nd.depths, query_sax, nd.csl, seg, bit, b))
        if cid is None:
            if ctx is None:
                cid = min(nd.routing.values())
            else:
                cid = ctx.nearest_child(nd.id)
        nd = index.nodes[cid]
    return nd.id


def dumpyos_f_search(index: Index, q, k: int, nbr: int = 1, f: float = 0.3, dist: DistanceKind = ED) -> QueryResult:
    """Extended search that first visits siblings whose boundary lies close to the query."""
    if nbr < 1:
        raise ValueError("nbr must be >= 1")
    ctx = _Search(index, q, k, DistanceKind.parse(dist))
    cfg, b = index.cfg, index.cfg.b
    with index.lock.read():
        path, _ = ctx.path()
        if not path:
            return ctx.result()
        pq: dict[int, float] = {}
        direct = True
        for depth, nid in enumerate(path[:-1]):
            nd = index.nodes[nid]
            sid = promote_isax(nd.depths, ctx.sax, nd.csl, b)
            child_id = path[depth + 1]
            if nd.routing.get(sid) != child_id:
                direct = False
            if not direct:
                break
            child = index.nodes[child_id]
            lam = len(nd.csl)
            for j, seg in enumerate(nd.csl):
                d = int(nd.depths[seg]) + 1
                code = (int(nd.codes[seg]) << 1) | ((sid >> (lam - 1 - j)) & 1)
                lo, hi = interval_bounds(code, d, cfg.c)
                bp = float(hi) if code & 1 == 0 else float(lo)
                clo, chi = interval_bounds(child.codes[seg], child.depths[seg], cfg.c, clamped=True)
                es = abs(ctx.paa[seg] - bp)
                if es < f * float(chi - clo):
                    sib = nd.routing.get(sid ^ (1 << (lam - 1 - j)))
                    if sib is not None and sib != child_id and es < pq.get(sib, np.inf):
                        pq[sib] = es
        ctx.scan(path[-1])
        heap = [(es, nid) for nid, es in pq.items()]
        heapq.heapify(heap)
        while heap and len(ctx.visited) < nbr:
            _, nid = heapq.heappop(heap)
            leaf = adapted_routing(index, nid, ctx.sax, ctx)
            ctx.scan(leaf)
        _budgeted(ctx, nbr)
    res = ctx.result()
    res.counters["fuzzy_candidates"] = len(pq)
    return res


def _nonempty(index: Index) -> bool:
    return index.root.is_leaf or bool(index.root.routing)


def _expand(ctx: _Search, heap: list, nid: int, lb2: float) -> None:
    index = ctx.index
    kids = index.children(nid)
    lbs = ctx.lb_many(kids)
    for cid, clb in zip(kids, lbs):
        clb = max(float(clb), lb2)
        if ctx.prunable(clb):
            ctx.pruned.append((cid, clb))
        else:
            heapq.heappush(heap, (clb, cid))


def _seed(ctx: _Search) -> None:
    path, _ = ctx.path()
    if path:
        ctx.scan(path[-1])


def exact_search(index: Index, q, k: int, dist: DistanceKind = ED) -> QueryResult:
    """Exact kNN: seed with the target pack, then best-first traversal with lower-bound pruning."""
    ctx = _Search(index, q, k, DistanceKind.parse(dist))
    with index.lock.read():
        _seed(ctx)
        heap = [(0.0, 0)] if _nonempty(index) else []
        while heap:
            lb2, nid = heapq.heappop(heap)
            if ctx.prunable(lb2):
                ctx.pruned.append((nid, lb2))
                ctx.pruned.extend((n, l) for l, n in heap)
                break
            if index.nodes[nid].is_leaf:
                ctx.scan(nid)
            else:
                _expand(ctx, heap, nid, lb2)
    return ctx.result()


def parallel_exact_search(index: Index, q, k: int, dist: DistanceKind = ED, eta: int = 24,
                          workers: int = 8) -> QueryResult:
    """Exact kNN with a double-buffered load/compute pipeline.

    Qualified packs are registered into a preparing buffer of ``eta``
    slots. When it is full the buffers swap: loading workers read the new
    buffer while computing workers evaluate the one whose data is ready.
    With a single worker the stages run back to back.
    """
    if eta < 1:
        raise ValueError("eta must be >= 1")
    ctx = _Search(index, q, k, DistanceKind.parse(dist))
    n_load = max(1, workers // 2)
    n_comp = max(1, workers - n_load)
    loaders = ThreadPoolExecutor(n_load) if workers > 1 else None
    computers = ThreadPoolExecutor(n_comp) if workers > 1 else None
    registered: set[int] = set()
    trace: list[int] = []

    def qualify(heap, state):
        buf = []
        while len(buf) < eta:
            if not heap:
                state["done"] = True
                break
            lb2, nid = heap[0]
            if ctx.prunable(lb2):
                ctx.pruned.extend((n, l) for l, n in heap)
                heap.clear()
                state["done"] = True
                break
            heapq.heappop(heap)
            if index.nodes[nid].is_leaf:
                if nid not in registered and nid not in ctx.visited_set:
                    registered.add(nid)
                    buf.append(nid)
            else:
                _expand(ctx, heap, nid, lb2)
        return buf

    def load_all(buf):
        return [ctx.load(p) for p in buf]

    def compute(ready):
        if not ready:
            return
        snapshot = ctx.top.copy()

        def one(item):
            _, recs, live = item
            return ctx.distances(recs, live, snapshot.copy())

        outs = list(computers.map(one, ready)) if computers is not None else [one(it) for it in ready]
        for (pid, recs, live), d2 in zip(ready, outs):
            trace.append(pid)
            ctx.account(pid, recs)
            ctx.mark_seen(recs, live)
            ctx.merge(recs["ordinal"], d2)

    try:
        with index.lock.read():
            _seed(ctx)
            heap = [(0.0, 0)] if _nonempty(index) else []
            state = {"done": not heap}
            if loaders is None:
                while not state["done"]:
                    compute(load_all(qualify(heap, state)))
            else:
                pending = None
                while True:
                    buf = qualify(heap, state) if not state["done"] else []
                    ready = [fut.result() for fut in pending] if pending is not None else []
                    pending = [loaders.submit(ctx.load, p) for p in buf] if buf else None
                    compute(ready)
                    if state["done"] and pending is None:
                        break
    finally:
        for pool in (loaders, computers):
            if pool is not None:
                pool.shutdown()
    res = ctx.result()
    res.counters["load_trace"] = trace
    return res
