"""Serial two-pass build: SAX table, structure growth, fuzzy copies, materialization."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .config import IndexConfig
from .index import Index
from .persist import save
from .sax_stage import DatasetHandle, build_sax_table, iter_batches
from .series import interval_bounds, prepare, promote_isax_fixed, promote_rows
from .storage import FLAG_DUPLICATE
from .tree import InternalNode, LeafPack, grow_subtree, split_node

__all__ = ["build_index", "build_structure", "DuplicatePlan"]


def new_root(cfg: IndexConfig, count: int) -> InternalNode:
    zeros = np.zeros(cfg.w, dtype=np.uint8)
    return InternalNode(0, zeros.copy(), zeros.copy(), count, 0, -1, rows=np.arange(count))


def grow_first_layer(sax: np.ndarray, cfg: IndexConfig) -> tuple[list, list]:
    nodes = [new_root(cfg, len(sax))]
    first = split_node(nodes[0], np.arange(len(sax)), sax, cfg, nodes) if len(sax) else []
    return nodes, first


def assemble_at(nodes: list, gid: int, local: list) -> None:
    """Append a locally numbered subtree whose root is ``nodes[gid]``."""
    base = len(nodes) - 1

    def remap(i):
        return gid if i == 0 else base + i

    for i, nd in enumerate(local):
        if i:
            nd.id = remap(i)
            nd.parent = remap(nd.parent)
        if not nd.is_leaf:
            nd.routing = {s: remap(c) for s, c in nd.routing.items()}
            nd.invalidate()
    local[0].id = gid
    nodes.extend(local[1:])


def build_structure(sax: np.ndarray, cfg: IndexConfig) -> list:
    """Grow the whole node graph from the SAX table."""
    if not len(sax):
        zeros = np.zeros(cfg.w, dtype=np.uint8)
        return [LeafPack(0, zeros.copy(), zeros.copy(), 0, 0, -1)]
    nodes, first = grow_first_layer(sax, cfg)
    for child, rows in first:
        assemble_at(nodes, child.id, grow_subtree(child, rows, sax, cfg))
    return nodes


@dataclass
class DuplicatePlan:
    """Fuzzy copies: ordinal ``ords[i]`` is copied into pack ``packs[i]``."""

    ords: list = field(default_factory=list)
    packs: list = field(default_factory=list)
    bands: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def arrays(self):
        o = np.asarray(self.ords, dtype=np.int64)
        p = np.asarray(self.packs, dtype=np.int64)
        order = np.lexsort((p, o))
        return o[order], p[order]


class _Fuzzer:
    def __init__(self, nodes, sax, paa, cfg: IndexConfig):
        self.nodes, self.sax, self.paa, self.cfg = nodes, sax, paa, cfg
        self.copies = np.ones(len(sax), dtype=np.int64)
        self.plan = DuplicatePlan()
        self.held: dict[int, set] = {}
        self._groups: dict[int, dict] = {}

    def sibling_rows(self, parent: InternalNode, sid: int) -> np.ndarray:
        groups = self._groups.get(parent.id)
        if groups is None:
            rows = parent.rows
            sids = promote_rows(parent.depths, self.sax[rows], parent.csl, self.cfg.b)
            order = np.argsort(sids, kind="stable")
            uniq, starts = np.unique(sids[order], return_index=True)
            ends = np.append(starts[1:], len(order))
            groups = {int(s): np.sort(rows[order[a:e]]) for s, a, e in zip(uniq, starts, ends)}
            self._groups[parent.id] = groups
        return groups.get(sid, np.empty(0, dtype=np.int64))

    def band(self, parent: InternalNode, seg: int, code: int):
        """Shared breakpoint and fuzzy half-width for the depth+1 symbol ``code`` on ``seg``."""
        d = int(parent.depths[seg]) + 1
        lo, hi = interval_bounds(code, d, self.cfg.c)
        clo, chi = interval_bounds(code, d, self.cfg.c, clamped=True)
        bp = float(hi) if code & 1 == 0 else float(lo)
        return bp, self.cfg.fuzzy * float(chi - clo)

    def candidates(self, parent: InternalNode, sid: int, j: int, code: int):
        lam = len(parent.csl)
        sib = sid ^ (1 << (lam - 1 - j))
        if sib not in parent.routing:
            return None
        seg = parent.csl[j]
        bp, half = self.band(parent, seg, code)
        rows = self.sibling_rows(parent, sib)
        hit = rows[np.abs(self.paa[rows, seg] - bp) < half]
        return seg, bp, half, hit

    def offer(self, pack: LeafPack, o: int, seg: int, bp: float, half: float) -> None:
        if self.copies[o] >= self.cfg.max_replication:
            return
        held = self.held.setdefault(pack.id, set())
        if o in held:
            return
        if pack.size + self.plan.extra.get(pack.id, 0) + 1 > self.cfg.th:
            return
        held.add(o)
        self.copies[o] += 1
        self.plan.extra[pack.id] = self.plan.extra.get(pack.id, 0) + 1
        self.plan.ords.append(int(o))
        self.plan.packs.append(pack.id)
        self.plan.bands.append((int(o), pack.id, seg, bp, half))

    def into_pack(self, pack: LeafPack) -> None:
        parent = self.nodes[pack.parent]
        lam = len(parent.csl)
        for sid in pack.sids:
            for j, seg in enumerate(parent.csl):
                flipped = sid ^ (1 << (lam - 1 - j))
                if flipped in pack.sids:
                    continue
                code = (int(parent.codes[seg]) << 1) | ((sid >> (lam - 1 - j)) & 1)
                got = self.candidates(parent, sid, j, code)
                if got is None:
                    continue
                seg, bp, half, hit = got
                for o in hit:
                    self.offer(pack, int(o), seg, bp, half)

    def into_internal(self, node: InternalNode) -> None:
        parent = self.nodes[node.parent]
        (sid,) = [s for s, c in parent.routing.items() if c == node.id]
        b = self.cfg.b
        for j, seg in enumerate(parent.csl):
            code = int(node.codes[seg])
            got = self.candidates(parent, sid, j, code)
            if got is None:
                continue
            seg, bp, half, hit = got
            fixed = 1 - (code & 1)
            for o in hit:
                cur = node
                while cur is not None and not cur.is_leaf:
                    s = promote_isax_fixed(cur.depths, self.sax[o], cur.csl, seg, fixed, b)
                    nxt = cur.routing.get(s)
                    cur = self.nodes[nxt] if nxt is not None else None
                if cur is not None:
                    self.offer(cur, int(o), seg, bp, half)


def first_layer_duplicates(nodes, sax, paa, cfg) -> _Fuzzer:
    """Copies into the packs directly below the root."""
    fz = _Fuzzer(nodes, sax, paa, cfg)
    for nd in nodes[1:]:
        if nd.parent == 0 and nd.is_leaf:
            fz.into_pack(nd)
    return fz


def deeper_duplicates(fz: _Fuzzer) -> DuplicatePlan:
    for nd in fz.nodes[1:]:
        if nd.is_leaf:
            if nd.parent != 0:
                fz.into_pack(nd)
        else:
            fz.into_internal(nd)
    return fz.plan


def layout(index: Index, extra: dict) -> None:
    """Give every pack a contiguous extent in its first-layer subtree file."""
    nodes = index.nodes
    tops = [0] if index.root.is_leaf else index.children(0)
    for fid, cid in enumerate(tops):
        index.store.file_end[fid] = 0
        for pid in sorted(index.subtree_packs(cid)):
            p = nodes[pid]
            p.file_id = fid
            p.capacity = p.size + extra.get(pid, 0)
            p.offset = index.store.allocate(fid, p.capacity)
            p.count = 0
            p.deleted = np.zeros(p.capacity, dtype=bool)


def make_records(index: Index, ords: np.ndarray, flags: np.ndarray, X: np.ndarray, sax: np.ndarray) -> np.ndarray:
    rec = np.empty(len(ords), dtype=index.store.dtype)
    rec["ordinal"] = ords
    rec["flags"] = flags
    rec["sax"] = sax
    rec["series"] = X
    return rec


def route_batch(index: Index, start: int, X: np.ndarray, sax_rows: np.ndarray, dup_ords, dup_packs,
                only_packs: np.ndarray | None = None, target: np.ndarray | None = None):
    """Group one batch into per-pack record blocks, ordered by ordinal within each pack.

    Returns ``[(pack_id, records), ...]`` in pack id order.
    """
    m = len(X)
    ords = np.arange(start, start + m)
    if target is None:
        target = index.route_rows(sax_rows)
    lo, hi = np.searchsorted(dup_ords, [start, start + m])
    d_ord = dup_ords[lo:hi]
    all_ord = np.concatenate([ords, d_ord])
    all_pack = np.concatenate([target, dup_packs[lo:hi]])
    all_flag = np.concatenate([np.zeros(m, np.uint8), np.full(len(d_ord), FLAG_DUPLICATE, np.uint8)])
    keep = all_pack >= 0
    if only_packs is not None:
        keep &= only_packs[np.maximum(all_pack, 0)]
    all_ord, all_pack, all_flag = all_ord[keep], all_pack[keep], all_flag[keep]
    order = np.lexsort((all_ord, all_pack))
    all_ord, all_pack, all_flag = all_ord[order], all_pack[order], all_flag[order]
    local = all_ord - start
    rec = make_records(index, all_ord, all_flag, X[local], sax_rows[local])
    uniq, starts = np.unique(all_pack, return_index=True)
    ends = np.append(starts[1:], len(all_pack))
    return [(int(p), rec[a:e]) for p, a, e in zip(uniq, starts, ends)]


def flush(index: Index, blocks) -> None:
    for pid, rec in blocks:
        p = index.nodes[pid]
        index.store.write(p.file_id, p.offset + p.count, rec)
        p.count += len(rec)


def finish(index: Index, table, plan: DuplicatePlan | None) -> None:
    for nd in index.nodes:
        nd.rows = None
    index.sax_table = table
    index.next_ordinal = table.count
    index.store.finalize_sizes()
    index.touch()
    if plan is not None:
        index.fuzzy_log = plan.bands


def build_index(ds: DatasetHandle, cfg: IndexConfig, directory, table=None) -> Index:
    """Serial reference build."""
    if ds.n != cfg.n:
        raise ValueError(f"dataset series length {ds.n} does not match config n={cfg.n}")
    t0 = time.perf_counter()
    batch = cfg.batch_rows or None
    paa = None
    if table is None or cfg.fuzzy > 0:
        got = build_sax_table(ds, cfg.w, cfg.c, batch, with_paa=cfg.fuzzy > 0)
        table, paa = got if cfg.fuzzy > 0 else (got, None)
    t1 = time.perf_counter()
    sax = table.rows
    index = Index(cfg, directory, build_structure(sax, cfg))
    plan = None
    if cfg.fuzzy > 0:
        plan = deeper_duplicates(first_layer_duplicates(index.nodes, sax, paa, cfg))
    t2 = time.perf_counter()
    layout(index, plan.extra if plan else {})
    d_ord, d_pack = plan.arrays() if plan else (np.empty(0, np.int64), np.empty(0, np.int64))
    for start, block in iter_batches(ds, batch):
        X = prepare(block)
        flush(index, route_batch(index, start, X, sax[start:start + len(X)], d_ord, d_pack))
    finish(index, table, plan)
    save(index)
    index.build_report = {"pass1_s": t1 - t0, "structure_s": t2 - t1, "pass2_s": time.perf_counter() - t2}
    return index
