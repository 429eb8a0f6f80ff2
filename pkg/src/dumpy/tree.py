"""Index nodes, leaf packing and structure growth from SAX rows."""
from __future__ import annotations

from dataclasses import dataclass, field
from math import floor

import numpy as np

from .config import IndexConfig
from .exceptions import CannotSplitError
from .series import promote_rows
from .split import binary_split_plan, choose_split_plan

__all__ = ["InternalNode", "LeafPack", "pack_isax", "pack_leaves", "split_node", "grow_subtree"]


@dataclass(eq=False)
class InternalNode:
    id: int
    codes: np.ndarray
    depths: np.ndarray
    size: int
    layer: int
    parent: int
    csl: tuple | None = None
    routing: dict = field(default_factory=dict)
    extractions: int = 0
    rows: np.ndarray | None = field(default=None, repr=False)
    _lut: np.ndarray | None = field(default=None, repr=False)

    is_leaf = False

    def lut(self) -> np.ndarray:
        """Dense sid -> child id table (-1 for unpopulated sids)."""
        if self._lut is None:
            lut = np.full(1 << len(self.csl), -1, dtype=np.int64)
            for sid, child in self.routing.items():
                lut[sid] = child
            self._lut = lut
        return self._lut

    def invalidate(self) -> None:
        self._lut = None


@dataclass(eq=False)
class LeafPack:
    id: int
    codes: np.ndarray
    depths: np.ndarray
    size: int
    layer: int
    parent: int
    sids: tuple = ()
    demotion_bits: int = 0
    oversized: bool = False
    file_id: int = -1
    offset: int = 0
    capacity: int = 0
    count: int = 0
    deleted: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    rows: np.ndarray | None = field(default=None, repr=False)

    is_leaf = True

    def live_mask(self) -> np.ndarray:
        return ~self.deleted[: self.count]


def _popcount(x):
    return np.bitwise_count(np.asarray(x, dtype=np.uint64)).astype(np.int64)


def pack_leaves(sizes: dict, lam: int, rho: float, th: int) -> list[list[int]]:
    """Greedily merge small sibling leaves into packs.

    ``sizes`` maps sid -> number of series. Leaves larger than ``th`` are
    ignored. Leaves are taken by decreasing size (then sid); each joins the
    existing pack whose number of demotion bits grows the least, provided
    the pack stays within ``floor(rho * lam)`` demotion bits and ``th``
    series; otherwise it opens a new pack.
    """
    budget = floor(rho * lam + 1e-9)
    items = sorted(((s, sid) for sid, s in sizes.items() if s <= th), key=lambda t: (-t[0], t[1]))
    cap = max(1, len(items))
    and_m = np.zeros(cap, dtype=np.uint64)
    or_m = np.zeros(cap, dtype=np.uint64)
    total = np.zeros(cap, dtype=np.int64)
    demote = np.zeros(cap, dtype=np.int64)
    packs: list[list[int]] = []
    for s, sid in items:
        k = len(packs)
        if k:
            u = np.uint64(sid)
            bits = _popcount((or_m[:k] | u) ^ (and_m[:k] & u))
            ok = (total[:k] + s <= th) & (bits <= budget)
            if ok.any():
                cost = np.where(ok, bits - demote[:k], np.iinfo(np.int64).max)
                j = int(np.argmin(cost))
                and_m[j] &= u
                or_m[j] |= u
                total[j] += s
                demote[j] = bits[j]
                packs[j].append(sid)
                continue
        and_m[k] = or_m[k] = sid
        total[k] = s
        packs.append([sid])
    return [sorted(p) for p in packs]


def pack_isax(codes, depths, csl, sids, b: int):
    """iSAX word of a pack holding ``sids`` below a node; returns (codes, depths, demotion bits)."""
    codes = np.array(codes, dtype=np.uint8)
    depths = np.array(depths, dtype=np.uint8)
    lam = len(csl)
    demoted = 0
    for j, seg in enumerate(csl):
        bits = {(sid >> (lam - 1 - j)) & 1 for sid in sids}
        if len(bits) == 1:
            codes[seg] = (int(codes[seg]) << 1) | bits.pop()
            depths[seg] += 1
        else:
            demoted += 1
    return codes, depths, demoted


def _can_split(rows: np.ndarray, depths, b: int) -> bool:
    if not (np.asarray(depths) < b).any():
        return False
    return not (rows == rows[0]).all()


def choose_csl(node: InternalNode, sax: np.ndarray, idx: np.ndarray, cfg: IndexConfig) -> tuple:
    if node.layer == 0:
        return tuple(range(cfg.w))
    rows = sax[idx]
    if cfg.binary:
        return binary_split_plan(rows, node.depths, cfg.th, cfg.c, cfg.alpha).csl
    return choose_split_plan(rows, node.depths, cfg.th, cfg.fill_low, cfg.fill_high,
                             cfg.alpha, cfg.c, cfg.exhaustive_split).csl


def split_node(node: InternalNode, idx: np.ndarray, sax: np.ndarray, cfg: IndexConfig, nodes: list) -> list:
    """Create the children of ``node`` for the rows ``idx``.

    Children are appended to ``nodes`` (their id is their position) in
    ascending order of their smallest sid. Returns the new internal
    children paired with their row indices.
    """
    b = cfg.b
    if node.csl is None:
        node.csl = choose_csl(node, sax, idx, cfg)
    csl = node.csl
    lam = len(csl)
    sids = promote_rows(node.depths, sax[idx], csl, b)
    order = np.argsort(sids, kind="stable")
    uniq, starts, counts = np.unique(sids[order], return_index=True, return_counts=True)
    groups = {int(s): idx[order[st:st + ct]] for s, st, ct in zip(uniq, starts, counts)}
    small = {s: len(g) for s, g in groups.items() if len(g) <= cfg.th}
    if cfg.binary:
        packs = [[s] for s in sorted(small)]
    else:
        packs = pack_leaves(small, lam, cfg.rho, cfg.th)
    specs = [(p[0], "pack", p) for p in packs]
    specs += [(s, "internal", [s]) for s, g in groups.items() if len(g) > cfg.th]
    specs.sort(key=lambda t: t[0])
    out = []
    node.routing = {}
    node.invalidate()
    for _, kind, members in specs:
        rows = np.sort(np.concatenate([groups[s] for s in members]))
        codes, depths, demoted = pack_isax(node.codes, node.depths, csl, members, b)
        cid = len(nodes)
        if kind == "internal" and _can_split(sax[rows], depths, b):
            child = InternalNode(cid, codes, depths, len(rows), node.layer + 1, node.id, rows=rows)
            out.append((child, rows))
        else:
            child = LeafPack(cid, codes, depths, len(rows), node.layer + 1, node.id,
                             sids=tuple(members), demotion_bits=demoted,
                             oversized=len(rows) > cfg.th, rows=rows)
        nodes.append(child)
        for s in members:
            node.routing[s] = cid
    return out


def grow_subtree(node: InternalNode, idx: np.ndarray, sax: np.ndarray, cfg: IndexConfig) -> list:
    """Grow the whole subtree under ``node`` into a fresh local node list.

    ``node`` takes local id 0; descendants are numbered depth first, each
    node's children before its grandchildren. Parent and routing
    references in the returned list are local ids.
    """
    node.id = 0
    nodes = [node]

    def grow(nd, rows):
        try:
            children = split_node(nd, rows, sax, cfg, nodes)
        except CannotSplitError:  # pragma: no cover - guarded by _can_split
            raise
        for child, crow in children:
            grow(child, crow)

    grow(node, idx)
    return nodes
