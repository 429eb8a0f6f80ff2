"""The index container: node graph, leaf store and routing helpers."""
from __future__ import annotations

import threading
from collections import defaultdict
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .config import IndexConfig
from .series import promote_rows
from .storage import FLAG_DUPLICATE, LeafStore
from .tree import InternalNode, LeafPack

__all__ = ["Index", "RWLock"]


class RWLock:
    """Many readers or one writer."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writer = False

    @contextmanager
    def read(self):
        with self._cond:
            while self._writer:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                if not self._readers:
                    self._cond.notify_all()

    @contextmanager
    def write(self):
        with self._cond:
            while self._writer or self._readers:
                self._cond.wait()
            self._writer = True
        try:
            yield
        finally:
            with self._cond:
                self._writer = False
                self._cond.notify_all()


class Index:
    """A built index. Node ``i`` lives at ``nodes[i]``; removed nodes are ``None``."""

    def __init__(self, cfg: IndexConfig, directory, nodes: list | None = None):
        self.cfg = cfg
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.store = LeafStore(self.dir, cfg.n, cfg.w)
        self.nodes: list = nodes if nodes is not None else []
        self.next_ordinal = 0
        self.sax_table = None
        self.lock = RWLock()
        self.events: dict[str, int] = defaultdict(int)
        self.fuzzy_log: list | None = None
        self.build_report = None
        self._leafnbr: dict | None = None
        self._subtree: dict = {}
        self._locations: dict | None = None
        self._pending_sax: list = []

    # -- structure -------------------------------------------------------
    @property
    def root(self) -> InternalNode:
        return self.nodes[0]

    def node(self, nid: int):
        return self.nodes[nid]

    def packs(self):
        return [nd for nd in self.nodes if nd is not None and nd.is_leaf]

    def internals(self):
        return [nd for nd in self.nodes if nd is not None and not nd.is_leaf]

    def children(self, nid: int) -> list[int]:
        """Distinct children of an internal node, in id order."""
        if self.nodes[nid].is_leaf:
            return []
        return sorted(set(self.nodes[nid].routing.values()))

    def touch(self) -> None:
        """Drop cached derived structure after a mutation."""
        self._leafnbr = None
        self._subtree = {}

    def append_sax(self, row) -> None:
        self._pending_sax.append(np.asarray(row, dtype=np.uint8))

    def sync_sax(self) -> None:
        """Fold SAX words of inserted series into the table."""
        if self._pending_sax:
            self.sax_table.rows = np.vstack([self.sax_table.rows, np.stack(self._pending_sax)])
            self._pending_sax = []

    def leaf_count(self, nid: int) -> int:
        if self._leafnbr is None:
            counts: dict[int, int] = {}
            for nd in reversed(self.nodes):
                if nd is None:
                    continue
                counts[nd.id] = 1 if nd.is_leaf else sum(counts[c] for c in set(nd.routing.values()))
            self._leafnbr = counts
        return self._leafnbr[nid]

    def subtree_packs(self, nid: int) -> list[int]:
        got = self._subtree.get(nid)
        if got is None:
            out, stack = [], [nid]
            while stack:
                nd = self.nodes[stack.pop()]
                if nd.is_leaf:
                    out.append(nd.id)
                else:
                    stack.extend(sorted(set(nd.routing.values()), reverse=True))
            got = self._subtree[nid] = out
        return got

    def height(self) -> int:
        return max((nd.layer for nd in self.packs()), default=0)

    def first_layer_ancestor(self, nid: int) -> int:
        nd = self.nodes[nid]
        while nd.parent > 0:
            nd = self.nodes[nd.parent]
        return nd.id

    # -- routing ---------------------------------------------------------
    def route_rows(self, sax_rows: np.ndarray) -> np.ndarray:
        """Pack id reached by each SAX word (-1 when a routing entry is missing)."""
        b = self.cfg.b
        sax_rows = np.asarray(sax_rows)
        out = np.full(len(sax_rows), -1, dtype=np.int64)
        if not len(sax_rows):
            return out
        stack = [(0, np.arange(len(sax_rows)))]
        while stack:
            nid, idx = stack.pop()
            nd = self.nodes[nid]
            if nd.is_leaf:
                out[idx] = nid
                continue
            child = nd.lut()[promote_rows(nd.depths, sax_rows[idx], nd.csl, b)]
            order = np.argsort(child, kind="stable")
            uniq, starts = np.unique(child[order], return_index=True)
            ends = np.append(starts[1:], len(order))
            for cid, st, en in zip(uniq, starts, ends):
                if cid >= 0:
                    stack.append((int(cid), idx[order[st:en]]))
        return out

    def route_path(self, sax_row) -> list[int]:
        """Node ids visited from the root; stops early at a missing entry."""
        from .series import promote_isax

        path = [0]
        nd = self.root
        while not nd.is_leaf:
            cid = nd.routing.get(promote_isax(nd.depths, sax_row, nd.csl, self.cfg.b))
            if cid is None:
                break
            path.append(cid)
            nd = self.nodes[cid]
        return path

    # -- leaf access -----------------------------------------------------
    def read_pack(self, pack: LeafPack) -> np.ndarray:
        return self.store.read(pack.file_id, pack.offset, pack.count)

    def live_records(self, pack: LeafPack, primaries_only: bool = False) -> np.ndarray:
        recs = self.read_pack(pack)
        keep = pack.live_mask()
        if primaries_only:
            keep = keep & ((recs["flags"] & FLAG_DUPLICATE) == 0)
        return recs[keep]

    def locations(self) -> dict:
        """ordinal -> list of (pack id, slot), duplicates included."""
        if self._locations is None:
            loc: dict[int, list] = defaultdict(list)
            for p in self.packs():
                if p.count:
                    ords = self.read_pack(p)["ordinal"]
                    for slot in np.flatnonzero(p.live_mask()):
                        loc[int(ords[slot])].append((p.id, int(slot)))
            self._locations = loc
        return self._locations

    def close(self) -> None:
        self.store.close()
