"""Insertion and deletion on a built index.

Inserted series are routed like build-time series. A pack that would
exceed the leaf capacity is rebuilt: a single-sid pack becomes an
internal node grown by the normal split and pack workflow, while a
multi-sid pack gives up the overflowing sid to a new node of its own.
Fuzzy duplicates are not created for inserted series, and duplicates held
by a pack that gets rebuilt are dropped.
"""
from __future__ import annotations

import numpy as np

from .build import assemble_at, make_records
from .index import Index
from .series import paa, prepare, promote_isax, promote_rows, sax_from_paa
from .storage import FLAG_DUPLICATE
from .tree import InternalNode, LeafPack, _can_split, grow_subtree, pack_isax, pack_leaves

__all__ = ["insert", "insert_many", "delete", "delete_series", "REPACK_EVERY"]

# extractions under one parent before its leaf packs are packed again
REPACK_EVERY = 16


def _capacity(m: int, th: int) -> int:
    return max(m, min(th, max(8, 2 * m)))


def _summarize(index: Index, x):
    X = prepare(np.asarray(x, dtype=np.float64).reshape(1, -1))
    if X.shape[1] != index.cfg.n:
        raise ValueError(f"series length {X.shape[1]} does not match index n={index.cfg.n}")
    return X, sax_from_paa(paa(X, index.cfg.w), index.cfg.c)


# -- location bookkeeping ----------------------------------------------------
def _forget(index: Index, pid: int, ords) -> None:
    locs = index._locations
    if locs is None:
        return
    for o in np.unique(np.asarray(ords, dtype=np.int64)):
        kept = [e for e in locs.get(int(o), []) if e[0] != pid]
        if kept:
            locs[int(o)] = kept
        else:
            locs.pop(int(o), None)


def _remember(index: Index, pid: int, slots, ords) -> None:
    locs = index._locations
    if locs is None:
        return
    for s, o in zip(slots, ords):
        locs.setdefault(int(o), []).append((pid, int(s)))


# -- extents -----------------------------------------------------------------
def _file_for(index: Index, parent_id: int) -> int:
    if parent_id <= 0:
        return index.store.new_file()
    top = index.first_layer_ancestor(parent_id)
    for pid in index.subtree_packs(top):
        fid = index.nodes[pid].file_id
        if fid >= 0:
            return fid
    return index.store.new_file()


def _release(index: Index, pack: LeafPack) -> None:
    if pack.count and index._locations is not None:
        _forget(index, pack.id, index.read_pack(pack)["ordinal"])
    index.store.release(pack.file_id, pack.offset, pack.capacity)
    pack.capacity = pack.count = 0
    pack.deleted = np.zeros(0, dtype=bool)


def _store(index: Index, pack: LeafPack, recs: np.ndarray, file_id: int | None = None) -> None:
    """Write ``recs`` as the whole content of ``pack`` into a fresh extent."""
    if file_id is not None:
        pack.file_id = file_id
    cap = _capacity(len(recs), index.cfg.th)
    pack.offset = index.store.allocate(pack.file_id, cap)
    pack.capacity = cap
    index.store.write(pack.file_id, pack.offset, recs)
    pack.count = len(recs)
    pack.deleted = np.zeros(cap, dtype=bool)
    pack.size = int(((recs["flags"] & FLAG_DUPLICATE) == 0).sum())
    _remember(index, pack.id, range(len(recs)), recs["ordinal"])


def _primaries(index: Index, pack: LeafPack) -> np.ndarray:
    if not pack.count:
        return np.empty(0, dtype=index.store.dtype)
    return index.live_records(pack, primaries_only=True).copy()


def _append(index: Index, pack: LeafPack, rec: np.ndarray) -> None:
    free = np.flatnonzero(pack.deleted[: pack.count])
    if len(free):
        slot = int(free[0])
    elif pack.count < pack.capacity:
        slot = pack.count
        pack.count += 1
    else:
        live = index.live_records(pack).copy()
        _release(index, pack)
        _store(index, pack, live)
        slot = pack.count
        pack.count += 1
    index.store.write(pack.file_id, pack.offset + slot, rec)
    pack.deleted[slot] = False
    pack.size += 1
    _remember(index, pack.id, [slot], rec["ordinal"])


# -- structure changes -------------------------------------------------------
def _new_pack(index: Index, parent: InternalNode, sids: list, recs: np.ndarray) -> LeafPack:
    codes, depths, demoted = pack_isax(parent.codes, parent.depths, parent.csl, sids, index.cfg.b)
    pack = LeafPack(len(index.nodes), codes, depths, 0, parent.layer + 1, parent.id,
                    sids=tuple(sorted(sids)), demotion_bits=demoted)
    index.nodes.append(pack)
    for s in sids:
        parent.routing[s] = pack.id
    parent.invalidate()
    index.touch()
    pack.file_id = _file_for(index, parent.id)
    if len(recs) > index.cfg.th:
        _resplit(index, pack, recs)
    else:
        _store(index, pack, recs)
    return pack


def _resplit(index: Index, pack: LeafPack, recs: np.ndarray) -> None:
    """Turn ``pack`` into the root of a freshly grown subtree over ``recs``."""
    cfg, b = index.cfg, index.cfg.b
    if pack.capacity:
        _release(index, pack)
    sax = recs["sax"]
    if not _can_split(sax, pack.depths, b):
        pack.oversized = len(recs) > cfg.th
        _store(index, pack, recs)
        return
    idx = np.arange(len(recs))
    node = InternalNode(pack.id, pack.codes.copy(), pack.depths.copy(), len(recs), pack.layer, pack.parent, rows=idx)
    local = grow_subtree(node, idx, sax, cfg)
    assemble_at(index.nodes, pack.id, local)
    index.nodes[pack.id] = node
    index.touch()
    tops = index.children(node.id) if node.layer == 0 else [node.id]
    for top in tops:
        fid = index.store.new_file() if node.layer == 0 else pack.file_id
        for pid in index.subtree_packs(top):
            p = index.nodes[pid]
            _store(index, p, recs[p.rows], fid)
    for nd in local:
        nd.rows = None
    index.events["split"] += 1


def _extract(index: Index, pack: LeafPack, recs: np.ndarray, rec: np.ndarray) -> None:
    """Move the sid of ``rec`` out of a multi-sid ``pack``."""
    b = index.cfg.b
    parent = index.nodes[pack.parent]
    sid = promote_isax(parent.depths, rec["sax"][0], parent.csl, b)
    take = promote_rows(parent.depths, recs["sax"], parent.csl, b) == sid
    _release(index, pack)
    rest = [s for s in pack.sids if s != sid]
    pack.sids = tuple(rest)
    pack.codes, pack.depths, pack.demotion_bits = pack_isax(parent.codes, parent.depths, parent.csl, rest, b)
    _store(index, pack, recs[~take])
    _new_pack(index, parent, [sid], recs[take])
    parent.extractions += 1
    index.events["extract"] += 1
    if parent.extractions % REPACK_EVERY == 0:
        _repack(index, parent)


def _repack(index: Index, parent: InternalNode) -> None:
    """Pack the leaf children of ``parent`` again from their current sizes."""
    cfg, b = index.cfg, index.cfg.b
    old = [index.nodes[c] for c in index.children(parent.id)]
    old = [p for p in old if p.is_leaf and not p.oversized]
    if len(old) < 2:
        return
    recs = [_primaries(index, p) for p in old]
    for p in old:
        _release(index, p)
        for s in p.sids:
            parent.routing.pop(s, None)
        index.nodes[p.id] = None
    recs = np.concatenate(recs)
    sids = promote_rows(parent.depths, recs["sax"], parent.csl, b)
    uniq, counts = np.unique(sids, return_counts=True)
    for members in pack_leaves(dict(zip(uniq.tolist(), counts.tolist())), len(parent.csl), cfg.rho, cfg.th):
        _new_pack(index, parent, members, recs[np.isin(sids, members)])
    index.events["repack"] += 1
    index.touch()


def _place(index: Index, rec: np.ndarray) -> None:
    b, th = index.cfg.b, index.cfg.th
    sax = rec["sax"][0]
    nd = index.root
    while not nd.is_leaf:
        sid = promote_isax(nd.depths, sax, nd.csl, b)
        cid = nd.routing.get(sid)
        if cid is None:
            _new_pack(index, nd, [sid], rec)
            return
        nd = index.nodes[cid]
    live = nd.count - int(nd.deleted[: nd.count].sum())
    if live < th or (nd.oversized and not _can_split(np.vstack([index.live_records(nd)["sax"], rec["sax"]]), nd.depths, b)):
        _append(index, nd, rec)
        return
    recs = np.concatenate([_primaries(index, nd), rec])
    if nd.parent < 0 or len(nd.sids) <= 1:
        _resplit(index, nd, recs)
    else:
        _extract(index, nd, recs, rec)


def insert(index: Index, x) -> int:
    """Insert one series; returns its ordinal."""
    X, sax = _summarize(index, x)
    with index.lock.write():
        o = index.next_ordinal
        index.next_ordinal += 1
        index.append_sax(sax[0])
        _place(index, make_records(index, np.array([o]), np.zeros(1, np.uint8), X, sax))
    return o


def insert_many(index: Index, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return np.array([insert(index, x) for x in X], dtype=np.int64)


def _drop_pack(index: Index, pack: LeafPack) -> None:
    """Free an empty pack and prune internal nodes left without children."""
    _release(index, pack)
    if pack.parent < 0:
        return
    nd = pack
    while nd.parent >= 0:
        parent = index.nodes[nd.parent]
        for s in [s for s, c in parent.routing.items() if c == nd.id]:
            del parent.routing[s]
        parent.invalidate()
        index.nodes[nd.id] = None
        if parent.routing or parent.parent < 0:
            break
        nd = parent
    index.touch()


def delete(index: Index, ordinal: int) -> bool:
    """Mark every copy of ``ordinal`` deleted; returns False when absent."""
    with index.lock.write():
        entries = index.locations().pop(int(ordinal), None)
        if not entries:
            return False
        for pid, slot in entries:
            p = index.nodes[pid]
            p.deleted[slot] = True
            flags = index.store.read(p.file_id, p.offset + slot, 1)["flags"][0]
            if not flags & FLAG_DUPLICATE:
                p.size -= 1
            if not p.live_mask().any():
                _drop_pack(index, p)
        index.events["delete"] += 1
        return True


def delete_series(index: Index, x, tol: float = 1e-6) -> bool:
    """Delete one stored series equal to ``x`` after z-normalization."""
    from .query import exact_search

    res = exact_search(index, x, 1)
    if len(res) and res.distances[0] <= tol:
        return delete(index, int(res.ordinals[0]))
    return False
