"""Saving and loading index metadata. Leaf files are never rewritten here."""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .config import IndexConfig
from .exceptions import FormatError, StorageError
from .index import Index
from .sax_stage import SaxTable
from .tree import InternalNode, LeafPack

__all__ = ["save", "load", "TREE_MAGIC", "TREE_VERSION"]

TREE_MAGIC = b"DTRE"
TREE_VERSION = 1

_HEAD = struct.Struct("<4sHHHIIQ")
_COMMON = struct.Struct("<Hqq")
_PACK = struct.Struct("<HBiQQQ")
_EXTENT = struct.Struct("<iQQ")
_END = struct.Struct("<iQ")
_U8, _U32, _U64 = struct.Struct("<B"), struct.Struct("<I"), struct.Struct("<Q")

_REMOVED, _INTERNAL, _PACKED = 0, 1, 2
_NO_CSL = 255


def _write_node(out, nd) -> None:
    if nd is None:
        out.write(_U8.pack(_REMOVED))
        return
    out.write(_U8.pack(_PACKED if nd.is_leaf else _INTERNAL))
    out.write(_COMMON.pack(nd.layer, nd.parent, nd.size))
    out.write(np.asarray(nd.codes, np.uint8).tobytes())
    out.write(np.asarray(nd.depths, np.uint8).tobytes())
    if nd.is_leaf:
        out.write(_U32.pack(len(nd.sids)))
        out.write(np.asarray(nd.sids, "<u8").tobytes())
        out.write(_PACK.pack(nd.demotion_bits, int(nd.oversized), nd.file_id, nd.offset, nd.capacity, nd.count))
        out.write(np.packbits(nd.deleted[: nd.capacity]).tobytes())
        return
    csl = nd.csl
    out.write(_U8.pack(_NO_CSL if csl is None else len(csl)))
    if csl is not None:
        out.write(bytes(csl))
    out.write(_U32.pack(nd.extractions))
    items = sorted(nd.routing.items())
    out.write(_U32.pack(len(items)))
    out.write(np.array(items, dtype="<i8").reshape(-1, 2).tobytes())


def save(index: Index, directory=None) -> Path:
    """Write ``config.json``, ``tree.bin`` and ``sax.bin`` next to the leaf files."""
    d = Path(directory) if directory is not None else index.dir
    if d.resolve() != index.dir.resolve():
        raise ValueError("an index is saved into the directory holding its leaf files")
    cfg = index.cfg
    out = io.BytesIO()
    out.write(_HEAD.pack(TREE_MAGIC, TREE_VERSION, cfg.w, cfg.b, cfg.n, len(index.nodes), index.next_ordinal))
    for nd in index.nodes:
        _write_node(out, nd)
    store = index.store
    out.write(_U32.pack(len(store.free)))
    for ext in store.free:
        out.write(_EXTENT.pack(*ext))
    out.write(_U32.pack(len(store.file_end)))
    for fid, end in sorted(store.file_end.items()):
        out.write(_END.pack(fid, end))
    events = sorted(index.events.items())
    out.write(_U32.pack(len(events)))
    for name, value in events:
        raw = name.encode()
        out.write(_U8.pack(len(raw)) + raw + _U64.pack(value))
    try:
        (d / "tree.bin").write_bytes(out.getvalue())
        (d / "config.json").write_text(cfg.to_json())
        with index.lock.read():
            index.sync_sax()
        if index.sax_table is not None:
            index.sax_table.save(d / "sax.bin")
    except OSError as exc:
        raise StorageError(str(exc)) from exc
    return d


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated at byte {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))

    def one(self, st: struct.Struct):
        return self.unpack(st)[0]


def _read_node(r: _Reader, nid: int, w: int):
    kind = r.one(_U8)
    if kind == _REMOVED:
        return None
    if kind not in (_INTERNAL, _PACKED):
        raise FormatError(f"{r.path}: unknown node kind {kind} for node {nid}")
    layer, parent, size = r.unpack(_COMMON)
    codes = np.frombuffer(r.take(w), np.uint8).copy()
    depths = np.frombuffer(r.take(w), np.uint8).copy()
    if kind == _PACKED:
        k = r.one(_U32)
        sids = tuple(int(s) for s in np.frombuffer(r.take(8 * k), "<u8"))
        demoted, oversized, fid, offset, cap, count = r.unpack(_PACK)
        bits = np.unpackbits(np.frombuffer(r.take((cap + 7) // 8), np.uint8))[:cap].astype(bool)
        return LeafPack(nid, codes, depths, size, layer, parent, sids=sids, demotion_bits=demoted,
                        oversized=bool(oversized), file_id=fid, offset=offset, capacity=cap,
                        count=count, deleted=bits)
    lam = r.one(_U8)
    csl = None if lam == _NO_CSL else tuple(r.take(lam))
    extractions = r.one(_U32)
    k = r.one(_U32)
    pairs = np.frombuffer(r.take(16 * k), "<i8").reshape(-1, 2)
    routing = {int(s): int(c) for s, c in pairs}
    return InternalNode(nid, codes, depths, size, layer, parent, csl=csl, routing=routing, extractions=extractions)


def load(directory, n: int | None = None) -> Index:
    """Open a saved index. Raises FormatError on any header mismatch."""
    d = Path(directory)
    try:
        cfg = IndexConfig.from_json((d / "config.json").read_text())
        raw = (d / "tree.bin").read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"{d}: not an index directory ({exc.filename} missing)") from exc
    r = _Reader(raw, d / "tree.bin")
    magic, version, w, b, tn, count, next_ordinal = r.unpack(_HEAD)
    if magic != TREE_MAGIC:
        raise FormatError(f"{r.path}: bad magic {magic!r}")
    if version != TREE_VERSION:
        raise FormatError(f"{r.path}: unsupported version {version}")
    if (w, b, tn) != (cfg.w, cfg.b, cfg.n):
        raise FormatError(f"{d}: config (w={cfg.w}, b={cfg.b}, n={cfg.n}) disagrees with tree (w={w}, b={b}, n={tn})")
    if n is not None and n != cfg.n:
        raise FormatError(f"{d}: index holds series of length {cfg.n}, not {n}")
    nodes = [_read_node(r, i, w) for i in range(count)]
    index = Index(cfg, d, nodes)
    index.next_ordinal = next_ordinal
    store = index.store
    store.free = [r.unpack(_EXTENT) for _ in range(r.one(_U32))]
    store.file_end = dict(r.unpack(_END) for _ in range(r.one(_U32)))
    for _ in range(r.one(_U32)):
        name = r.take(r.one(_U8)).decode()
        index.events[name] = r.one(_U64)
    if r.pos != len(raw):
        raise FormatError(f"{r.path}: {len(raw) - r.pos} trailing bytes")
    sax_path = d / "sax.bin"
    if sax_path.exists():
        index.sax_table = SaxTable.load(sax_path)
        if index.sax_table.w != w or index.sax_table.count != next_ordinal:
            raise FormatError(f"{sax_path}: does not match the tree")
    return index
