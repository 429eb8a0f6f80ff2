"""Brute-force ground truth, accuracy measures and index statistics."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import FormatError
from .index import Index
from .metrics import DistanceKind, envelope, scan_dtw
from .sax_stage import DatasetHandle, iter_batches
from .series import prepare

__all__ = ["GroundTruth", "brute_force_knn", "error_ratio", "index_stats", "map_score"]

GT_MAGIC = b"DGT1"
_GT_HEAD = struct.Struct("<4sIIB d16s16s")
_TIE_TOL = 1e-6


@dataclass
class GroundTruth:
    ordinals: np.ndarray  # (queries, k) u64
    distances: np.ndarray  # (queries, k) f64

    def save(self, path, key: tuple) -> None:
        q, k = self.ordinals.shape
        kind, window, dh, qh = key
        rec = np.empty((q, k), dtype=[("ordinal", "<u8"), ("distance", "<f8")])
        rec["ordinal"], rec["distance"] = self.ordinals, self.distances
        Path(path).write_bytes(_GT_HEAD.pack(GT_MAGIC, q, k, kind, window, dh, qh) + rec.tobytes())

    @classmethod
    def load(cls, path, key: tuple | None = None) -> "GroundTruth":
        raw = Path(path).read_bytes()
        if len(raw) < _GT_HEAD.size:
            raise FormatError(f"{path}: truncated ground-truth header")
        magic, q, k, kind, window, dh, qh = _GT_HEAD.unpack_from(raw)
        if magic != GT_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if key is not None and (kind, window, dh, qh) != key:
            raise FormatError(f"{path}: ground truth was computed for different inputs")
        body = raw[_GT_HEAD.size:]
        dt = np.dtype([("ordinal", "<u8"), ("distance", "<f8")])
        if len(body) != q * k * dt.itemsize:
            raise FormatError(f"{path}: expected {q * k} entries")
        rec = np.frombuffer(body, dtype=dt).reshape(q, k)
        return cls(rec["ordinal"].astype(np.int64), rec["distance"].copy())


def _digest(arr_bytes) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    h.update(arr_bytes)
    return h.digest()


def _dataset_digest(ds: DatasetHandle) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    h.update(struct.pack("<IQ", ds.n, ds.count))
    with open(ds.path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 24), b""):
            h.update(chunk)
    return h.digest()


def _topk(d2: np.ndarray, k: int):
    order = np.lexsort((np.arange(len(d2)), d2))[:k]
    return order, d2[order]


def _scan_all(ds: DatasetHandle, Q: np.ndarray, k: int, dist: DistanceKind, batch_rows: int | None):
    nq = len(Q)
    k_eff = min(k, ds.count)
    ords = np.zeros((nq, k_eff), dtype=np.int64)
    dists = np.zeros((nq, k_eff))
    if dist.is_dtw:
        radius = dist.radius(ds.n)
        envs = [envelope(q, radius) for q in Q]
        tops = [np.full(k_eff, np.inf) for _ in Q]
    cand_o = [[] for _ in Q]
    cand_d = [[] for _ in Q]
    for start, block in iter_batches(ds, batch_rows):
        X = prepare(block)
        X64 = X.astype(np.float64)
        ids = np.arange(start, start + len(X))
        for i, q in enumerate(Q):
            e2 = ((X64 - q) ** 2).sum(axis=1)
            if dist.is_dtw:
                # DTW of the ED neighbours first: a tight running k-th from the start
                seed, _ = _topk(e2, k_eff)
                mask = np.zeros(len(X), dtype=bool)
                mask[seed] = True
                d2 = scan_dtw(X, q, radius, envs[i], mask, tops[i])
                mask = ~mask
                d2 = np.where(mask, scan_dtw(X, q, radius, envs[i], mask, tops[i]), d2)
            else:
                d2 = e2
            sel, vals = _topk(d2, k_eff)
            keep = np.isfinite(vals)
            cand_o[i].append(ids[sel[keep]])
            cand_d[i].append(vals[keep])
    for i in range(nq):
        o, d = np.concatenate(cand_o[i]), np.concatenate(cand_d[i])
        order = np.lexsort((o, d))[:k_eff]
        ords[i], dists[i] = o[order], np.sqrt(d[order])
    return GroundTruth(ords, dists)


def brute_force_knn(ds: DatasetHandle, queries, k: int, dist="ed", cache_dir=None,
                    batch_rows: int | None = None) -> GroundTruth:
    """Exact kNN of every query by a full scan, ties broken by ordinal.

    With ``cache_dir`` set, results are stored in and reused from a file
    keyed by the dataset contents, the queries, ``k`` and the distance.
    """
    dist = DistanceKind.parse(dist)
    Q = prepare(np.atleast_2d(np.asarray(queries, dtype=np.float64))).astype(np.float64)
    if Q.shape[1] != ds.n:
        raise ValueError(f"query length {Q.shape[1]} does not match dataset n={ds.n}")
    path = key = None
    if cache_dir is not None:
        key = (int(dist.is_dtw), float(dist.window_ratio if dist.is_dtw else 0.0),
               _dataset_digest(ds), _digest(Q.tobytes()))
        name = hashlib.blake2b(repr((key, k)).encode(), digest_size=12).hexdigest()
        path = Path(cache_dir) / f"gt_{name}.bin"
        if path.exists():
            return GroundTruth.load(path, key)
    gt = _scan_all(ds, Q, k, dist, batch_rows)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        gt.save(path, key)
    return gt


def _relevance(res_o, res_d, true_o, true_d, tol: float) -> np.ndarray:
    truth = set(int(o) for o in true_o)
    rel = np.array([int(o) in truth for o in res_o], dtype=bool)
    if res_d is not None and true_d is not None and len(true_d):
        rel |= np.asarray(res_d) <= true_d[-1] + tol
    return rel


def average_precision(res_o, true_o, k: int, res_d=None, true_d=None, tol: float = _TIE_TOL) -> float:
    res_o = list(res_o)[:k]
    if res_d is not None:
        res_d = np.asarray(res_d)[:k]
    if true_d is not None:
        true_d = np.asarray(true_d)[:k]
    rel = _relevance(res_o, res_d, list(true_o)[:k], true_d, tol)
    hits = np.cumsum(rel)
    prec = hits / np.arange(1, len(rel) + 1)
    return float((prec * rel).sum() / k)


def map_score(results, truths, k: int, result_dists=None, truth_dists=None, tol: float = _TIE_TOL) -> float:
    """Mean over queries of (1/k) * sum_i precision@i * rel(i).

    rel(i) is membership of the i-th result in the true kNN set; when
    distances are given, a result tied with the true k-th distance within
    ``tol`` also counts.
    """
    if len(results) != len(truths):
        raise ValueError("results and truths cover different numbers of queries")
    if not len(results):
        return 0.0
    aps = [
        average_precision(r, t, k,
                          None if result_dists is None else result_dists[i],
                          None if truth_dists is None else truth_dists[i], tol)
        for i, (r, t) in enumerate(zip(results, truths))
    ]
    return float(np.mean(aps))


def error_ratio(result_dists, truth_dists, k: int) -> tuple[float, list, int]:
    """Mean of rank-wise distance ratios (approximate / exact).

    Ranks whose exact distance is 0 are skipped; returns the aggregate
    mean, the per-query means and the number of skipped terms.
    """
    per_query, skipped = [], 0
    for res, tru in zip(result_dists, truth_dists):
        res, tru = np.asarray(res, dtype=np.float64)[:k], np.asarray(tru, dtype=np.float64)[:k]
        m = min(len(res), len(tru))
        res, tru = res[:m], tru[:m]
        nz = tru > 0
        skipped += int((~nz).sum())
        if nz.any():
            per_query.append(float(np.mean(res[nz] / tru[nz])))
    return (float(np.mean(per_query)) if per_query else 1.0), per_query, skipped


def index_stats(index: Index) -> dict:
    """Leaf and node counts, height, average fill factor and structure size."""
    from .persist import _write_node

    import io

    packs = index.packs()
    internals = index.internals()
    th = index.cfg.th
    buf = io.BytesIO()
    for nd in index.nodes:
        _write_node(buf, nd)
    leaves = len(packs)
    sizes = [p.size for p in packs]
    return {
        "leaves": leaves,
        "internal_nodes": len(internals),
        "nodes": leaves + len(internals),
        "height": index.height(),
        "fill_factor": float(sum(sizes) / (leaves * th)) if leaves else 0.0,
        "oversized_leaves": sum(p.oversized for p in packs),
        "series": int(sum(sizes)),
        "stored_records": int(sum(int(p.live_mask().sum()) for p in packs)),
        "structure_bytes": buf.tell(),
        "leaf_bytes": int(sum(p.capacity for p in packs) * index.store.recsize),
    }
