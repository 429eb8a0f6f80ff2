"""Flat binary datasets, random-walk generation and the SAX table (build pass 1)."""
from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import FormatError, InvalidArgumentError, StorageError
from .series import bits_for, paa, prepare, sax_from_paa

__all__ = [
    "DatasetHandle",
    "SaxTable",
    "build_sax_table",
    "gen_noisy_queries",
    "gen_random_walk",
    "iter_batches",
    "open_dataset",
    "write_dataset",
]

SAX_MAGIC = b"DSAX"
_SAX_HEADER = struct.Struct("<4sHHQ")
DEFAULT_BATCH_BYTES = 100 * 1024 * 1024


@dataclass(frozen=True)
class DatasetHandle:
    """A headerless little-endian float32 file of ``count`` series of length ``n``."""

    path: Path
    n: int
    count: int

    @property
    def nbytes(self) -> int:
        return self.count * self.n * 4

    def memmap(self) -> np.ndarray:
        if self.count == 0:
            return np.empty((0, self.n), dtype="<f4")
        return np.memmap(self.path, dtype="<f4", mode="r", shape=(self.count, self.n))

    def read(self, start: int = 0, stop: int | None = None) -> np.ndarray:
        stop = self.count if stop is None else min(stop, self.count)
        rows = max(0, stop - start)
        with open(self.path, "rb") as fh:
            fh.seek(start * self.n * 4)
            buf = fh.read(rows * self.n * 4)
        if len(buf) != rows * self.n * 4:
            raise FormatError(f"{self.path}: short read at series {start}")
        return np.frombuffer(buf, dtype="<f4").reshape(rows, self.n)


def _sidecar(path) -> Path:
    return Path(str(path) + ".json")


def open_dataset(path, n: int | None = None) -> DatasetHandle:
    """Open a flat dataset; ``n`` comes from the argument or the sidecar file."""
    path = Path(path)
    if n is None:
        side = _sidecar(path)
        if not side.exists():
            raise InvalidArgumentError(f"series length unknown for {path}: pass n or add {side.name}")
        n = int(json.loads(side.read_text())["n"])
    try:
        size = path.stat().st_size
    except OSError as exc:
        raise StorageError(str(exc)) from exc
    if n < 1 or size % (4 * n):
        raise FormatError(f"{path}: size {size} is not a multiple of {4 * n} bytes")
    return DatasetHandle(path, int(n), size // (4 * n))


def write_dataset(X, path) -> DatasetHandle:
    X = np.ascontiguousarray(X, dtype="<f4")
    if X.ndim != 2:
        raise InvalidArgumentError("dataset must be a 2-D array")
    path = Path(path)
    try:
        X.tofile(path)
        _sidecar(path).write_text(json.dumps({"n": X.shape[1], "count": X.shape[0], "dtype": "<f4"}))
    except OSError as exc:
        raise StorageError(str(exc)) from exc
    return DatasetHandle(path, X.shape[1], X.shape[0])


def gen_random_walk(count: int, n: int, seed: int, out_path, chunk: int = 8192) -> DatasetHandle:
    """Cumulative sums of N(0, 1) steps, z-normalized, written as float32."""
    if count < 1 or n < 1:
        raise InvalidArgumentError("count and n must be >= 1")
    rng = np.random.default_rng(seed)
    out_path = Path(out_path)
    try:
        with open(out_path, "wb") as fh:
            for start in range(0, count, chunk):
                rows = min(chunk, count - start)
                walk = np.cumsum(rng.standard_normal((rows, n)), axis=1)
                fh.write(prepare(walk).astype("<f4").tobytes())
        _sidecar(out_path).write_text(json.dumps({"n": n, "count": count, "dtype": "<f4"}))
    except OSError as exc:
        raise StorageError(str(exc)) from exc
    return DatasetHandle(out_path, n, count)


def gen_noisy_queries(ds: DatasetHandle, count: int, snr_db, seed: int, out_path) -> DatasetHandle:
    """Indexed series plus white noise, one SNR (in dB) drawn per query."""
    rng = np.random.default_rng(seed)
    picks = np.sort(rng.choice(ds.count, size=count, replace=ds.count < count))
    data = ds.memmap()
    snr = rng.choice(np.atleast_1d(np.asarray(snr_db, dtype=float)), size=count)
    base = prepare(np.asarray(data[picks], dtype=np.float64))
    sigma = np.sqrt(10.0 ** (-snr / 10.0))
    noisy = base + rng.standard_normal(base.shape) * sigma[:, None]
    return write_dataset(prepare(noisy), out_path)


def iter_batches(ds: DatasetHandle, batch_rows: int | None = None):
    """Yield ``(start, rows)`` float32 blocks of the dataset in order."""
    if batch_rows is None:
        batch_rows = max(1, DEFAULT_BATCH_BYTES // (4 * ds.n))
    for start in range(0, ds.count, batch_rows):
        yield start, ds.read(start, start + batch_rows)


@dataclass
class SaxTable:
    """Row ``i`` is the full-cardinality SAX word of series ``i``."""

    w: int
    b: int
    rows: np.ndarray

    @property
    def count(self) -> int:
        return len(self.rows)

    def save(self, path) -> None:
        rows = np.ascontiguousarray(self.rows, dtype=np.uint8)
        try:
            with open(path, "wb") as fh:
                fh.write(_SAX_HEADER.pack(SAX_MAGIC, self.w, self.b, len(rows)))
                fh.write(rows.tobytes())
        except OSError as exc:
            raise StorageError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "SaxTable":
        raw = Path(path).read_bytes()
        if len(raw) < _SAX_HEADER.size:
            raise FormatError(f"{path}: truncated SAX table header")
        magic, w, b, count = _SAX_HEADER.unpack_from(raw)
        if magic != SAX_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        body = raw[_SAX_HEADER.size:]
        if len(body) != count * w:
            raise FormatError(f"{path}: expected {count * w} symbol bytes, found {len(body)}")
        rows = np.frombuffer(body, dtype=np.uint8).reshape(count, w).copy()
        return cls(w, b, rows)


def _summarize(block: np.ndarray, w: int, c: int):
    X = prepare(block)
    p = paa(X, w)
    return sax_from_paa(p, c), p


def build_sax_table(ds: DatasetHandle, w: int, c: int, batch_rows: int | None = None,
                    workers: int = 1, with_paa: bool = False):
    """Scan the dataset once and collect the SAX word of every series.

    Returns the table, and the PAA matrix when ``with_paa`` is set.
    The result does not depend on ``batch_rows`` or ``workers``.
    """
    b = bits_for(c)
    if b > 8:
        raise InvalidArgumentError("SAX tables store one byte per symbol; cardinality must be <= 256")
    if ds.n % w:
        raise InvalidArgumentError(f"segment count {w} does not divide series length {ds.n}")
    rows = np.empty((ds.count, w), dtype=np.uint8)
    paas = np.empty((ds.count, w), dtype=np.float64) if with_paa else None
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for start, block in iter_batches(ds, batch_rows):
            if pool is None:
                parts = [(0, _summarize(block, w, c))]
            else:
                cuts = np.linspace(0, len(block), workers + 1).astype(int)
                futs = [(lo, pool.submit(_summarize, block[lo:hi], w, c)) for lo, hi in zip(cuts[:-1], cuts[1:])]
                parts = [(lo, f.result()) for lo, f in futs]
            for lo, (sax, p) in parts:
                rows[start + lo:start + lo + len(sax)] = sax
                if paas is not None:
                    paas[start + lo:start + lo + len(sax)] = p
    finally:
        if pool is not None:
            pool.shutdown()
    table = SaxTable(w, b, rows)
    return (table, paas) if with_paa else table
