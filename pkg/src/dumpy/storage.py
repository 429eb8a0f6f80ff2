"""Leaf data files.

One file per first-layer subtree. A pack owns a contiguous extent of
fixed-size records::

    ordinal : u64   dataset ordinal of the series
    flags   : u8    bit 0 set for a fuzzy duplicate
    sax     : w*u8  full-cardinality SAX word
    series  : n*f32 z-normalized values

Offsets and capacities are counted in records.
"""
from __future__ import annotations

import os
import threading
from pathlib import Path

import numpy as np

from .exceptions import FormatError, StorageError

FLAG_DUPLICATE = 1


def record_dtype(n: int, w: int) -> np.dtype:
    return np.dtype([("ordinal", "<u8"), ("flags", "u1"), ("sax", "u1", (w,)), ("series", "<f4", (n,))])


class LeafStore:
    """Positional reads and writes of record extents, safe across threads."""

    def __init__(self, root, n: int, w: int):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.dtype = record_dtype(n, w)
        self.recsize = self.dtype.itemsize
        self.file_end: dict[int, int] = {}
        self.free: list[tuple[int, int, int]] = []
        self._fds: dict[int, int] = {}
        self._lock = threading.Lock()
        self.bytes_written = 0
        self.write_trace: list[tuple[int, int, int]] | None = None

    def path(self, file_id: int) -> Path:
        return self.root / f"leaf_{file_id:06d}.bin"

    def _fd(self, file_id: int) -> int:
        fd = self._fds.get(file_id)
        if fd is None:
            with self._lock:
                fd = self._fds.get(file_id)
                if fd is None:
                    try:
                        fd = os.open(self.path(file_id), os.O_RDWR | os.O_CREAT, 0o644)
                    except OSError as exc:
                        raise StorageError(str(exc)) from exc
                    self._fds[file_id] = fd
        return fd

    def close(self) -> None:
        with self._lock:
            for fd in self._fds.values():
                os.close(fd)
            self._fds.clear()

    def new_file(self) -> int:
        with self._lock:
            fid = max(self.file_end, default=-1) + 1
            self.file_end[fid] = 0
        return fid

    def allocate(self, file_id: int, capacity: int) -> int:
        """Reserve ``capacity`` records in ``file_id``; returns the offset."""
        with self._lock:
            for i, (fid, off, cap) in enumerate(self.free):
                if fid == file_id and cap >= capacity:
                    if cap == capacity:
                        del self.free[i]
                    else:
                        self.free[i] = (fid, off + capacity, cap - capacity)
                    return off
            off = self.file_end.setdefault(file_id, 0)
            self.file_end[file_id] = off + capacity
            return off

    def release(self, file_id: int, offset: int, capacity: int) -> None:
        if capacity > 0:
            with self._lock:
                self.free.append((file_id, offset, capacity))

    def write(self, file_id: int, slot: int, records: np.ndarray) -> None:
        if len(records) == 0:
            return
        data = np.ascontiguousarray(records, dtype=self.dtype).tobytes()
        pos = slot * self.recsize
        try:
            os.pwrite(self._fd(file_id), data, pos)
        except OSError as exc:
            raise StorageError(str(exc)) from exc
        with self._lock:
            self.bytes_written += len(data)
            if self.write_trace is not None:
                self.write_trace.append((file_id, pos, len(data)))

    def read(self, file_id: int, offset: int, count: int) -> np.ndarray:
        if count == 0:
            return np.empty(0, dtype=self.dtype)
        nbytes = count * self.recsize
        try:
            buf = os.pread(self._fd(file_id), nbytes, offset * self.recsize)
        except OSError as exc:
            raise StorageError(str(exc)) from exc
        if len(buf) != nbytes:
            raise FormatError(f"{self.path(file_id)}: short read of extent at record {offset}")
        return np.frombuffer(buf, dtype=self.dtype)

    def finalize_sizes(self) -> None:
        """Extend every file to its logical end so that unused slots read as zeros."""
        for fid, end in self.file_end.items():
            fd = self._fd(fid)
            if os.fstat(fd).st_size < end * self.recsize:
                os.ftruncate(fd, end * self.recsize)
