"""Exact distances (ED, banded DTW) and lower bounds against iSAX regions.

Distances are carried squared inside the kernels; square roots are only
taken by the public scalar helpers and when results are reported.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numba import njit

from .exceptions import InvalidArgumentError
from .series import interval_bounds, paa

__all__ = [
    "DistanceKind",
    "Envelope",
    "ED",
    "band_radius",
    "dtw",
    "ed",
    "envelope",
    "lb_isax_dtw",
    "lb_isax_ed",
    "lb_keogh_sq",
    "query_bounds",
    "region_lb_sq",
    "scan_dtw",
    "scan_ed",
]


@dataclass(frozen=True)
class DistanceKind:
    """Either plain Euclidean distance or DTW with a Sakoe-Chiba band."""

    name: str = "ed"
    window_ratio: float = 0.10

    def __post_init__(self):
        if self.name not in ("ed", "dtw"):
            raise InvalidArgumentError(f"unknown distance {self.name!r}")
        if not 0.0 < self.window_ratio <= 1.0:
            raise InvalidArgumentError("window_ratio must lie in (0, 1]")

    @classmethod
    def parse(cls, value, window_ratio: float = 0.10) -> "DistanceKind":
        if isinstance(value, DistanceKind):
            return value
        return cls(str(value).lower(), window_ratio)

    @property
    def is_dtw(self) -> bool:
        return self.name == "dtw"

    def radius(self, n: int) -> int:
        return band_radius(n, self.window_ratio)

    def __str__(self):
        return "ed" if self.name == "ed" else f"dtw({self.window_ratio:g})"


ED = DistanceKind("ed")


def band_radius(n: int, window_ratio: float) -> int:
    # round up: a wider band never breaks a lower bound
    return min(n - 1, int(math.ceil(window_ratio * n - 1e-12)))


class Envelope(NamedTuple):
    upper: np.ndarray
    lower: np.ndarray


def _check_pair(a, b):
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidArgumentError(f"length mismatch: {a.shape} vs {b.shape}")
    return a, b


@njit(cache=True, nogil=True)
def _ed_sq(a, b, cutoff):
    acc = 0.0
    for i in range(a.shape[0]):
        d = a[i] - b[i]
        acc += d * d
        if acc > cutoff:
            return np.inf
    return acc


@njit(cache=True, nogil=True)
def _dtw_core(a, b, r, cutoff, rest, prev, cur):
    # prev/cur hold n + 2 cells; cell j + 1 is column j and cell 0 is the
    # virtual corner before the first column. rest[i] lower-bounds the
    # cost still to come after row i.
    n = a.shape[0]
    for j in range(n + 2):
        prev[j] = np.inf
        cur[j] = np.inf
    prev[0] = 0.0
    for i in range(n):
        jlo = max(0, i - r)
        jhi = min(n - 1, i + r)
        cur[jlo] = np.inf
        rowmin = np.inf
        ai = a[i]
        left = np.inf
        for j in range(jlo, jhi + 1):
            best = prev[j + 1]
            if prev[j] < best:
                best = prev[j]
            if left < best:
                best = left
            d = ai - b[j]
            left = d * d + best
            cur[j + 1] = left
            if left < rowmin:
                rowmin = left
        if jhi + 2 <= n + 1:
            cur[jhi + 2] = np.inf
        if rowmin + rest[i] * (1.0 - 1e-12) > cutoff:
            return np.inf
        if i == 0:
            prev[0] = np.inf
        prev, cur = cur, prev
    return prev[n]


@njit(cache=True, nogil=True)
def _dtw_sq(a, b, r, cutoff):
    n = a.shape[0]
    return _dtw_core(a, b, r, cutoff, np.zeros(n), np.empty(n + 2), np.empty(n + 2))


@njit(cache=True, nogil=True)
def _push_topk(top, v):
    # top is sorted ascending, fixed length k
    k = top.shape[0]
    if v >= top[k - 1]:
        return
    i = k - 1
    while i > 0 and top[i - 1] > v:
        top[i] = top[i - 1]
        i -= 1
    top[i] = v


@njit(cache=True, nogil=True)
def _scan_ed(S, q, mask, top):
    m = S.shape[0]
    n = S.shape[1]
    out = np.full(m, np.inf)
    for r in range(m):
        if not mask[r]:
            continue
        cutoff = top[top.shape[0] - 1]
        acc = 0.0
        for i in range(n):
            d = np.float64(S[r, i]) - q[i]
            acc += d * d
            if acc > cutoff:
                acc = np.inf
                break
        out[r] = acc
        if acc < np.inf:
            _push_topk(top, acc)
    return out


@njit(cache=True, nogil=True)
def _lb_keogh_rows(S, upper, lower):
    m = S.shape[0]
    n = S.shape[1]
    out = np.empty(m)
    for r in range(m):
        acc = 0.0
        for i in range(n):
            x = np.float64(S[r, i])
            if x > upper[i]:
                d = x - upper[i]
                acc += d * d
            elif x < lower[i]:
                d = lower[i] - x
                acc += d * d
        out[r] = acc
    return out


@njit(cache=True, nogil=True)
def _scan_dtw(S, q, radius, lbk, order, mask, top, upper, lower):
    m = S.shape[0]
    n = S.shape[1]
    out = np.full(m, np.inf)
    row = np.empty(n)
    rest = np.empty(n)
    prev = np.empty(n + 2)
    cur = np.empty(n + 2)
    for t in range(order.shape[0]):
        r = order[t]
        if not mask[r]:
            continue
        cutoff = top[top.shape[0] - 1]
        if lbk[r] > cutoff:
            break
        for i in range(n):
            row[i] = S[r, i]
        # the row is the outer sequence, so its envelope terms bound the rows left
        acc = 0.0
        for i in range(n - 1, -1, -1):
            rest[i] = acc
            x = row[i]
            if x > upper[i]:
                acc += (x - upper[i]) * (x - upper[i])
            elif x < lower[i]:
                acc += (lower[i] - x) * (lower[i] - x)
        v = _dtw_core(row, q, radius, cutoff, rest, prev, cur)
        out[r] = v
        if v < np.inf:
            _push_topk(top, v)
    return out


def ed(a, b) -> float:
    """Euclidean distance, summed left to right."""
    a, b = _check_pair(a, b)
    return math.sqrt(_ed_sq(a, b, np.inf))


def dtw(a, b, window_ratio: float = 0.10) -> float:
    """DTW with squared point costs inside a Sakoe-Chiba band."""
    a, b = _check_pair(a, b)
    if not 0.0 < window_ratio <= 1.0:
        raise InvalidArgumentError("window_ratio must lie in (0, 1]")
    return math.sqrt(_dtw_sq(a, b, band_radius(len(a), window_ratio), np.inf))


def envelope(q, radius: int) -> Envelope:
    """Running max/min of ``q`` over ``[i - radius, i + radius]``."""
    from scipy.ndimage import maximum_filter1d, minimum_filter1d

    q = np.asarray(q, dtype=np.float64)
    size = 2 * radius + 1
    return Envelope(
        maximum_filter1d(q, size, mode="nearest"),
        minimum_filter1d(q, size, mode="nearest"),
    )


def lb_keogh_sq(S, env: Envelope) -> np.ndarray:
    S = np.ascontiguousarray(S)
    if S.ndim == 1:
        S = S[None, :]
    return _lb_keogh_rows(S, env.upper, env.lower)


def query_bounds(q, w: int, dist: DistanceKind = ED):
    """Per-segment value range of the query used by the region lower bound.

    For ED it collapses to the query PAA; for DTW it is the PAA of the
    lower and upper envelope.
    """
    q = np.asarray(q, dtype=np.float64)
    if not dist.is_dtw:
        p = paa(q, w)
        return p, p
    env = envelope(q, dist.radius(len(q)))
    return paa(env.lower, w), paa(env.upper, w)


def region_lb_sq(qlo, qhi, codes, depths, n: int, c: int) -> np.ndarray:
    """Squared lower bound between a query range and iSAX regions.

    ``codes``/``depths`` may be single words or stacked (``(m, w)``).
    """
    lo, hi = interval_bounds(codes, depths, c)
    gap = np.maximum(0.0, np.maximum(lo - qhi, qlo - hi))
    w = np.shape(codes)[-1]
    return (n / w) * np.sum(gap * gap, axis=-1)


def lb_isax_ed(query_paa, codes, depths, n: int, c: int) -> float:
    p = np.asarray(query_paa, dtype=np.float64)
    return float(np.sqrt(region_lb_sq(p, p, codes, depths, n, c)))


def lb_isax_dtw(query, codes, depths, c: int, window_ratio: float = 0.10) -> float:
    query = np.asarray(query, dtype=np.float64)
    w = len(codes)
    qlo, qhi = query_bounds(query, w, DistanceKind("dtw", window_ratio))
    return float(np.sqrt(region_lb_sq(qlo, qhi, codes, depths, len(query), c)))


def scan_ed(S, q, mask, top) -> np.ndarray:
    """Squared ED of each masked row, abandoning rows beyond the running k-th best.

    ``top`` is the sorted k-best array (inf padded); it is updated in place.
    """
    return _scan_ed(S, q, mask, top)


def scan_dtw(S, q, radius, env: Envelope, mask, top) -> np.ndarray:
    lbk = _lb_keogh_rows(S, env.upper, env.lower)
    order = np.argsort(lbk, kind="stable")
    return _scan_dtw(S, q, radius, lbk, order, mask, top, env.upper, env.lower)
