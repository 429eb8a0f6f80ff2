"""Series representation: z-normalization, PAA, SAX and iSAX words.

Conventions used throughout the package:

* segments are numbered from 0 to ``w - 1``;
* a SAX word holds ``w`` symbols in ``[0, c)`` with ``c = 2 ** b``;
* an iSAX word is a pair of arrays ``(codes, depths)`` where ``codes[i]``
  holds the top ``depths[i]`` bits of the SAX symbol of segment ``i``
  (depth 0 is the wildcard covering the whole value range);
* a sid concatenates one bit per chosen segment, the first chosen segment
  being the most significant bit.
"""
from __future__ import annotations

from functools import lru_cache
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import ndtri

from .exceptions import InternalError, InvalidArgumentError

__all__ = [
    "IsaxWord",
    "bits_for",
    "check_cardinality",
    "gaussian_breakpoints",
    "interval_bounds",
    "paa",
    "prepare",
    "promote_isax",
    "promote_isax_fixed",
    "promote_rows",
    "sax_from_paa",
    "sax_words",
    "symbol_midpoints",
    "znormalize",
]


class IsaxWord(NamedTuple):
    codes: tuple[int, ...]
    depths: tuple[int, ...]

    @classmethod
    def root(cls, w: int) -> "IsaxWord":
        return cls((0,) * w, (0,) * w)

    @classmethod
    def from_sax(cls, sax: Sequence[int], depths: Sequence[int], b: int) -> "IsaxWord":
        codes = tuple(int(s) >> (b - d) for s, d in zip(sax, depths))
        return cls(codes, tuple(int(d) for d in depths))

    def covers(self, sax: Sequence[int], b: int) -> bool:
        """True when every segment code is a bit-prefix of ``sax``."""
        return all(int(s) >> (b - d) == c for s, c, d in zip(sax, self.codes, self.depths))


def check_cardinality(c: int) -> int:
    c = int(c)
    if c < 2 or c & (c - 1):
        raise InvalidArgumentError(f"cardinality must be a power of two >= 2, got {c}")
    return c


def bits_for(c: int) -> int:
    return check_cardinality(c).bit_length() - 1


def znormalize(x) -> np.ndarray:
    """Z-normalize a series (1-D) or every row of a matrix (2-D).

    Uses the population standard deviation. Constant rows map to zeros.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] == 0:
        raise InvalidArgumentError("cannot z-normalize an empty series")
    mu = x.mean(axis=-1, keepdims=True)
    sd = x.std(axis=-1, keepdims=True)
    centred = x - mu
    safe = np.where(sd > 0, sd, 1.0)
    return np.where(sd > 0, centred / safe, 0.0)


def prepare(x) -> np.ndarray:
    """Round raw values to float32, z-normalize, and round again.

    Datasets hold float32 values, so a query taken from the dataset is
    prepared exactly like the stored copy. All summaries and distances are
    computed from the result.
    """
    return znormalize(np.asarray(x, dtype=np.float32)).astype(np.float32)


def paa(s, w: int) -> np.ndarray:
    """Piecewise aggregate approximation of a series or of each row."""
    s = np.asarray(s, dtype=np.float64)
    n = s.shape[-1]
    if w < 1 or w > n:
        raise InvalidArgumentError(f"segment count {w} outside [1, {n}]")
    if n % w:
        raise InvalidArgumentError(f"segment count {w} does not divide series length {n}")
    return s.reshape(s.shape[:-1] + (w, n // w)).mean(axis=-1)


@lru_cache(maxsize=None)
def _breakpoints(c: int) -> np.ndarray:
    bp = ndtri(np.arange(1, c) / c)
    half = (c - 1) // 2
    # exact antisymmetry; ndtri is symmetric only to rounding
    bp[c - 2 - np.arange(half)] = -bp[np.arange(half)]
    if c % 2 == 0:
        bp[c // 2 - 1] = 0.0
    bp.setflags(write=False)
    return bp


def gaussian_breakpoints(c: int) -> np.ndarray:
    """The ``c - 1`` standard-normal quantiles splitting the line into ``c`` regions."""
    return _breakpoints(check_cardinality(c))


@lru_cache(maxsize=None)
def _edges(c: int, clamped: bool) -> np.ndarray:
    bp = _breakpoints(c)
    # outer edges for statistics: the median of the extreme full-cardinality region
    outer = float(ndtri(1.0 - 0.5 / c)) if clamped else np.inf
    edges = np.concatenate(([-outer], bp, [outer]))
    edges.setflags(write=False)
    return edges


def sax_from_paa(p, c: int) -> np.ndarray:
    """Map PAA coefficients to symbols; a value on a breakpoint goes to the upper region."""
    bp = gaussian_breakpoints(c)
    return np.searchsorted(bp, np.asarray(p, dtype=np.float64), side="right").astype(np.uint8 if c <= 256 else np.uint16)


def sax_words(X, w: int, c: int) -> np.ndarray:
    """SAX words of already prepared series (rows)."""
    return sax_from_paa(paa(X, w), c)


def interval_bounds(codes, depths, c: int, clamped: bool = False):
    """Value range ``[lo, hi)`` represented by iSAX symbols.

    With ``clamped`` the infinite outer edges are replaced by finite ones,
    which is what statistics (midpoints, widths) need.
    """
    b = bits_for(c)
    codes = np.asarray(codes, dtype=np.int64)
    shift = b - np.asarray(depths, dtype=np.int64)
    edges = _edges(c, clamped)
    return edges[codes << shift], edges[(codes + 1) << shift]


def symbol_midpoints(codes, depths, c: int) -> np.ndarray:
    lo, hi = interval_bounds(codes, depths, c, clamped=True)
    return (lo + hi) / 2.0


def promote_isax(node_depths, sax, csl, b: int) -> int:
    """Sid of a SAX word below a node splitting on ``csl``."""
    sid = 0
    for seg in csl:
        d = int(node_depths[seg])
        if d >= b:
            raise InternalError(f"segment {seg} already at full depth {b}")
        sid = (sid << 1) | ((int(sax[seg]) >> (b - 1 - d)) & 1)
    return sid


def promote_isax_fixed(node_depths, sax, csl, fixed_segment: int, fixed_bit: int, b: int) -> int:
    """Like :func:`promote_isax` but the bit of ``fixed_segment`` is forced."""
    sid = 0
    for seg in csl:
        d = int(node_depths[seg])
        if d >= b:
            raise InternalError(f"segment {seg} already at full depth {b}")
        if seg == fixed_segment:
            bit = int(fixed_bit) & 1
        else:
            bit = (int(sax[seg]) >> (b - 1 - d)) & 1
        sid = (sid << 1) | bit
    return sid


def promote_rows(node_depths, sax_rows: np.ndarray, csl, b: int) -> np.ndarray:
    """Vectorised :func:`promote_isax` over the rows of a SAX matrix."""
    sids = np.zeros(len(sax_rows), dtype=np.int64)
    for seg in csl:
        d = int(node_depths[seg])
        if d >= b:
            raise InternalError(f"segment {seg} already at full depth {b}")
        sids = (sids << 1) | ((sax_rows[:, seg].astype(np.int64) >> (b - 1 - d)) & 1)
    return sids
