"""Adaptive multi-segment node splitting.

A split plan is a set of chosen segments; splitting refines each chosen
segment by one bit, so a plan with ``lam`` segments has ``2 ** lam``
potential children. Plans are scored by

    exp(sqrt(V / lam)) + alpha * exp(-(1 + o) * sigma_F)

where ``V`` is the variance of the rows projected on the chosen segments
(symbol midpoints), ``o`` the fraction of overflowing children and
``sigma_F`` the standard deviation of the children fill factors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .exceptions import CannotSplitError
from .series import bits_for, symbol_midpoints

__all__ = [
    "SCORE_TIE_RTOL",
    "SplitPlan",
    "binary_split_plan",
    "child_size_distributions",
    "choose_split_plan",
    "lambda_range",
    "score_plan",
    "segment_variances",
    "splittable_segments",
]

# plans whose scores agree to this relative tolerance are treated as tied
SCORE_TIE_RTOL = 1e-10


@dataclass
class SplitPlan:
    csl: tuple
    child_sizes: np.ndarray
    th: int
    variance_sum: float = 0.0
    overflow_ratio: float = 0.0
    fillfactor_std: float = 0.0
    score: float = field(default=float("nan"))

    @property
    def fanout(self) -> int:
        return 1 << len(self.csl)


def splittable_segments(depths, b: int) -> list[int]:
    return [s for s, d in enumerate(depths) if int(d) < b]


def segment_variances(rows: np.ndarray, depths, c: int) -> np.ndarray:
    """Per-segment variance of the one-bit-refined symbol midpoints.

    Segments already at full depth get variance 0 and are never chosen.
    """
    b = bits_for(c)
    rows = np.asarray(rows)
    if len(rows) == 0:
        raise CannotSplitError("no rows to split")
    seg = splittable_segments(depths, b)
    if not seg:
        raise CannotSplitError("every segment is at full depth")
    var = np.zeros(len(depths))
    for s in seg:
        d = int(depths[s]) + 1
        codes = rows[:, s].astype(np.int64) >> (b - d)
        var[s] = np.var(symbol_midpoints(codes, np.full_like(codes, d), c))
    return var


def lambda_range(c_N: int, th: int, F_l: float, F_r: float, w: int) -> tuple[int, int]:
    """Admissible numbers of chosen segments keeping the mean child fill in [F_l, F_r]."""
    lo = max(1, math.ceil(math.log2(c_N / (F_r * th))))
    hi = min(w, math.floor(math.log2(c_N / (F_l * th))))
    lo = min(lo, w)
    return lo, max(hi, lo)


def _next_bits(rows: np.ndarray, depths, segs, b: int) -> np.ndarray:
    """Concatenated next bit of each segment in ``segs`` (first = most significant)."""
    code = np.zeros(len(rows), dtype=np.int64)
    for s in segs:
        code = (code << 1) | ((rows[:, s].astype(np.int64) >> (b - 1 - int(depths[s]))) & 1)
    return code


def child_size_distributions(rows: np.ndarray, depths, plans, c: int) -> dict:
    """Child sizes of every plan, derived from one base histogram.

    The base histogram counts the rows per full sid over all splittable
    segments. Plans of the largest requested size are marginalised from
    it directly; smaller plans are obtained by summing out one segment of
    an already computed superset, walking from large fanouts to small.
    """
    b = bits_for(c)
    segs = splittable_segments(depths, b)
    nseg = len(segs)
    pos = {s: i for i, s in enumerate(segs)}
    codes, counts = np.unique(_next_bits(rows, depths, segs, b), return_counts=True)
    plans = [tuple(sorted(p)) for p in plans]
    if not plans:
        return {}
    top = max(len(p) for p in plans)
    memo: dict[tuple, np.ndarray] = {}

    def from_base(plan):
        sid = np.zeros(len(codes), dtype=np.int64)
        for s in plan:
            sid = (sid << 1) | ((codes >> (nseg - 1 - pos[s])) & 1)
        return np.bincount(sid, weights=counts, minlength=1 << len(plan)).astype(np.int64)

    def get(plan):
        if plan in memo:
            return memo[plan]
        if len(plan) >= top or len(plan) == nseg:
            dist = from_base(plan)
        else:
            extra = next(s for s in segs if s not in plan)
            sup = tuple(sorted(plan + (extra,)))
            axis = sup.index(extra)
            dist = get(sup).reshape((2,) * len(sup)).sum(axis=axis).reshape(-1)
        memo[plan] = dist
        return dist

    for plan in sorted(plans, key=len, reverse=True):
        get(plan)
    return {p: memo[p] for p in plans}


def _stats(variance_sum: float, lam: int, sizes: np.ndarray, th: int, alpha: float):
    fill = sizes / th
    sigma = float(np.std(fill))
    o = float(np.count_nonzero(sizes > th)) / len(sizes)
    score = math.exp(math.sqrt(variance_sum / lam)) + alpha * math.exp(-(1.0 + o) * sigma)
    return score, o, sigma


def score_plan(plan: SplitPlan, alpha: float) -> float:
    score, o, sigma = _stats(plan.variance_sum, len(plan.csl), np.asarray(plan.child_sizes), plan.th, alpha)
    plan.overflow_ratio, plan.fillfactor_std, plan.score = o, sigma, score
    return score


def _better(a: SplitPlan, b: SplitPlan) -> bool:
    """Is ``a`` preferred over the incumbent ``b``? Ties: smaller fanout, then smaller csl."""
    tol = SCORE_TIE_RTOL * max(abs(a.score), abs(b.score))
    if a.score > b.score + tol:
        return True
    if a.score < b.score - tol:
        return False
    return (len(a.csl), a.csl) < (len(b.csl), b.csl)


def choose_split_plan(rows: np.ndarray, depths, th: int, F_l: float = 0.5, F_r: float = 3.0,
                      alpha: float = 0.2, c: int = 256, exhaustive: bool = False) -> SplitPlan:
    """Return the best-scoring admissible split plan for the rows of a node."""
    b = bits_for(c)
    rows = np.asarray(rows)
    segs = splittable_segments(depths, b)
    if not segs:
        raise CannotSplitError("every segment is at full depth")
    if exhaustive:
        lo, hi = 1, len(segs)
    else:
        lo, hi = lambda_range(len(rows), th, F_l, F_r, len(depths))
        lo, hi = min(lo, len(segs)), min(hi, len(segs))
    var = segment_variances(rows, depths, c)
    plans = [p for lam in range(lo, hi + 1) for p in combinations(segs, lam)]
    dists = child_size_distributions(rows, depths, plans, c)
    best = None
    for p in plans:
        plan = SplitPlan(p, dists[p], th, float(sum(var[s] for s in p)))
        score_plan(plan, alpha)
        if best is None or _better(plan, best):
            best = plan
    return best


def binary_split_plan(rows: np.ndarray, depths, th: int, c: int = 256, alpha: float = 0.2) -> SplitPlan:
    """Baseline: split on the single segment with the largest variance."""
    b = bits_for(c)
    var = segment_variances(rows, depths, c)
    segs = splittable_segments(depths, b)
    seg = max(segs, key=lambda s: (var[s], -s))
    sizes = np.bincount(_next_bits(np.asarray(rows), depths, [seg], b), minlength=2)
    plan = SplitPlan((seg,), sizes, th, float(var[seg]))
    score_plan(plan, alpha)
    return plan
