"""Paired method comparison: one-sided Wilcoxon signed-rank, Holm, Win/Tie/Loss."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import norm, rankdata

EXACT_MAX_N = 12
MIN_N = 5


class CellMismatchError(ValueError):
    def __init__(self, only_a, only_b):
        self.only_a = sorted(only_a, key=str)
        self.only_b = sorted(only_b, key=str)
        super().__init__(f"cells differ: only in A {self.only_a}, only in B {self.only_b}")


@dataclass(frozen=True)
class WilcoxonResult:
    p: float
    statistic: float   # sum of ranks of positive differences
    n: int             # nonzero differences used
    exact: bool
    degenerate: bool   # every difference was zero


def _exact_upper_tail(ranks: np.ndarray, w: float) -> float:
    """P(W+ >= w) under the null, by counting sign patterns.

    Average ranks are multiples of 1/2, so the rank sums are tracked as
    integers at twice their value.
    """
    twice = np.rint(ranks * 2).astype(int)
    total = int(twice.sum())
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in twice:
        counts[r:] = counts[r:] + counts[:-r]
    target = int(round(w * 2))
    return float(counts[target:].sum()) / float(2 ** len(ranks))


def wilcoxon_one_sided(differences: Sequence[float]) -> WilcoxonResult:
    """Test ``A > B`` from paired differences ``A - B``.

    Zero differences are dropped; tied magnitudes get average ranks. Exact
    null distribution for n <= 12, otherwise a normal approximation with
    tie-corrected variance (no continuity correction).
    """
    d = np.asarray(differences, dtype=float)
    d = d[d != 0]
    n = d.size
    if n == 0:
        return WilcoxonResult(1.0, 0.0, 0, True, True)
    if n < MIN_N:
        raise ValueError(f"need at least {MIN_N} nonzero differences, got {n}")
    ranks = rankdata(np.abs(d))
    w = float(ranks[d > 0].sum())
    if n <= EXACT_MAX_N:
        return WilcoxonResult(_exact_upper_tail(ranks, w), w, n, True, False)
    mean = n * (n + 1) / 4.0
    _, ties = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float((ties ** 3 - ties).sum()) / 48.0
    z = (w - mean) / math.sqrt(var)
    return WilcoxonResult(float(norm.sf(z)), w, n, False, False)


def holm_bonferroni(p_values: Sequence[float], alpha: float = 0.05):
    """Holm step-down adjusted p-values and rejection flags (``adjusted < alpha``)."""
    p = np.asarray(p_values, dtype=float)
    if p.size == 0:
        raise ValueError("no p-values given")
    if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    adj_sorted = np.minimum(1.0, (m - np.arange(m)) * p[order])
    adj_sorted = np.maximum.accumulate(adj_sorted)
    adjusted = np.empty(m)
    adjusted[order] = adj_sorted
    return adjusted, adjusted < alpha


def win_tie_loss(a: Mapping, b: Mapping, decimals: int = 3) -> tuple[int, int, int]:
    """Count cells where A's score beats, ties or loses to B's after rounding."""
    if set(a) != set(b):
        raise CellMismatchError(set(a) - set(b), set(b) - set(a))
    w = t = l = 0
    for cell in a:
        x, y = round(float(a[cell]), decimals), round(float(b[cell]), decimals)
        if x > y:
            w += 1
        elif x < y:
            l += 1
        else:
            t += 1
    return w, t, l


@dataclass
class PairedComparison:
    method_a: str
    method_b: str
    cells: list
    scores_a: list[float]
    scores_b: list[float]
    wins: int
    ties: int
    losses: int
    p_raw: float
    p_adjusted: float = float("nan")
    degenerate: bool = False

    @property
    def significant(self) -> bool:
        return bool(self.p_adjusted < 0.05)

    def row(self) -> dict:
        return {"method_a": self.method_a, "method_b": self.method_b, "cells": len(self.cells),
                "wins": self.wins, "ties": self.ties, "losses": self.losses,
                "p_raw": self.p_raw, "p_adjusted": self.p_adjusted,
                "significant": "*" if self.significant else ""}


def compare_methods(pairs: Sequence[tuple[str, str]], scores: Mapping[str, Mapping]) -> list[PairedComparison]:
    """Pairwise A-vs-B comparisons over shared cells, Holm-adjusted together.

    ``scores[method][cell]`` holds the seed-averaged accuracy of a cell.
    """
    out = []
    for a, b in pairs:
        sa, sb = scores[a], scores[b]
        w, t, l = win_tie_loss(sa, sb)
        cells = sorted(sa, key=str)
        xa = [float(sa[c]) for c in cells]
        xb = [float(sb[c]) for c in cells]
        try:
            res = wilcoxon_one_sided(np.subtract(xa, xb))
            p, degenerate = res.p, res.degenerate
        except ValueError:
            # too few informative cells for the test; reported without a p-value
            p, degenerate = float("nan"), False
        out.append(PairedComparison(a, b, cells, xa, xb, w, t, l, p, degenerate=degenerate))
    tested = [c for c in out if math.isfinite(c.p_raw)]
    if tested:
        adj, _ = holm_bonferroni([c.p_raw for c in tested])
        for c, p in zip(tested, adj):
            c.p_adjusted = float(p)
    return out
