"""Rank tests, FDR control, Student-t tail probabilities and Jaccard overlap."""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import Mapping

import numpy as np

from . import kernels

EXACT_MAX_CELLS = 400
FDR_MARKERS = ((0.01, "†"), (0.05, "††"), (0.1, "†††"))


def rankdata(x) -> np.ndarray:
    """1-based ranks; tied values share their average rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(xs):
        j = i
        while j + 1 < len(xs) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


# -- Student t via the regularized incomplete beta ---------------------------


def _betacf(a: float, b: float, x: float, max_iter: int = 300, tol: float = 1e-15) -> float:
    # Lentz continued fraction for I_x(a, b)
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            break
    return h


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    return _betainc(a, b, x, 1.0 - x)


def _betainc(a: float, b: float, x: float, y: float) -> float:
    # y = 1 - x, passed separately when the caller can form it without cancellation
    if a <= 0 or b <= 0:
        raise ValueError("betainc_reg needs a, b > 0")
    if x <= 0:
        return 0.0
    if y <= 0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log(y))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(ln_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(ln_front) * _betacf(b, a, y) / b


def t_two_sided_p(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student t with ``df`` degrees of freedom."""
    if not df > 0:
        raise ValueError("degrees of freedom must be positive")
    if math.isinf(t):
        return 0.0
    t2 = t * t
    return min(1.0, _betainc(0.5 * df, 0.5, df / (df + t2), t2 / (df + t2)))


def t_cdf(t: float, df: float) -> float:
    half = 0.5 * t_two_sided_p(t, df)
    return 1.0 - half if t > 0 else half


# -- Mann-Whitney U ----------------------------------------------------------


@dataclass(frozen=True)
class TestResult:
    __test__ = False  # not a pytest class

    u_statistic: float
    p_two_sided: float
    method: str
    n: int
    m: int


def mann_whitney_u(a, b) -> TestResult:
    """Two-sided Mann-Whitney U test; ``u_statistic`` is U for sample ``a``.

    Exact null distribution when ``n*m <= 400`` and there are no ties,
    otherwise the normal approximation with tie and continuity corrections.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    n, m = a.size, b.size
    if n == 0 or m == 0:
        raise ValueError("Mann-Whitney needs two non-empty samples")
    pooled = np.concatenate([a, b])
    ranks = rankdata(pooled)
    u = float(ranks[:n].sum() - n * (n + 1) / 2.0)
    has_ties = np.unique(pooled).size < pooled.size
    if n * m <= EXACT_MAX_CELLS and not has_ties:
        counts = kernels.mwu_null_counts(n, m)
        total = counts.sum()
        k = int(round(u))
        lower = counts[: k + 1].sum() / total
        upper = counts[k:].sum() / total
        p = min(1.0, 2.0 * min(lower, upper))
        return TestResult(u, float(p), "exact", n, m)
    N = n + m
    _, tie_counts = np.unique(pooled, return_counts=True)
    tie_term = float((tie_counts ** 3 - tie_counts).sum())
    var = n * m / 12.0 * ((N + 1) - tie_term / (N * (N - 1)))
    if var <= 0:
        return TestResult(u, 1.0, "normal-approx", n, m)
    z = max(abs(u - n * m / 2.0) - 0.5, 0.0) / math.sqrt(var)
    return TestResult(u, float(min(1.0, math.erfc(z / math.sqrt(2.0)))), "normal-approx", n, m)


# -- Benjamini-Hochberg ------------------------------------------------------


@dataclass(frozen=True)
class FDRResult:
    raw_p: list
    adjusted_p: list
    rejected: list


def benjamini_hochberg(raw_p, alpha: float = 0.05) -> FDRResult:
    p = np.asarray(raw_p, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError("raw p-values must be a flat list")
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    if m == 0:
        return FDRResult([], [], [])
    order = np.argsort(p, kind="mergesort")
    scaled = p[order] * m / np.arange(1, m + 1)
    adj_sorted = np.minimum(np.minimum.accumulate(scaled[::-1])[::-1], 1.0)
    adjusted = np.empty(m)
    adjusted[order] = adj_sorted
    # p * m / rank can round one ulp below p when rank == m
    adjusted = np.maximum(adjusted, p)
    return FDRResult(p.tolist(), adjusted.tolist(), (adjusted <= alpha).tolist())


def fdr_marker(p_fdr: float) -> str:
    """Dagger marker for an FDR-adjusted p (one dagger is the strongest level)."""
    for threshold, mark in FDR_MARKERS:
        if p_fdr < threshold:
            return mark
    return ""


# -- Jaccard overlap ---------------------------------------------------------


def jaccard(a, b) -> float | None:
    a, b = set(a), set(b)
    union = a | b
    if not union:
        return None
    return len(a & b) / len(union)


def top_n_from_counts(counts, n: int, labels=None) -> list:
    """The ``n`` most frequent entries; ties by ascending position.

    Zero-count entries are never included.
    """
    counts = np.asarray(counts)
    order = np.argsort(-counts, kind="stable")
    picked = [int(i) for i in order[:n] if counts[i] > 0]
    return picked if labels is None else [labels[i] for i in picked]


def chance_jaccard(n: int, k: int) -> float:
    """Chance overlap ``N / (2K - N)`` of two independent uniform ``n``-subsets of ``k`` items.

    This is E|A & B| / E|A | B| (``N^2/K`` over ``2N - N^2/K``).
    """
    if not 1 <= n <= k:
        raise ValueError(f"need 1 <= N <= K, got N={n}, K={k}")
    return n / (2 * k - n)


@dataclass(frozen=True)
class JaccardMatrix:
    labels: list
    values: np.ndarray

    def off_diagonal_mean(self) -> float:
        k = len(self.labels)
        mask = ~np.eye(k, dtype=bool)
        return float(self.values[mask].mean()) if k > 1 else float("nan")

    def to_dict(self) -> dict:
        return {"labels": list(self.labels), "values": self.values.tolist()}


def jaccard_overlap(selections: Mapping[str, Mapping[str, set]]) -> JaccardMatrix:
    """Mean per-perturbation Jaccard index for every pair of cell types.

    ``selections`` maps cell type -> perturbation -> selected-candidate set.
    Pairs where both sets are empty are skipped.
    """
    labels = sorted(selections)
    if not labels:
        raise ValueError("no cell types given")
    keys = set(selections[labels[0]])
    for lab in labels[1:]:
        if set(selections[lab]) != keys:
            raise ValueError(f"cell type {lab!r} covers different perturbations")
    if not any(selections[lab][p] for lab in labels for p in keys):
        raise ValueError("every selection set is empty")
    k = len(labels)
    values = np.eye(k)
    for i, j in combinations(range(k), 2):
        scores = [s for p in sorted(keys)
                  if (s := jaccard(selections[labels[i]][p], selections[labels[j]][p])) is not None]
        values[i, j] = values[j, i] = float(np.mean(scores)) if scores else 0.0
    return JaccardMatrix(labels, values)
