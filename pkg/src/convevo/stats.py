"""One-sided Mann-Whitney U test, exact for small tie-free samples.

The exact path enumerates the U distribution with the standard count
recursion (largest remaining observation is either from a or from b) and is
used when both samples have at most EXACT_LIMIT observations and there are
no ties. Otherwise the midrank normal approximation applies, with the tie
correction and a 0.5 continuity correction.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

EXACT_LIMIT = 12


def _midranks(values: np.ndarray) -> np.ndarray:
    """Ranks 1..n with tied values sharing their average rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sv = values[order]
    i = 0
    while i < len(sv):
        j = i
        while j < len(sv) and sv[j] == sv[i]:
            j += 1
        ranks[order[i:j]] = (i + j + 1) / 2.0  # average of ranks i+1 .. j
        i = j
    return ranks


@lru_cache(maxsize=None)
def _u_count(n: int, m: int, u: int) -> int:
    """Number of interleavings of n a's and m b's with exactly u (a > b) pairs."""
    if u < 0:
        return 0
    if n == 0 or m == 0:
        return 1 if u == 0 else 0
    return _u_count(n - 1, m, u - m) + _u_count(n, m - 1, u)


def _exact_upper_p(n_a: int, n_b: int, u_a: int) -> float:
    total = math.comb(n_a + n_b, n_a)
    tail = sum(_u_count(n_a, n_b, v) for v in range(u_a, n_a * n_b + 1))
    return tail / total


def _approx_upper_p(combined: np.ndarray, n_a: int, n_b: int, u_a: float) -> float:
    n = n_a + n_b
    _, counts = np.unique(combined, return_counts=True)
    tie_term = float(np.sum(counts.astype(np.float64) ** 3 - counts))
    variance = (n_a * n_b / 12.0) * ((n + 1) - tie_term / (n * (n - 1)))
    if variance <= 0:
        return 1.0  # every observation tied; no evidence either way
    z = (u_a - n_a * n_b / 2.0 - 0.5) / math.sqrt(variance)
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def mann_whitney_u_one_sided(
    sample_a, sample_b, alternative: str = "a_greater"
) -> tuple[float, float]:
    """U statistic of sample_a and the one-sided p-value.

    Tests the alternative that sample_a is stochastically greater than
    sample_b. Returns (u_a, p) where u_a counts pairs with a > b (ties count
    half) and p is in (0, 1].
    """
    if alternative != "a_greater":
        raise ValueError(f"only the 'a_greater' alternative is supported, got {alternative!r}")
    a = np.asarray(sample_a, dtype=np.float64).ravel()
    b = np.asarray(sample_b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("samples must be finite")

    combined = np.concatenate([a, b])
    ranks = _midranks(combined)
    rank_sum_a = float(ranks[: a.size].sum())
    u_a = rank_sum_a - a.size * (a.size + 1) / 2.0

    has_ties = np.unique(combined).size < combined.size
    if max(a.size, b.size) <= EXACT_LIMIT and not has_ties:
        p = _exact_upper_p(a.size, b.size, int(round(u_a)))
    else:
        p = _approx_upper_p(combined, a.size, b.size, u_a)
    return float(u_a), float(min(p, 1.0))
