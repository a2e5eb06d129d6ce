"""Comparison plans for deduplicating N detections with bag queries.

Comparing every pair of N detections takes N(N-1)/2 verifier calls. A
verifier that checks one query against a bag of up to k targets resolves up
to k pairs per call, so no plan can use fewer than ceil(N(N-1)/(2k)) calls.
:func:`build_plan` gets within N-1 calls of that floor with a greedy star
decomposition: detection i is queried against the later detections i+1..N-1
in chunks of k.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import FormatError, ParameterError


def pairwise_count(n: int) -> int:
    if n < 0:
        raise ParameterError("N must be non-negative")
    return n * (n - 1) // 2


def bagged_lower_bound(n: int, k: int) -> int:
    """Fewest bag queries that could cover every pair when each resolves at most ``k``."""
    if k < 1:
        raise ParameterError("bag size k must be at least 1")
    return math.ceil(pairwise_count(n) / k)


def star_plan_size(n: int, k: int) -> int:
    """Closed-form size of :func:`build_plan`: sum over m = 1..N-1 of ceil(m / k)."""
    if k < 1:
        raise ParameterError("bag size k must be at least 1")
    return sum(-(-m // k) for m in range(1, n))


@dataclass(frozen=True)
class ComparisonPlan:
    n: int
    k: int
    comparisons: tuple  # of (query, (targets...))

    def __len__(self):
        return len(self.comparisons)

    def pairs(self):
        """Every unordered pair the plan resolves, with multiplicity."""
        return [tuple(sorted((q, t))) for q, bag in self.comparisons for t in bag]

    def to_text(self) -> str:
        """One line per comparison: ``query<TAB>t1,t2,...``."""
        return "".join(f"{q}\t{','.join(map(str, bag))}\n" for q, bag in self.comparisons)

    def summary(self) -> str:
        return (f"pairwise={pairwise_count(self.n)} bound={bagged_lower_bound(self.n, self.k)} "
                f"plan={len(self)}")


def build_plan(n: int, k: int) -> ComparisonPlan:
    if n < 2:
        raise ParameterError("need at least two detections to plan comparisons")
    if k < 1:
        raise ParameterError("bag size k must be at least 1")
    comparisons = []
    for i in range(n - 1):
        later = list(range(i + 1, n))
        for s in range(0, len(later), k):
            comparisons.append((i, tuple(later[s:s + k])))
    return ComparisonPlan(n, k, tuple(comparisons))


def parse_plan(text: str, n: int, k: int) -> ComparisonPlan:
    """Inverse of :meth:`ComparisonPlan.to_text`; checks indices and bag sizes."""
    comparisons = []
    for lineno, line in enumerate(text.splitlines(), 1):
        try:
            q_s, bag_s = line.split("\t")
            q = int(q_s)
            bag = tuple(int(t) for t in bag_s.split(","))
        except ValueError as exc:
            raise FormatError(f"plan line {lineno}: cannot parse {line!r}") from exc
        if not 0 <= q < n or any(not 0 <= t < n for t in bag) or q in bag or not 1 <= len(bag) <= k:
            raise FormatError(f"plan line {lineno}: invalid comparison {line!r}")
        comparisons.append((q, bag))
    return ComparisonPlan(n, k, tuple(comparisons))
