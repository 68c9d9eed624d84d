"""Seller-level valuation when one curator owns several training points.

The coalition game is played over the M sellers: a coalition's utility is the
KNN utility of the union of its members' data.  Because a KNN utility only
sees the K nearest points, all seller coalitions collapse onto at most
O(M^K) distinct top-K sets; enumerating those sets with counting weights
yields exact seller values without touching all 2^M coalitions.
"""

from __future__ import annotations

import heapq
import math
from itertools import combinations, islice

import numpy as np

from .core import (
    BudgetExceededError,
    Dataset,
    GameSpec,
    game_utility,
)

__all__ = [
    "seller_enumeration_size",
    "shapley_per_seller",
    "shapley_per_seller_composite",
]


def seller_enumeration_size(m: int, k: int) -> int:
    """Seller-subset count enumerated by the exact algorithm."""
    return sum(math.comb(m, j) for j in range(min(k, m) + 1))


class _SellerGame:
    """Rank-space view of one query's seller game."""

    def __init__(self, dataset: Dataset, query, query_label, spec: GameSpec):
        if spec.seller_map is None:
            raise ValueError("spec.seller_map is required for seller valuation")
        spec.validate_against(dataset)
        self.game = game_utility(dataset, query, query_label, spec)
        self.k = spec.k
        self.m = spec.n_sellers
        sm = spec.seller_map
        self.ranks_of_seller = [
            sorted(int(self.game.rank_of[p]) for p in np.nonzero(sm == j + 1)[0])
            for j in range(self.m)
        ]
        self.nearest_rank = [r[0] for r in self.ranks_of_seller]

    def top_k_of_sellers(self, sellers) -> tuple[int, ...]:
        lists = [self.ranks_of_seller[j] for j in sellers]
        if not lists:
            return ()
        return tuple(islice(heapq.merge(*lists), self.k))

    def top_k_with_extra(self, base: tuple[int, ...], seller: int) -> tuple[int, ...]:
        # base is already the top-K of its owners, so only the new seller's
        # points can displace anything.
        return tuple(islice(heapq.merge(base, self.ranks_of_seller[seller]), self.k))

    def utility(self, ranks: tuple[int, ...]) -> float:
        return self.game.value_of_ranks(ranks)

    def owners(self, ranks: tuple[int, ...]) -> frozenset[int]:
        sm = self.game.spec.seller_map
        return frozenset(int(sm[self.game.ranked.order[r]]) - 1 for r in ranks)


def _distinct_top_k_sets(sg: _SellerGame) -> list[tuple[int, ...]]:
    seen: dict[tuple[int, ...], None] = {}
    for size in range(0, min(sg.k, sg.m) + 1):
        for subset in combinations(range(sg.m), size):
            seen.setdefault(sg.top_k_of_sellers(subset), None)
    return list(seen.keys())


def _seller_values(sg: _SellerGame, composite: bool) -> np.ndarray:
    """Shared enumeration core for the data-only and composite seller games."""
    m, k = sg.m, sg.k
    top_sets = _distinct_top_k_sets(sg)
    owners = {s: sg.owners(s) for s in top_sets}
    utilities = {s: sg.utility(s) for s in top_sets}

    values = np.zeros(m)
    for j in range(m):
        acc = 0.0
        for s in top_sets:
            h = owners[s]
            if j in h:
                continue
            if len(s) < k:
                # every other seller's data would grow this coalition's top-K
                g_count = 0
            else:
                worst = s[-1]
                g_count = sum(
                    1
                    for jp in range(m)
                    if jp != j and jp not in h and sg.nearest_rank[jp] > worst
                )
            coef = 0.0
            for extra in range(g_count + 1):
                if composite:
                    coef += math.comb(g_count, extra) / math.comb(m, len(h) + extra + 1)
                else:
                    coef += math.comb(g_count, extra) / math.comb(m - 1, len(h) + extra)
            with_j = sg.top_k_with_extra(s, j)
            acc += coef * (sg.utility(with_j) - utilities[s])
        values[j] = acc / (m + 1 if composite else m)
    return values


def _check_budget(m: int, k: int, budget: int, override: bool) -> None:
    size = seller_enumeration_size(m, k)
    if size > budget and not override:
        raise BudgetExceededError(
            f"seller valuation needs about {size} seller-subset evaluations "
            f"(budget {budget}); pass override to force it",
            estimated_work=size,
        )


def shapley_per_seller(
    dataset: Dataset,
    query,
    query_label,
    spec: GameSpec,
    budget: int = 1_000_000,
    override: bool = False,
) -> np.ndarray:
    """Exact per-seller values for one query.

    Supports all four utility variants via ``spec``.  With K = 1 this
    degenerates to the single-point game played on each seller's nearest
    point, and with one point per seller it equals the point-level values.
    """
    sg = _SellerGame(dataset, query, query_label, spec)
    _check_budget(sg.m, sg.k, budget, override)
    return _seller_values(sg, composite=False)


def shapley_per_seller_composite(
    dataset: Dataset,
    query,
    query_label,
    spec: GameSpec,
    budget: int = 1_000_000,
    override: bool = False,
) -> tuple[np.ndarray, float]:
    """Per-seller values plus the analyst's value in the composite game."""
    sg = _SellerGame(dataset, query, query_label, spec)
    _check_budget(sg.m, sg.k, budget, override)
    values = _seller_values(sg, composite=True)
    full = sg.utility(sg.top_k_of_sellers(range(sg.m)))
    return values, full - float(values.sum())
