"""Exact Shapley values for KNN games, computed in closed form.

For unweighted games the values of all N points follow from a single pass
over the distance-sorted points: the value difference between two adjacent
points depends only on their labels and their rank, so one base case at the
farthest point plus N-1 recursion steps gives every value.  Weighted games
need an enumeration over small neighbor sets instead (O(N^K)), which is only
viable at desk scale and is guarded by a work budget.

Composite variants value the same data players inside the game that also
contains the analyst; the analyst's own value is the utility of the full
coalition minus the data players' total.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .core import (
    BudgetExceededError,
    Dataset,
    GameSpec,
    UnsupportedGameError,
    game_utility,
    rank_by_distance,
)

__all__ = [
    "TruncationConfig",
    "shapley_composite",
    "shapley_truncated",
    "shapley_unweighted_classification",
    "shapley_unweighted_regression",
    "shapley_weighted",
    "weighted_enumeration_size",
]


@dataclass(frozen=True)
class TruncationConfig:
    """Error budget for the truncated recursion.

    Only the ``kstar(K) = max(K, ceil(1/epsilon))`` nearest points can have a
    value above epsilon, so everything farther is assigned zero.
    """

    epsilon: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    def kstar(self, k: int) -> int:
        return max(k, math.ceil(1.0 / self.epsilon))


def _match_indicators(dataset: Dataset, query, query_label):
    ranked = rank_by_distance(dataset, query)
    ind = (dataset.labels[ranked.order] == query_label).astype(np.float64)
    return ranked, ind


def shapley_unweighted_classification(dataset: Dataset, query, query_label, k: int) -> np.ndarray:
    """Exact per-point values for the unweighted KNN classification game.

    Single query; O(N log N).  The farthest point anchors the recursion and
    each step toward the query adds
    ``(match_i - match_{i+1}) / K * min(K, i) / i`` at 1-based rank i.
    """
    n = dataset.n
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= N, got k={k}, N={n}")
    ranked, ind = _match_indicators(dataset, query, query_label)
    by_rank = np.zeros(n)
    by_rank[n - 1] = ind[n - 1] / n
    for i in range(n - 1, 0, -1):  # 1-based rank of the nearer point
        step = (ind[i - 1] - ind[i]) / k * min(k, i) / i
        by_rank[i - 1] = by_rank[i] + step
    values = np.empty(n)
    values[ranked.order] = by_rank
    return values


def shapley_unweighted_regression(dataset: Dataset, query, query_label, k: int) -> np.ndarray:
    """Exact per-point values for the unweighted KNN regression game.

    Utility is the negative squared error of the K-neighbor mean label, with
    the empty coalition pinned to utility 0.  Single query; O(N log N) after
    sorting thanks to prefix/suffix label sums.
    """
    n = dataset.n
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= N, got k={k}, N={n}")
    ranked = rank_by_distance(dataset, query)
    y = dataset.labels[ranked.order].astype(np.float64)
    y_test = float(query_label)

    by_rank = np.zeros(n)
    base = -(1.0 / n) * (y[n - 1] / k - y_test) ** 2
    if k > 1:
        inner = y[n - 1] / k - 2.0 * y_test
        if n > 1:
            inner += y[: n - 1].sum() / (n - 1)
        base += -((k - 1) / (n * k)) * y[n - 1] * inner
    by_rank[n - 1] = base

    # prefix[i] = sum of the i nearest labels; tail coefficients for l >= i+2
    # are min(K,l-1)*min(K-1,l-2)/((l-1)(l-2)) * i/min(K,i), accumulated from
    # the far end as a suffix sum of the i-independent part.
    prefix = np.concatenate(([0.0], np.cumsum(y)))
    tail_coeff = np.zeros(n + 2)
    for l in range(3, n + 1):  # 1-based rank; l=1,2 never appear as tails
        tail_coeff[l] = min(k, l - 1) * min(k - 1, l - 2) / ((l - 1) * (l - 2))
    tail_suffix = np.zeros(n + 3)
    for l in range(n, 2, -1):
        tail_suffix[l] = tail_suffix[l + 1] + tail_coeff[l] * y[l - 1]

    for i in range(n - 1, 0, -1):  # 1-based rank of the nearer point
        weighted_sum = y[i - 1] + y[i]
        if i > 1:
            weighted_sum += min(k - 1, i - 1) / (i - 1) * prefix[i - 1]
        if i + 2 <= n:
            weighted_sum += (i / min(k, i)) * tail_suffix[i + 2]
        step = (
            (y[i] - y[i - 1]) / k
            * (min(k, i) / i)
            * (weighted_sum / k - 2.0 * y_test)
        )
        by_rank[i - 1] = by_rank[i] + step
    values = np.empty(n)
    values[ranked.order] = by_rank
    return values


def shapley_truncated(
    dataset: Dataset, query, query_label, k: int, config: TruncationConfig
) -> np.ndarray:
    """Classification values with everything beyond rank K* forced to zero.

    The result differs from the exact values by at most ``config.epsilon``
    per point, and value differences between points ranked before K* are
    preserved exactly.
    """
    n = dataset.n
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= N, got k={k}, N={n}")
    kstar = config.kstar(k)
    ranked, ind = _match_indicators(dataset, query, query_label)
    by_rank = np.zeros(n)
    if kstar >= n:
        by_rank[n - 1] = ind[n - 1] / n
        start = n - 1
    else:
        start = kstar - 1  # ranks kstar..n stay zero and anchor the recursion
    for i in range(start, 0, -1):
        step = (ind[i - 1] - ind[i]) / k * min(k, i) / i
        by_rank[i - 1] = by_rank[i] + step
    values = np.empty(n)
    values[ranked.order] = by_rank
    return values


def weighted_enumeration_size(n: int, k: int) -> int:
    """Neighbor-set count driving the weighted exact algorithm's cost."""
    return sum(math.comb(max(n - 2, 0), j) for j in range(k))


def _check_budget(n: int, k: int, budget: int, override: bool) -> None:
    size = weighted_enumeration_size(n, k)
    if size > budget and not override:
        raise BudgetExceededError(
            f"weighted exact valuation needs about {size} neighbor-set evaluations "
            f"(budget {budget}); pass override to force it",
            estimated_work=size,
        )


def _weighted_by_rank(game, n: int, k: int, composite: bool) -> np.ndarray:
    """Shared enumeration core for weighted games, in rank space.

    Works for classification and regression, data-only and composite; only
    the combinatorial weights differ between the two game forms.
    """
    nu = game.value_of_ranks
    by_rank = np.zeros(n)

    # Base case: the farthest point only matters in coalitions smaller than K.
    others = range(n - 1)
    acc = 0.0
    for size in range(0, k):
        if size > n - 1:
            break
        inner = 0.0
        for s in combinations(others, size):
            inner += nu(s + (n - 1,)) - nu(s)
        if composite:
            acc += inner / math.comb(n, size + 1)
        else:
            acc += inner / math.comb(n - 1, size)
    by_rank[n - 1] = acc / (n + 1 if composite else n)

    # Steps: enumerate neighbor sets small enough to be affected by swapping
    # the two adjacent points, then weight by how many full coalitions
    # collapse onto each neighbor set.
    for i in range(n - 1, 0, -1):  # 1-based rank of the nearer point
        near, far = i - 1, i  # 0-based ranks
        rest = [r for r in range(n) if r != near and r != far]
        total = 0.0
        for size in range(0, k - 1):
            if size > len(rest):
                break
            inner = 0.0
            for s in combinations(rest, size):
                inner += nu(s + (near,)) - nu(s + (far,))
            if composite:
                total += inner / math.comb(n - 1, size + 1)
            else:
                total += inner / math.comb(n - 2, size)
        if k - 1 <= len(rest):
            for s in combinations(rest, k - 1):
                max_rank = max(s + (near, far)) + 1  # 1-based
                mult = 0.0
                for size in range(k - 1, n - 1):
                    extra = size - k + 1
                    if extra > n - max_rank:
                        break
                    if composite:
                        mult += math.comb(n - max_rank, extra) / math.comb(n - 1, size + 1)
                    else:
                        mult += math.comb(n - max_rank, extra) / math.comb(n - 2, size)
                total += mult * (nu(s + (near,)) - nu(s + (far,)))
        by_rank[near] = by_rank[far] + total / (n if composite else n - 1)
    return by_rank


def shapley_weighted(
    dataset: Dataset,
    query,
    query_label,
    spec: GameSpec,
    budget: int = 10_000_000,
    override: bool = False,
) -> np.ndarray:
    """Exact values for weighted KNN games by neighbor-set enumeration.

    Cost grows like N^K, so the call refuses beyond ``budget`` enumerated
    neighbor sets unless ``override`` is set.
    """
    spec.validate_against(dataset)
    n, k = dataset.n, spec.k
    _check_budget(n, k, budget, override)
    game = game_utility(dataset, query, query_label, spec)
    by_rank = _weighted_by_rank(game, n, k, composite=False)
    values = np.empty(n)
    values[game.ranked.order] = by_rank
    return values


def shapley_composite(
    dataset: Dataset,
    query,
    query_label,
    spec: GameSpec,
    budget: int = 10_000_000,
    override: bool = False,
) -> tuple[np.ndarray, float]:
    """Per-point values plus the analyst's value in the composite game.

    Supports all four utility variants.  The analyst's value is pinned by
    efficiency: full-coalition utility minus the data players' total.
    """
    if not spec.composite:
        raise UnsupportedGameError("spec.composite must be true for composite valuation")
    spec.validate_against(dataset)
    n, k = dataset.n, spec.k
    game = game_utility(dataset, query, query_label, spec)

    if spec.weighting == "weighted":
        _check_budget(n, k, budget, override)
        by_rank = _weighted_by_rank(game, n, k, composite=True)
    elif spec.task == "classification":
        ind = game.match_by_rank
        by_rank = np.zeros(n)
        by_rank[n - 1] = (k + 1) / (2.0 * (n + 1) * n) * ind[n - 1]
        for i in range(n - 1, 0, -1):
            mk = min(i, k)
            step = (ind[i - 1] - ind[i]) / k * (mk * (mk + 1)) / (2.0 * i * (i + 1))
            by_rank[i - 1] = by_rank[i] + step
    else:
        by_rank = _composite_regression_by_rank(game.y_by_rank, game.y_test, n, k)

    values = np.empty(n)
    values[game.ranked.order] = by_rank
    analyst = game.value_of_ranks(range(n)) - float(values.sum())
    return values, analyst


def _composite_regression_by_rank(y: np.ndarray, y_test: float, n: int, k: int) -> np.ndarray:
    by_rank = np.zeros(n)
    inner = (k + 2) * (k - 1) / (2.0 * n) * (y[n - 1] / k - 2.0 * y_test)
    if n > 1:
        inner += 2.0 * (k - 1) * (k + 1) / (3.0 * n * (n - 1)) * y[: n - 1].sum()
    by_rank[n - 1] = (
        -y[n - 1] * inner / (k * (n + 1))
        - (y[n - 1] / k - y_test) ** 2 / (n * (n + 1))
    )
    prefix = np.concatenate(([0.0], np.cumsum(y)))
    tail = np.zeros(n + 3)
    for l in range(n, 2, -1):  # 1-based rank of far contributors
        coeff = 2.0 * min(k + 1, l) * min(k, l - 1) * min(k - 1, l - 2) / (
            3.0 * l * (l - 1) * (l - 2)
        )
        tail[l] = tail[l + 1] + coeff * y[l - 1]
    for i in range(n - 1, 0, -1):
        bracket = ((y[i] + y[i - 1]) / k - 2.0 * y_test) * (
            min(k + 1, i + 1) * min(k, i) / (2.0 * i * (i + 1))
        )
        if i > 1:
            bracket += (
                prefix[i - 1]
                / k
                * (
                    2.0
                    * min(k + 1, i + 1)
                    * min(k, i)
                    * min(k - 1, i - 1)
                    / (3.0 * (i - 1) * i * (i + 1))
                )
            )
        if i + 2 <= n:
            bracket += tail[i + 2] / k
        by_rank[i - 1] = by_rank[i] + (y[i] - y[i - 1]) / k * bracket
    return by_rank
