"""Brute-force Shapley ground truth for small games.

Two independent routes: a binomial-weighted sum over all 2^N coalitions and
an average over all N! join orders.  Both accept an arbitrary coalition
utility callback, so the same oracle checks point games, seller games, and
composite games.  Test-only code: correctness over speed.
"""

from __future__ import annotations

import math
from itertools import permutations
from typing import Callable, Sequence

import numpy as np

from .core import BudgetExceededError

__all__ = [
    "check_difference_lemma",
    "shapley_bruteforce_permutations",
    "shapley_bruteforce_subsets",
]

UtilityFn = Callable[[tuple[int, ...]], float]

_SUBSET_CAP = 20
_PERMUTATION_CAP = 8
_LEMMA_CAP = 12


def _members(mask: int, n: int) -> tuple[int, ...]:
    return tuple(i for i in range(n) if mask >> i & 1)


def _utilities_by_mask(n: int, utility_fn: UtilityFn) -> np.ndarray:
    nu = np.empty(1 << n)
    for mask in range(1 << n):
        nu[mask] = utility_fn(_members(mask, n))
    return nu


def shapley_bruteforce_subsets(n_players: int, utility_fn: UtilityFn) -> np.ndarray:
    """Exact values by enumerating every coalition.

    For each player the marginal contribution to each coalition S not
    containing it is weighted by 1 / (N * C(N-1, |S|)).
    """
    if n_players > _SUBSET_CAP:
        raise BudgetExceededError(
            f"refusing subset enumeration beyond {_SUBSET_CAP} players",
            estimated_work=1 << n_players,
        )
    if n_players < 1:
        raise ValueError("need at least one player")
    n = n_players
    nu = _utilities_by_mask(n, utility_fn)
    weights = [1.0 / (n * math.comb(n - 1, k)) for k in range(n)]
    values = np.zeros(n)
    full = (1 << n) - 1
    for mask in range(1 << n):
        if mask == full:
            continue  # no player left to add
        w = weights[mask.bit_count()]
        base = nu[mask]
        for i in range(n):
            if not mask >> i & 1:
                values[i] += w * (nu[mask | 1 << i] - base)
    return values


def shapley_bruteforce_permutations(n_players: int, utility_fn: UtilityFn) -> np.ndarray:
    """Exact values by averaging marginal contributions over all join orders."""
    if n_players > _PERMUTATION_CAP:
        raise BudgetExceededError(
            f"refusing permutation enumeration beyond {_PERMUTATION_CAP} players",
            estimated_work=math.factorial(n_players),
        )
    if n_players < 1:
        raise ValueError("need at least one player")
    n = n_players
    nu = _utilities_by_mask(n, utility_fn)
    values = np.zeros(n)
    for perm in permutations(range(n)):
        mask = 0
        prev = nu[0]
        for i in perm:
            mask |= 1 << i
            cur = nu[mask]
            values[i] += cur - prev
            prev = cur
    return values / math.factorial(n)


def check_difference_lemma(
    n_players: int, utility_fn: UtilityFn, i: int, j: int
) -> float:
    """Residual of the pairwise value-difference identity.

    The difference s_i - s_j must equal the average, over coalitions S
    avoiding both players, of [nu(S+i) - nu(S+j)] / C(N-2, |S|), scaled by
    1/(N-1).  Returns |lhs - rhs|, which should vanish to float precision.
    """
    if n_players > _LEMMA_CAP:
        raise BudgetExceededError(
            f"refusing difference check beyond {_LEMMA_CAP} players",
            estimated_work=1 << n_players,
        )
    if i == j:
        raise ValueError("players must differ")
    n = n_players
    values = shapley_bruteforce_subsets(n, utility_fn)
    nu = _utilities_by_mask(n, utility_fn)
    rhs = 0.0
    for mask in range(1 << n):
        if mask >> i & 1 or mask >> j & 1:
            continue
        size = mask.bit_count()
        rhs += (nu[mask | 1 << i] - nu[mask | 1 << j]) / math.comb(n - 2, size)
    rhs /= n - 1
    return abs((values[i] - values[j]) - rhs)
