"""Permutation-sampling Shapley estimators with concentration-bound sizing.

The estimator averages marginal contributions over random join orders.  How
many orders are enough comes from one of three rules: a Hoeffding bound
(baseline, grows with log N), a variance-sensitive Bennett bound (solved
numerically, nearly flat in N), or its closed-form approximation (independent
of N).  A heuristic mode instead stops once consecutive estimates stop
moving.

Each permutation is processed incrementally: a bounded max-heap tracks the K
nearest points of the growing prefix, so a prefix utility update costs
O(log K) instead of re-sorting the prefix.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, replace
from itertools import permutations as iter_permutations
from typing import Optional

import numpy as np

from .core import (
    ANALYST,
    Dataset,
    GameSpec,
    QuerySet,
    ValuationResult,
    game_utility,
)

__all__ = [
    "McConfig",
    "PermutationState",
    "bennett_approx_permutations",
    "bennett_permutations",
    "default_range",
    "estimate_shapley_mc",
    "hoeffding_permutations",
    "permutation_for_draw",
]

_HEURISTIC_FLOOR = 100


@dataclass(frozen=True)
class McConfig:
    """Accuracy target and sampling policy for the estimators.

    ``range_r`` is the width of the utility-difference range [-r, r]; leave
    it None to use :func:`default_range` for the game at hand.  The heuristic
    threshold defaults to epsilon / 50.
    """

    epsilon: float = 0.1
    delta: float = 0.1
    range_r: Optional[float] = None
    bound: str = "bennett"  # hoeffding | bennett | bennett_approx | heuristic
    max_permutations: int = 1_000_000
    heuristic_threshold: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must be in (0, 1)")
        if self.range_r is not None and not self.range_r > 0:
            raise ValueError("range_r must be positive")
        if self.bound not in ("hoeffding", "bennett", "bennett_approx", "heuristic"):
            raise ValueError(f"unknown bound kind {self.bound!r}")
        if self.max_permutations < 1:
            raise ValueError("max_permutations must be positive")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")

    def resolved_range(self) -> float:
        if self.range_r is None:
            raise ValueError("range_r unset; call default_range first")
        return self.range_r


def _bennett_h(u):
    return (1.0 + u) * np.log1p(u) - u


def default_range(dataset: Dataset, queries: QuerySet, spec: GameSpec) -> float:
    """Default utility-difference range r for a game.

    Unweighted classification enjoys the tight 1/K; other classification
    games use twice the utility range (utilities live in [0, 1]).  For
    regression the bound comes from the label extremes: predictions are
    convex-ish combinations of labels, so the worst squared error over the
    observed label range caps the utility spread.
    """
    if spec.task == "classification":
        if spec.weighting == "unweighted":
            return 1.0 / spec.k
        return 2.0
    y = dataset.labels.astype(np.float64)
    t = queries.labels.astype(np.float64)
    pred_lo = min(0.0, float(y.min()))
    pred_hi = max(0.0, float(y.max()))
    worst = max(pred_hi - float(t.min()), float(t.max()) - pred_lo, 0.0)
    return 2.0 * worst * worst


def hoeffding_permutations(n: int, config: McConfig) -> int:
    """Permutations guaranteeing (epsilon, delta) accuracy by Hoeffding.

    ``range_r`` is the half-range of the difference interval [-r, r], the
    same convention the Bennett solver uses, so Hoeffding's inequality gets
    the full interval width 2r.
    """
    r = config.resolved_range()
    width = 2.0 * r
    return math.ceil(
        width * width / (2.0 * config.epsilon**2) * math.log(2.0 * n / config.delta)
    )


def _bennett_lhs_coefficients(n: int, k: int, config: McConfig) -> np.ndarray:
    r = config.resolved_range()
    i = np.arange(1, n + 1, dtype=np.float64)
    q = np.where(i <= k, 0.0, (i - k) / i)
    scale = 1.0 - q * q
    return scale * _bennett_h(config.epsilon / (scale * r))


def bennett_permutations(n: int, k: int, config: McConfig) -> int:
    """Smallest T whose Bennett failure_budget sum drops to delta/2.

    The left-hand side sum(exp(-T * c_i)) is strictly decreasing in T, so an
    integer bisection between 1 and ten times the Hoeffding count finds the
    minimal root; the bracket always suffices because the Hoeffding count
    itself satisfies the weaker per-point bound.
    """
    coeff = _bennett_lhs_coefficients(n, k, config)
    target = config.delta / 2.0

    def lhs(t: float) -> float:
        return float(np.exp(-t * coeff).sum())

    lo, hi = 1, max(2, 10 * hoeffding_permutations(n, config))
    if lhs(lo) <= target:
        return lo
    if lhs(hi) > target:
        raise RuntimeError("bisection bracket exhausted solving the Bennett sample size")
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if lhs(mid) <= target:
            hi = mid
        else:
            lo = mid
    return hi


def bennett_approx_permutations(k: int, config: McConfig) -> int:
    """Closed-form approximation of the Bennett count; independent of N."""
    r = config.resolved_range()
    return math.ceil(math.log(2.0 * k / config.delta) / _bennett_h(config.epsilon / r))


def permutation_for_draw(n_players: int, seed: int, draw: int) -> np.ndarray:
    """Deterministic permutation for one draw index.

    Each draw gets its own generator seeded from (seed, draw), so draws can
    be processed in any order or split across workers and still reproduce the
    same stream.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, draw]))
    return rng.permutation(n_players)


class PermutationState:
    """Incremental prefix utility for one query while one permutation unfolds.

    Holds a bounded max-heap (by distance rank) of the K nearest points seen
    so far; inserting a point that does not enter the heap cannot change the
    utility.  Sellers insert all their points at once; the analyst is a flag
    that gates the utility in composite games.
    """

    def __init__(self, game, seller_ranks=None, composite: bool = False):
        self.game = game
        self.k = game.spec.k
        self.seller_ranks = seller_ranks
        self.composite = composite
        self._unweighted_class = (
            game.spec.task == "classification" and game.spec.weighting == "unweighted"
        )
        self._unweighted_reg = (
            game.spec.task == "regression" and game.spec.weighting == "unweighted"
        )
        self.reset()

    def reset(self):
        self._heap: list[int] = []  # negated ranks; top = farthest kept rank
        self._match_sum = 0.0
        self._label_sum = 0.0
        self._have_analyst = not self.composite
        self._have_data = False
        self._bare_utility = 0.0
        self.utility = 0.0

    def heap_ranks(self) -> list[int]:
        return sorted(-h for h in self._heap)

    def _insert_rank(self, rank: int) -> bool:
        if len(self._heap) < self.k:
            heapq.heappush(self._heap, -rank)
        elif rank < -self._heap[0]:
            displaced = -heapq.heappushpop(self._heap, -rank)
            self._on_displace(displaced)
        else:
            return False
        self._on_enter(rank)
        return True

    def _on_enter(self, rank: int):
        if self._unweighted_class:
            self._match_sum += self.game.match_by_rank[rank]
        elif self._unweighted_reg:
            self._label_sum += self.game.y_by_rank[rank]

    def _on_displace(self, rank: int):
        if self._unweighted_class:
            self._match_sum -= self.game.match_by_rank[rank]
        elif self._unweighted_reg:
            self._label_sum -= self.game.y_by_rank[rank]

    def _recompute(self):
        if self._unweighted_class:
            self._bare_utility = self._match_sum / self.k
        elif self._unweighted_reg:
            pred = self._label_sum / self.k
            self._bare_utility = -((pred - self.game.y_test) ** 2)
        else:
            self._bare_utility = self.game.value_of_ranks(self.heap_ranks())

    def insert(self, player: int) -> float:
        """Insert a player; returns the marginal utility change."""
        before = self.utility
        if player == ANALYST:
            self._have_analyst = True
        elif self.seller_ranks is not None:
            changed = False
            for rank in self.seller_ranks[player]:
                changed |= self._insert_rank(rank)
            self._have_data = True
            if changed:
                self._recompute()
        else:
            self._have_data = True
            if self._insert_rank(int(self.game.rank_of[player])):
                self._recompute()
        self.utility = (
            self._bare_utility if (self._have_analyst and self._have_data) else 0.0
        )
        return self.utility - before


def _fast_marginals_1nn(perm, rank_rows, match_rows) -> np.ndarray:
    """Vectorized per-permutation marginals for unweighted 1NN classification.

    The prefix utility is the match indicator of the nearest point so far,
    so a running minimum over ranks replaces the heap.  Returns the marginal
    vector already averaged over the query block and indexed by player.
    """
    r = rank_rows[:, perm]
    np.minimum.accumulate(r, axis=1, out=r)
    util = np.take_along_axis(match_rows, r, axis=1)
    phi = np.empty_like(util)
    phi[:, 0] = util[:, 0]
    np.subtract(util[:, 1:], util[:, :-1], out=phi[:, 1:])
    mean_phi = phi.mean(axis=0)
    out = np.empty(len(perm))
    out[perm] = mean_phi
    return out


def _player_count(dataset: Dataset, spec: GameSpec) -> int:
    base = spec.n_sellers if spec.seller_map is not None else dataset.n
    return base


def estimate_shapley_mc(
    dataset: Dataset,
    queries: QuerySet,
    spec: GameSpec,
    config: McConfig,
    exhaustive: bool = False,
) -> ValuationResult:
    """Estimate per-player values by sampled join orders.

    Every drawn permutation is applied to all queries and the per-query
    marginals averaged, which is exactly MC estimation of the multi-query
    averaged utility; the utility-difference range is unchanged by that
    averaging, so the configured bound applies as-is.  With ``exhaustive``
    the full factorial set of orders is enumerated (small player counts
    only) and the result is the exact value.
    """
    spec.validate_against(dataset)
    if config.range_r is None:
        config = replace(config, range_r=default_range(dataset, queries, spec))

    n_players = _player_count(dataset, spec)
    players = list(range(n_players))
    if spec.composite:
        players.append(ANALYST)

    games = [
        game_utility(dataset, queries.features[j], queries.labels[j], spec)
        for j in range(queries.n)
    ]
    seller_ranks = None
    if spec.seller_map is not None:
        seller_ranks = [
            [
                [int(g.rank_of[p]) for p in np.nonzero(spec.seller_map == j + 1)[0]]
                for j in range(n_players)
            ]
            for g in games
        ]

    fast = (
        not spec.composite
        and spec.seller_map is None
        and spec.task == "classification"
        and spec.weighting == "unweighted"
        and spec.k == 1
    )
    if fast:
        rank_rows = np.stack([g.rank_of for g in games])
        match_rows = np.stack([g.match_by_rank for g in games])

    states = None
    if not fast:
        states = [
            PermutationState(
                g,
                seller_ranks=seller_ranks[j] if seller_ranks is not None else None,
                composite=spec.composite,
            )
            for j, g in enumerate(games)
        ]

    def marginals(perm) -> np.ndarray:
        if fast:
            return _fast_marginals_1nn(np.asarray(perm), rank_rows, match_rows)
        acc = np.zeros(len(players))
        for st in states:
            st.reset()
            for pos, player in enumerate(perm):
                acc[pos] += st.insert(players[player])
        out = np.empty(len(players))
        out[np.asarray(perm)] = acc / len(states)
        return out

    heuristic = config.bound == "heuristic" and not exhaustive
    guarantee: Optional[tuple[float, float]] = None
    incomplete = False
    if exhaustive:
        if len(players) > 8:
            raise ValueError("exhaustive enumeration supported for at most 8 players")
        draws = [np.asarray(p) for p in iter_permutations(range(len(players)))]
        target = len(draws)
    elif heuristic:
        target = config.max_permutations
        draws = None
    else:
        if config.bound == "hoeffding":
            target = hoeffding_permutations(n_players, config)
        elif config.bound == "bennett":
            target = bennett_permutations(n_players, spec.k, config)
        else:
            target = bennett_approx_permutations(spec.k, config)
        if target > config.max_permutations:
            target = config.max_permutations
            incomplete = True
        else:
            guarantee = (config.epsilon, config.delta)
        draws = None

    threshold = (
        config.heuristic_threshold
        if config.heuristic_threshold is not None
        else config.epsilon / 50.0
    )
    acc = np.zeros(len(players))
    prev_mean = None
    used = 0
    for t in range(target):
        perm = draws[t] if draws is not None else permutation_for_draw(
            len(players), config.seed, t
        )
        acc += marginals(perm)
        used = t + 1
        if heuristic and used >= _HEURISTIC_FLOOR:
            mean = acc / used
            if prev_mean is not None and np.max(np.abs(mean - prev_mean)) < threshold:
                break
            prev_mean = mean
        elif heuristic:
            prev_mean = acc / used
    else:
        if heuristic and not exhaustive:
            incomplete = True

    estimates = acc / used
    analyst_value = None
    values = estimates
    if spec.composite:
        values = estimates[:-1]
        analyst_value = float(estimates[-1])
    diagnostics = {
        "permutations": used,
        "bound": "exhaustive" if exhaustive else config.bound,
        "range": config.range_r,
        "players": len(players),
    }
    if incomplete:
        diagnostics["incomplete"] = True
    return ValuationResult(
        values=values,
        method="montecarlo",
        analyst_value=analyst_value,
        guarantee=None if exhaustive else guarantee,
        diagnostics=diagnostics,
    )
