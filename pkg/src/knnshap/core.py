"""Domain types and KNN utility-function evaluation.

The players of every valuation game are training points (or sellers owning
groups of points, plus optionally an analyst).  The utility of a coalition is
the performance of a K-nearest-neighbor model fit on that coalition, measured
against one test point; multi-test utilities are plain averages of per-test
utilities.  Everything here is a pure function of immutable inputs, safe to
share across worker threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "ANALYST",
    "BudgetExceededError",
    "DataError",
    "Dataset",
    "GameSpec",
    "QuerySet",
    "RankedNeighbors",
    "UnsupportedGameError",
    "ValuationResult",
    "WEIGHT_RULES",
    "aggregate_over_queries",
    "composite_utility",
    "game_utility",
    "rank_by_distance",
    "utility",
]

# Token for the computation provider in composite games.  Data players are
# integers >= 0, so any negative sentinel is unambiguous.
ANALYST = -1


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class UnsupportedGameError(ValueError):
    """The requested method does not support this game variant."""


class BudgetExceededError(RuntimeError):
    """An enumeration-based method refused to run past its work budget."""

    def __init__(self, message: str, estimated_work: int):
        super().__init__(message)
        self.estimated_work = estimated_work


def _as_matrix(features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    if x.ndim != 2 or x.shape[0] < 1:
        raise DataError(f"features must be a nonempty 2-D matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DataError("features contain non-finite values")
    return x


def _as_labels(labels, n: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != n:
        raise DataError(f"labels must be a length-{n} vector, got shape {y.shape}")
    if np.issubdtype(y.dtype, np.integer):
        return y.astype(np.int64)
    y = y.astype(np.float64)
    if not np.all(np.isfinite(y)):
        raise DataError("labels contain non-finite values")
    return y


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable training set: an N x d feature matrix plus one label per row.

    Labels are integer class ids for classification games and reals for
    regression games; both are stored as numpy arrays and never mutated.
    """

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = _as_matrix(self.features)
        y = _as_labels(self.labels, x.shape[0])
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        self.features.setflags(write=False)
        self.labels.setflags(write=False)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True, eq=False)
class QuerySet:
    """Immutable test set with the same layout as :class:`Dataset`."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = _as_matrix(self.features)
        y = _as_labels(self.labels, x.shape[0])
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        self.features.setflags(write=False)
        self.labels.setflags(write=False)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def _inverse_distance_weights(dists: np.ndarray, k: int) -> np.ndarray:
    """Weights proportional to 1/distance, normalized over the selected
    neighbors.  Zero-distance neighbors share weight 1 equally and all other
    neighbors get 0."""
    d = np.asarray(dists, dtype=np.float64)
    if d.size == 0:
        return d
    zero = d == 0.0
    if zero.any():
        w = np.zeros_like(d)
        w[zero] = 1.0 / zero.sum()
        return w
    inv = 1.0 / d
    return inv / inv.sum()


def _uniform_weights(dists: np.ndarray, k: int) -> np.ndarray:
    # Constant 1/K regardless of how many neighbors were selected, so the
    # weighted classification utility degenerates to the unweighted one.
    return np.full(len(dists), 1.0 / k)


#: Plug-in weight rules for weighted KNN games.  A rule receives the distances
#: of the selected (<= K) nearest neighbors and the configured K, and returns
#: one weight per selected neighbor.
WEIGHT_RULES: dict[str, Callable[[np.ndarray, int], np.ndarray]] = {
    "inverse_distance": _inverse_distance_weights,
    "uniform": _uniform_weights,
}


@dataclass(frozen=True, eq=False)
class GameSpec:
    """Which valuation game to play.

    task:       "classification" or "regression"
    k:          neighbor count K, 1 <= K <= N
    weighting:  "unweighted" or "weighted"
    weight_rule: name in WEIGHT_RULES or a callable (distances, K) -> weights
    composite:  if True the analyst joins the game and coalitions without the
                analyst are worthless
    seller_map: optional length-N array of seller ids in 1..M; players become
                the M sellers instead of the N points
    """

    task: str = "classification"
    k: int = 1
    weighting: str = "unweighted"
    weight_rule: "str | Callable[[np.ndarray, int], np.ndarray]" = "inverse_distance"
    composite: bool = False
    seller_map: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.task not in ("classification", "regression"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.weighting not in ("unweighted", "weighted"):
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.seller_map is not None:
            sm = np.asarray(self.seller_map, dtype=np.int64)
            m = int(sm.max()) if sm.size else 0
            if sm.size and (sm.min() < 1 or set(np.unique(sm)) != set(range(1, m + 1))):
                raise DataError("seller ids must cover 1..M with every id present")
            object.__setattr__(self, "seller_map", sm)

    @property
    def n_sellers(self) -> int:
        if self.seller_map is None:
            raise ValueError("spec has no seller map")
        return int(self.seller_map.max())

    def weight_fn(self) -> Callable[[np.ndarray, int], np.ndarray]:
        if callable(self.weight_rule):
            return self.weight_rule
        try:
            return WEIGHT_RULES[self.weight_rule]
        except KeyError:
            raise ValueError(f"unknown weight rule {self.weight_rule!r}") from None

    def validate_against(self, dataset: Dataset) -> None:
        if self.k > dataset.n:
            raise ValueError(f"k={self.k} exceeds dataset size N={dataset.n}")
        if self.seller_map is not None and len(self.seller_map) != dataset.n:
            raise DataError("seller map length does not match dataset size")


@dataclass(frozen=True, eq=False)
class RankedNeighbors:
    """Training points sorted by distance to one query.

    ``order[i]`` is the index of the (i+1)-th nearest point and
    ``distances[i]`` its distance; distances are nondecreasing and ties are
    broken by ascending original index, so the ranking is deterministic.
    """

    order: np.ndarray
    distances: np.ndarray

    @property
    def n(self) -> int:
        return len(self.order)


@dataclass(frozen=True, eq=False)
class ValuationResult:
    """Per-player values plus bookkeeping about how they were obtained."""

    values: np.ndarray
    method: str
    analyst_value: Optional[float] = None
    guarantee: Optional[tuple[float, float]] = None  # (epsilon, delta)
    diagnostics: dict = field(default_factory=dict)


def rank_by_distance(dataset: Dataset, query) -> RankedNeighbors:
    """Sort all training points by Euclidean distance to ``query``.

    Ties are broken by ascending point index (stable sort), which pins down
    every downstream value exactly.
    """
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != dataset.dim:
        raise DataError(
            f"query dimension {q.shape[0]} does not match dataset dimension {dataset.dim}"
        )
    diff = dataset.features - q
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    order = np.argsort(dist, kind="stable")
    return RankedNeighbors(order=order, distances=dist[order])


class _QueryGame:
    """Utility evaluator for one query with the global ranking precomputed.

    Subsets are scored in O(|S| log |S|) by mapping members to their global
    rank: the K nearest members of S are the K smallest ranks in S.
    """

    def __init__(self, dataset: Dataset, query, query_label, spec: GameSpec):
        spec.validate_against(dataset)
        self.spec = spec
        self.ranked = rank_by_distance(dataset, query)
        # Position of each point in the distance ranking (0 = nearest).
        self.rank_of = np.empty(dataset.n, dtype=np.int64)
        self.rank_of[self.ranked.order] = np.arange(dataset.n)
        self.dist_by_rank = self.ranked.distances
        labels_by_rank = dataset.labels[self.ranked.order]
        if spec.task == "classification":
            self.match_by_rank = (labels_by_rank == query_label).astype(np.float64)
            self.y_by_rank = None
        else:
            self.match_by_rank = None
            self.y_by_rank = labels_by_rank.astype(np.float64)
        self.y_test = float(query_label) if spec.task == "regression" else query_label
        self._weights = spec.weight_fn() if spec.weighting == "weighted" else None

    def value_of_ranks(self, ranks: Sequence[int]) -> float:
        """Utility of the coalition whose members have the given global ranks."""
        k = self.spec.k
        if len(ranks) == 0:
            return 0.0
        sel = sorted(ranks)[: min(k, len(ranks))]
        if self._weights is None:
            if self.spec.task == "classification":
                return sum(self.match_by_rank[r] for r in sel) / k
            pred = sum(self.y_by_rank[r] for r in sel) / k
            return -((pred - self.y_test) ** 2)
        w = self._weights(self.dist_by_rank[np.asarray(sel, dtype=np.int64)], k)
        if self.spec.task == "classification":
            return float(sum(wk * self.match_by_rank[r] for wk, r in zip(w, sel)))
        pred = float(sum(wk * self.y_by_rank[r] for wk, r in zip(w, sel)))
        return -((pred - self.y_test) ** 2)

    def value(self, subset: Iterable[int]) -> float:
        """Utility of a coalition given as original point indices."""
        return self.value_of_ranks([self.rank_of[i] for i in subset])


def game_utility(dataset: Dataset, query, query_label, spec: GameSpec) -> _QueryGame:
    """Build a reusable utility evaluator for one (query, game) pair."""
    return _QueryGame(dataset, query, query_label, spec)


def utility(dataset: Dataset, subset, query, query_label, spec: GameSpec) -> float:
    """Utility of the KNN model fit on ``subset`` and judged on one query.

    The empty coalition has utility 0 for every variant, so values always sum
    to the full-coalition utility.
    """
    subset = list(subset)
    if any(i < 0 or i >= dataset.n for i in subset):
        raise DataError("subset contains out-of-range point indices")
    if len(set(subset)) != len(subset):
        raise DataError("subset contains duplicate indices")
    return _QueryGame(dataset, query, query_label, spec).value(subset)


def composite_utility(dataset: Dataset, players, query, query_label, spec: GameSpec) -> float:
    """Utility of a coalition of sellers plus (optionally) the analyst.

    The coalition is worthless unless it contains the analyst token
    :data:`ANALYST` and at least one seller; otherwise it is the plain KNN
    utility of all data owned by the member sellers.
    """
    players = set(players)
    has_analyst = ANALYST in players
    sellers = players - {ANALYST}
    if not has_analyst or not sellers:
        return 0.0
    if spec.seller_map is None:
        points = sellers
    else:
        wanted = np.isin(spec.seller_map, list(sellers))
        points = np.nonzero(wanted)[0]
    return _QueryGame(dataset, query, query_label, spec).value(points)


def aggregate_over_queries(per_query_values: np.ndarray) -> np.ndarray:
    """Average per-query value vectors into one vector (column-wise mean)."""
    m = np.asarray(per_query_values, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.shape[0] == 0:
        raise DataError("need at least one per-query value row")
    return m.mean(axis=0)
