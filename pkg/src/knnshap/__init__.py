"""Shapley valuation of training data under K-nearest-neighbor utilities.

Exact closed-form valuation for unweighted KNN games, O(N^K) exact valuation
for weighted and seller-level games, hashed sublinear approximation for
classification, permutation-sampling estimators with concentration-bound
sizing, and a brute-force oracle for verification.
"""

from .core import (
    ANALYST,
    BudgetExceededError,
    DataError,
    Dataset,
    GameSpec,
    QuerySet,
    RankedNeighbors,
    UnsupportedGameError,
    ValuationResult,
    aggregate_over_queries,
    composite_utility,
    game_utility,
    rank_by_distance,
    utility,
)
from .exact import (
    TruncationConfig,
    shapley_composite,
    shapley_truncated,
    shapley_unweighted_classification,
    shapley_unweighted_regression,
    shapley_weighted,
)
from .lsh import (
    ContrastEstimate,
    LshIndex,
    LshParams,
    build_index,
    collision_probability,
    estimate_contrast,
    load_index,
    retrieve_approx_knn,
    save_index,
    select_params,
    shapley_lsh,
)
from .montecarlo import (
    McConfig,
    PermutationState,
    bennett_approx_permutations,
    bennett_permutations,
    estimate_shapley_mc,
    hoeffding_permutations,
)
from .oracle import (
    check_difference_lemma,
    shapley_bruteforce_permutations,
    shapley_bruteforce_subsets,
)
from .sellers import shapley_per_seller, shapley_per_seller_composite

__version__ = "0.1.0"
