"""p-stable LSH retrieval and the sublinear approximate valuation path.

Classification values can be truncated to the K* = max(K, ceil(1/epsilon))
nearest neighbors of each query at epsilon cost, so it suffices to retrieve
those neighbors approximately instead of sorting the whole training set.
Hashing uses the Gaussian 2-stable scheme floor((w.x + b) / width): collision
probability is a closed-form, monotone-decreasing function of distance, and
the dataset's relative contrast (mean distance over K*-th neighbor distance)
decides how many hash tables a target recall needs.

Buckets are stored as sorted 64-bit digests of the m-integer codes with a
parallel point-id array, so lookups are binary searches and the index stays
compact.  Digest collisions only ever add candidates, which the exact
re-ranking step then orders by true distance.
"""

from __future__ import annotations

import io
import math
import struct
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import (
    Dataset,
    DataError,
    GameSpec,
    QuerySet,
    UnsupportedGameError,
    ValuationResult,
    rank_by_distance,
)

__all__ = [
    "ContrastEstimate",
    "LshIndex",
    "LshParams",
    "RetrievedNeighbors",
    "build_index",
    "collision_probability",
    "estimate_contrast",
    "load_index",
    "retrieve_approx_knn",
    "save_index",
    "select_params",
    "shapley_lsh",
]

_MAGIC = b"KNNSHAP-LSHIDX01"
_FORMAT_VERSION = 1

DEFAULT_WIDTH_GRID = (0.25, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0)
DEFAULT_ALPHA_GRID = (0.5, 1.0, 1.5, 2.0)

_SQRT_2PI = math.sqrt(2.0 * math.pi)


def collision_probability(c: float, width: float) -> float:
    """Chance that two points at distance ``c`` share one hash value.

    Closed form for the Gaussian 2-stable projection with bucket width
    ``width``; strictly decreasing in ``c`` and equal to 1 at distance 0.
    """
    if not width > 0:
        raise ValueError("width must be positive")
    if c < 0:
        raise ValueError("distance must be nonnegative")
    if c == 0.0:
        return 1.0
    t = width / c
    tail = math.erfc(t / math.sqrt(2.0))  # = 2 * Phi(-t)
    return 1.0 - tail - (2.0 / (_SQRT_2PI * t)) * (1.0 - math.exp(-t * t / 2.0))


@dataclass(frozen=True)
class ContrastEstimate:
    """Sampled distance statistics that govern retrieval difficulty.

    ``contrast`` is the mean point-to-query distance over the mean distance
    to the k-th nearest neighbor, and ``g_exponent`` the resulting table-count
    exponent log f(1/contrast) / log f(1) at the width used for the estimate.
    """

    d_mean: float
    d_k: float
    contrast: float
    g_exponent: float
    width: float = 1.0

    def g(self, width: float) -> float:
        """Table-count exponent at another (normalized) projection width."""
        return g_exponent_for_contrast(self.contrast, width)


def g_exponent_for_contrast(contrast: float, width: float) -> float:
    """log f(1/contrast) / log f(1) on the distance scale where d_mean = 1."""
    if not contrast > 0:
        raise ValueError("contrast must be positive")
    p_rand = collision_probability(1.0, width)
    p_near = collision_probability(1.0 / contrast, width)
    return math.log(p_near) / math.log(p_rand)


def estimate_contrast(
    dataset: Dataset,
    queries: QuerySet,
    k: int,
    sample_size: int,
    width: float = 1.0,
    seed: int = 0,
) -> ContrastEstimate:
    """Estimate relative contrast from sampled point-query pairs.

    ``d_mean`` averages distances of ``sample_size`` random (point, query)
    pairs; ``d_k`` averages the exact k-th-neighbor distance over sampled
    queries.  Deterministic for a fixed seed.
    """
    if sample_size < 1:
        raise ValueError("sample_size must be >= 1")
    if not 1 <= k <= dataset.n:
        raise ValueError(f"need 1 <= k <= N, got k={k}, N={dataset.n}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0]))
    pts = rng.integers(0, dataset.n, size=sample_size)
    qs = rng.integers(0, queries.n, size=sample_size)
    diff = dataset.features[pts] - queries.features[qs]
    d_mean = float(np.sqrt(np.einsum("ij,ij->i", diff, diff)).mean())

    n_q = min(queries.n, sample_size)
    chosen = rng.choice(queries.n, size=n_q, replace=False)
    dk_vals = np.empty(n_q)
    for out, j in enumerate(chosen):
        ranked = rank_by_distance(dataset, queries.features[j])
        dk_vals[out] = ranked.distances[k - 1]
    d_k = float(dk_vals.mean())

    if d_k == 0.0:
        contrast = 1.0 if d_mean == 0.0 else math.inf
    else:
        contrast = d_mean / d_k
    if contrast == 0.0:
        contrast = 1.0  # all sampled distances zero: indistinguishable points
    g = g_exponent_for_contrast(contrast, width) if math.isfinite(contrast) else 0.0
    return ContrastEstimate(d_mean=d_mean, d_k=d_k, contrast=contrast, g_exponent=g, width=width)


@dataclass(frozen=True)
class LshParams:
    """Hash-family shape: bits per table, table count, raw projection width."""

    m: int
    l: int
    width: float
    seed: int = 0

    def __post_init__(self):
        if self.m < 1 or self.l < 1:
            raise ValueError("m and l must be >= 1")
        if not self.width > 0:
            raise ValueError("width must be positive")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")


def select_params(
    dataset: Dataset,
    queries: QuerySet,
    k: int,
    epsilon: float,
    delta: float,
    width_grid=DEFAULT_WIDTH_GRID,
    alpha_grid=DEFAULT_ALPHA_GRID,
    n_queries: int = 1,
    sample_size: int = 512,
    seed: int = 0,
) -> tuple[LshParams, ContrastEstimate, dict]:
    """Pick (m, l, width) for a target (epsilon, delta) valuation accuracy.

    K* = max(K, ceil(1/epsilon)) neighbors must be retrieved per query.  The
    width grid is searched (on the d_mean-normalized scale) for the smallest
    table-count exponent g; the bits-per-table count comes from
    alpha * ln N / ln(1/p_rand) and the table count from
    N^g * ln(K* / delta'), with delta' = delta / n_queries splitting the
    failure budget across queries.  alpha = 1 makes those two formulas
    consistent, so it is preferred whenever the grid contains it.
    """
    if not width_grid:
        raise ValueError("width grid must be nonempty")
    if not alpha_grid:
        raise ValueError("alpha grid must be nonempty")
    if not 0 < delta < 1:
        raise ValueError("delta must be in (0, 1)")
    k_star = max(k, math.ceil(1.0 / epsilon))
    if k_star > dataset.n:
        k_star = dataset.n
    est = estimate_contrast(dataset, queries, k_star, sample_size, seed=seed)

    g_by_width = {float(w): est.g(w) for w in width_grid}
    width_norm = min(g_by_width, key=lambda w: (g_by_width[w], w))
    g = g_by_width[width_norm]
    warn_super_linear = g >= 1.0
    if warn_super_linear:
        warnings.warn(
            "relative contrast too low: table-count exponent >= 1 at every grid "
            "width, so hashed retrieval is not expected to beat exact ranking",
            RuntimeWarning,
            stacklevel=2,
        )

    p_rand = collision_probability(1.0, width_norm)
    alpha = min(alpha_grid, key=lambda a: abs(a - 1.0))
    m = max(1, math.ceil(alpha * math.log(dataset.n) / math.log(1.0 / p_rand)))
    delta_prime = delta / max(1, n_queries)
    l = max(1, math.ceil(dataset.n**g * math.log(k_star / delta_prime)))

    width = width_norm * est.d_mean if est.d_mean > 0 else width_norm
    params = LshParams(m=m, l=l, width=width, seed=seed)
    report = {
        "k_star": k_star,
        "g_exponent": g,
        "width_normalized": width_norm,
        "g_by_width": g_by_width,
        "alpha": alpha,
        "alpha_grid": tuple(alpha_grid),
        "contrast": est.contrast,
        "super_linear_warning": warn_super_linear,
    }
    return params, est, report


def _table_rng(seed: int, table: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 0x7AB1E, table]))


def _digest(codes: np.ndarray, mults: np.ndarray) -> np.ndarray:
    # 64-bit mixing of the m-integer code rows; wraparound arithmetic is the
    # point, so compute in uint64.
    return (codes.astype(np.uint64) * mults).sum(axis=1)


@dataclass(frozen=True, eq=False)
class _Table:
    projections: np.ndarray  # [m, d]
    offsets: np.ndarray  # [m]
    digest_mults: np.ndarray  # [m] uint64
    sorted_digests: np.ndarray  # [N] uint64, ascending
    sorted_points: np.ndarray  # [N] int64, aligned with sorted_digests

    def lookup(self, code: np.ndarray) -> np.ndarray:
        d = _digest(code.reshape(1, -1), self.digest_mults)[0]
        lo = np.searchsorted(self.sorted_digests, d, side="left")
        hi = np.searchsorted(self.sorted_digests, d, side="right")
        return self.sorted_points[lo:hi]


@dataclass(frozen=True, eq=False)
class LshIndex:
    """Immutable hash index over one dataset; safe for concurrent queries."""

    params: LshParams
    n: int
    dim: int
    tables: tuple

    def codes_for(self, x: np.ndarray, table: int) -> np.ndarray:
        t = self.tables[table]
        proj = x @ t.projections.T + t.offsets
        return np.floor(proj / self.params.width).astype(np.int64)


def build_index(dataset: Dataset, params: LshParams) -> LshIndex:
    """Hash every training point into ``params.l`` tables.

    Projections, offsets, and digest mixers all derive from (seed, table),
    so rebuilding with the same seed reproduces identical codes and buckets.
    """
    tables = []
    for t in range(params.l):
        rng = _table_rng(params.seed, t)
        proj = rng.standard_normal((params.m, dataset.dim))
        offs = rng.uniform(0.0, params.width, params.m)
        mults = rng.integers(1, np.iinfo(np.int64).max, size=params.m, dtype=np.int64)
        mults = (mults.astype(np.uint64) << np.uint64(1)) | np.uint64(1)  # keep odd
        codes = np.floor((dataset.features @ proj.T + offs) / params.width).astype(np.int64)
        digests = _digest(codes, mults)
        order = np.argsort(digests, kind="stable")
        tables.append(
            _Table(
                projections=proj,
                offsets=offs,
                digest_mults=mults,
                sorted_digests=digests[order],
                sorted_points=order.astype(np.int64),
            )
        )
    return LshIndex(params=params, n=dataset.n, dim=dataset.dim, tables=tuple(tables))


@dataclass(frozen=True, eq=False)
class RetrievedNeighbors:
    """Approximate nearest neighbors, exactly re-ranked by true distance."""

    ids: np.ndarray
    distances: np.ndarray
    n_candidates: int
    short: bool  # fewer than the requested k_star neighbors were found


def retrieve_approx_knn(
    index: LshIndex, dataset: Dataset, query, k_star: int
) -> RetrievedNeighbors:
    """Union the query's buckets across tables and keep the k_star nearest.

    Candidates are deduplicated and ordered by true distance with ties broken
    by ascending point index, so the result is a subsequence of the exact
    ranking restricted to the candidate set.  A short candidate set is
    returned as-is and flagged, never an error.
    """
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != index.dim:
        raise DataError(f"query dimension {q.shape[0]} != index dimension {index.dim}")
    found = []
    for t in range(index.params.l):
        code = index.codes_for(q, t)
        found.append(index.tables[t].lookup(code))
    cand = np.unique(np.concatenate(found)) if found else np.empty(0, dtype=np.int64)
    if cand.size == 0:
        return RetrievedNeighbors(
            ids=np.empty(0, dtype=np.int64),
            distances=np.empty(0),
            n_candidates=0,
            short=True,
        )
    diff = dataset.features[cand] - q
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    order = np.argsort(dist, kind="stable")  # cand is ascending, so ties break by id
    keep = order[:k_star]
    return RetrievedNeighbors(
        ids=cand[keep],
        distances=dist[keep],
        n_candidates=int(cand.size),
        short=cand.size < k_star,
    )


def _truncated_values_for_ranking(ind: np.ndarray, n_total: int, k: int, k_star: int) -> np.ndarray:
    """Truncated recursion over a retrieved ranking prefix.

    ``ind`` holds label-match indicators for the retrieved points in rank
    order.  When the whole dataset was retrieved and K* covers it, this is
    the exact recursion; otherwise ranks at K* and beyond anchor at zero.
    """
    length = len(ind)
    vals = np.zeros(length)
    if length == 0:
        return vals
    if length == n_total and k_star >= n_total:
        vals[length - 1] = ind[length - 1] / n_total
        start = length - 1
    else:
        start = min(k_star, length) - 1  # positions start..end stay zero
    for i in range(start, 0, -1):  # 1-based rank of the nearer point
        step = (ind[i - 1] - ind[i]) / k * min(k, i) / i
        vals[i - 1] = vals[i] + step
    return vals


def shapley_lsh(
    dataset: Dataset,
    queries: QuerySet,
    k: int,
    epsilon: float,
    delta: float,
    params: Optional[LshParams] = None,
    index: Optional[LshIndex] = None,
    spec: Optional[GameSpec] = None,
) -> ValuationResult:
    """Approximate classification values from hashed neighbor retrieval.

    Per query, the K* approximately nearest points carry the truncated
    recursion and every unretrieved point contributes zero; per-query vectors
    are averaged.  With probability 1 - delta every per-point error is at
    most epsilon.  Regression games are not supported on this path.
    """
    if spec is not None and spec.task != "classification":
        raise UnsupportedGameError("hashed valuation supports classification games only")
    if not 1 <= k <= dataset.n:
        raise ValueError(f"need 1 <= k <= N, got k={k}, N={dataset.n}")
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    report = None
    if index is None:
        if params is None:
            params, _, report = select_params(
                dataset, queries, k, epsilon, delta, n_queries=queries.n
            )
        index = build_index(dataset, params)
    else:
        params = index.params
    k_star = min(max(k, math.ceil(1.0 / epsilon)), dataset.n)

    totals = np.zeros(dataset.n)
    n_candidates = 0
    n_short = 0
    for j in range(queries.n):
        got = retrieve_approx_knn(index, dataset, queries.features[j], k_star)
        n_candidates += got.n_candidates
        n_short += int(got.short)
        ind = (dataset.labels[got.ids] == queries.labels[j]).astype(np.float64)
        vals = _truncated_values_for_ranking(ind, dataset.n, k, k_star)
        totals[got.ids] += vals
    values = totals / queries.n
    diagnostics = {
        "tables": params.l,
        "bits_per_table": params.m,
        "width": params.width,
        "k_star": k_star,
        "candidates_mean": n_candidates / max(1, queries.n),
        "short_retrievals": n_short,
    }
    if report is not None:
        diagnostics["selection"] = report
    return ValuationResult(
        values=values,
        method="lsh",
        guarantee=(epsilon, delta),
        diagnostics=diagnostics,
    )


def save_index(index: LshIndex, path) -> None:
    """Write the index to one little-endian binary file.

    Layout: magic, version, N, d, m, l, then width and seed, then per table
    the projection matrix (m*d f64), offsets (m f64), digest multipliers
    (m u64), sorted digests (N u64) and the aligned point ids (N i64).
    """
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(
            struct.pack(
                "<IQQQQ",
                _FORMAT_VERSION,
                index.n,
                index.dim,
                index.params.m,
                index.params.l,
            )
        )
        f.write(struct.pack("<dq", index.params.width, index.params.seed))
        for t in index.tables:
            f.write(t.projections.astype("<f8").tobytes(order="C"))
            f.write(t.offsets.astype("<f8").tobytes())
            f.write(t.digest_mults.astype("<u8").tobytes())
            f.write(t.sorted_digests.astype("<u8").tobytes())
            f.write(t.sorted_points.astype("<i8").tobytes())


def load_index(path) -> LshIndex:
    """Read an index written by :func:`save_index`."""
    with open(path, "rb") as f:
        data = f.read()
    buf = io.BytesIO(data)
    magic = buf.read(len(_MAGIC))
    if magic != _MAGIC:
        raise DataError("not an index file (bad magic)")
    version, n, dim, m, l = struct.unpack("<IQQQQ", buf.read(4 + 8 * 4))
    if version != _FORMAT_VERSION:
        raise DataError(f"unsupported index format version {version}")
    width, seed = struct.unpack("<dq", buf.read(16))
    tables = []
    for _ in range(l):
        proj = np.frombuffer(buf.read(8 * m * dim), dtype="<f8").reshape(m, dim)
        offs = np.frombuffer(buf.read(8 * m), dtype="<f8")
        mults = np.frombuffer(buf.read(8 * m), dtype="<u8")
        digests = np.frombuffer(buf.read(8 * n), dtype="<u8")
        points = np.frombuffer(buf.read(8 * n), dtype="<i8")
        tables.append(
            _Table(
                projections=proj.copy(),
                offsets=offs.copy(),
                digest_mults=mults.copy(),
                sorted_digests=digests.copy(),
                sorted_points=points.copy(),
            )
        )
    if buf.read(1):
        raise DataError("trailing bytes after index payload")
    params = LshParams(m=m, l=l, width=width, seed=seed)
    return LshIndex(params=params, n=n, dim=dim, tables=tuple(tables))
