"""Concept selection: cosine similarity between learned columns and the
descriptor pool, top-m candidate filtering, and the optimal one-to-one
assignment, plus nearest-neighbor and random selection baselines.

The assignment is the rectangular min-cost matching (k rows, |P'| >= k
columns, every row matched, columns used at most once) after inverting
similarities into costs by subtracting from the matrix maximum. The solver
is the shortest-augmenting-path method with row/column potentials, O(k^2 n);
the potentials double as an optimality certificate used to break ties among
optimal assignments toward the lexicographically smallest column sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import DatasetManifest, EmbeddingSet
from .errors import DanglingIndexError, InfeasibleSelectionError, ShapeMismatchError, ZeroNormError
from .nn import make_rng

# reduced-cost / total-cost comparisons tolerate this much float noise
_TOL = 1e-9


@dataclass(frozen=True)
class SimilarityMatrix:
    values: np.ndarray  # (k, m) cosines
    row_ids: np.ndarray  # (k,) learned-embedding indices
    col_ids: np.ndarray  # (m,) descriptor-pool indices


@dataclass(frozen=True)
class Assignment:
    pairs: list[tuple[int, int]]  # (row id, pool column id), row ids 0..k-1
    total_similarity: float


@dataclass(frozen=True)
class TopMFilterResult:
    matrix: SimilarityMatrix
    final_m: int | None  # None when filtering was skipped
    top_des_size: int
    skipped: bool


def _unit_rows(mat: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(mat, axis=1)
    if np.any(norms < 1e-12):
        raise ZeroNormError(f"{what}: zero-norm row {int(np.argmin(norms))}")
    return mat / norms[:, None]


def similarity_matrix(S: np.ndarray, pool: EmbeddingSet | np.ndarray) -> SimilarityMatrix:
    """Cosine similarities between the columns of S (d, k) and the pool rows."""
    S = np.asarray(S, dtype=np.float64)
    p = pool.as_f64() if isinstance(pool, EmbeddingSet) else np.asarray(pool, dtype=np.float64)
    if S.shape[0] != p.shape[1]:
        raise ShapeMismatchError(f"S dim {S.shape[0]} != pool dim {p.shape[1]}")
    rows = _unit_rows(S.T, "learned embeddings")
    cols = _unit_rows(p, "descriptor pool")
    values = rows @ cols.T
    k, m = values.shape
    return SimilarityMatrix(values, np.arange(k), np.arange(m))


def top_m_filter(sim: SimilarityMatrix, k: int, m0: int = 5) -> TopMFilterResult:
    """Restrict the pool to the union of per-row top-m columns, doubling m
    from m0 until the union exceeds k. Skipped when the pool is not larger
    than k (the full pool is used as-is)."""
    if m0 < 1:
        raise ShapeMismatchError("m0 must be >= 1")
    n_cols = sim.values.shape[1]
    if n_cols <= k:
        return TopMFilterResult(sim, None, n_cols, True)
    m = m0
    while True:
        take = min(m, n_cols)
        # stable argsort so equal similarities resolve to lower pool indices
        order = np.argsort(-sim.values, axis=1, kind="stable")[:, :take]
        top_des = np.unique(order)
        if top_des.size > k or take == n_cols:
            break
        m *= 2
    keep = np.sort(top_des)
    filtered = SimilarityMatrix(sim.values[:, keep], sim.row_ids, sim.col_ids[keep])
    return TopMFilterResult(filtered, m, int(top_des.size), False)


def _solve_rectangular(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Min-cost full matching of rows into columns (k <= n), returning
    (column of each row, row potentials u, column potentials v).

    Shortest augmenting paths with potentials. On return the duals satisfy
    u[i] + v[j] <= cost[i, j] with equality on matched edges, v <= 0, and
    v[j] = 0 for unmatched columns, which certifies optimality.
    """
    k, n = cost.shape
    u = np.zeros(k)
    v = np.zeros(n)
    col_of_row = np.full(k, -1, dtype=np.int64)
    row_of_col = np.full(n, -1, dtype=np.int64)

    for i in range(k):
        minv = np.full(n, np.inf)
        path = np.full(n, -1, dtype=np.int64)  # predecessor column, -1 = start
        used = np.zeros(n, dtype=bool)
        used_rows = [i]
        i_cur, j_prev = i, -1
        j_end = -1
        while True:
            red = cost[i_cur] - u[i_cur] - v
            better = ~used & (red < minv)
            minv[better] = red[better]
            path[better] = j_prev
            free = np.where(~used)[0]
            j_next = free[np.argmin(minv[free])]
            delta = minv[j_next]
            u[np.array(used_rows)] += delta
            v[used] -= delta
            minv[~used] -= delta
            used[j_next] = True
            if row_of_col[j_next] == -1:
                j_end = j_next
                break
            i_cur = row_of_col[j_next]
            used_rows.append(i_cur)
            j_prev = j_next
        # augment: walk predecessors back to the start
        j = j_end
        while True:
            p = path[j]
            r = i if p == -1 else row_of_col[p]
            row_of_col[j] = r
            col_of_row[r] = j
            if p == -1:
                break
            j = p
    return col_of_row, u, v


def _lexmin_optimal(cost: np.ndarray, col_of_row: np.ndarray,
                    u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Among all min-cost full matchings, pick the lexicographically smallest
    column sequence (row 0 first). Candidate columns per row are pruned to
    dual-tight edges (a necessary condition for membership in any optimum);
    each candidate is verified by solving the remaining subproblem."""
    k, n = cost.shape
    total = float(cost[np.arange(k), col_of_row].sum())
    scale = max(1.0, float(np.abs(cost).max())) * max(k, 1)
    tol = _TOL * scale
    chosen = np.full(k, -1, dtype=np.int64)
    used = np.zeros(n, dtype=bool)
    prefix = 0.0
    for i in range(k):
        tight = np.where((cost[i] - u[i] - v <= tol) & ~used)[0]
        if tight.size == 1:
            best_j = int(tight[0])
        else:
            best_j = -1
            fallback, fallback_val = -1, np.inf
            rest_rows = np.arange(i + 1, k)
            for j in tight:
                if rest_rows.size:
                    rest_cols = np.where(~used & (np.arange(n) != j))[0]
                    sub = cost[np.ix_(rest_rows, rest_cols)]
                    sub_cols, _, _ = _solve_rectangular(sub)
                    rest = float(sub[np.arange(rest_rows.size), sub_cols].sum())
                else:
                    rest = 0.0
                val = prefix + cost[i, j] + rest
                if val <= total + tol:
                    best_j = int(j)
                    break
                if val < fallback_val:
                    fallback, fallback_val = int(j), val
            if best_j == -1:
                best_j = fallback  # float-noise safety net; still optimal to tol
        chosen[i] = best_j
        used[best_j] = True
        prefix += cost[i, best_j]
    return chosen


def assign(sim: SimilarityMatrix) -> Assignment:
    """Maximum-total-similarity injective pairing of every row with a column.

    Similarities are inverted into costs by subtracting from the matrix
    maximum; ties between optimal pairings resolve to the lexicographically
    smallest column sequence.
    """
    values = sim.values
    k, n = values.shape
    if n < k:
        raise InfeasibleSelectionError(
            f"cannot assign {k} concepts from {n} pool columns"
        )
    cost = values.max() - values
    col_of_row, u, v = _solve_rectangular(cost)
    chosen = _lexmin_optimal(cost, col_of_row, u, v)
    total = float(values[np.arange(k), chosen].sum())
    pairs = [(int(sim.row_ids[i]), int(sim.col_ids[chosen[i]])) for i in range(k)]
    return Assignment(pairs, total)


def select_nn(S: np.ndarray, pool: EmbeddingSet | np.ndarray) -> list[int]:
    """Per-row nearest pool descriptor by L2 distance on normalized vectors.
    Duplicates are allowed; ties resolve to the lowest index."""
    S = np.asarray(S, dtype=np.float64)
    p = pool.as_f64() if isinstance(pool, EmbeddingSet) else np.asarray(pool, dtype=np.float64)
    rows = _unit_rows(S.T, "learned embeddings")
    cols = _unit_rows(p, "descriptor pool")
    d2 = (
        np.sum(rows * rows, axis=1)[:, None]
        - 2.0 * rows @ cols.T
        + np.sum(cols * cols, axis=1)[None, :]
    )
    return [int(j) for j in np.argmin(d2, axis=1)]


def select_random(pool_size: int, k: int, seed: int) -> list[int]:
    """Uniform sample of k distinct pool indices."""
    if pool_size < k:
        raise InfeasibleSelectionError(f"pool of {pool_size} cannot supply {k} descriptors")
    rng = make_rng(seed)
    return [int(j) for j in rng.choice(pool_size, size=k, replace=False)]


def build_selected(
    pool: EmbeddingSet,
    manifest: DatasetManifest,
    chosen: Assignment | list[int],
) -> tuple[np.ndarray, list[str]]:
    """Materialize the selected bottleneck: unit-norm pool columns in row-id
    order plus the aligned descriptor texts."""
    if isinstance(chosen, Assignment):
        ids = [col for _, col in sorted(chosen.pairs)]
    else:
        ids = list(chosen)
    if len(manifest.descriptors) != pool.rows:
        raise ShapeMismatchError(
            f"manifest has {len(manifest.descriptors)} descriptors, pool has {pool.rows} rows"
        )
    for j in ids:
        if not 0 <= j < pool.rows:
            raise DanglingIndexError(f"descriptor id {j} out of range [0, {pool.rows})")
    mat = _unit_rows(pool.as_f64(), "descriptor pool")
    s_prime = mat[ids].T.copy()
    texts = [manifest.descriptors[j].text for j in ids]
    return s_prime, texts
