"""Independent reference implementations used only by the tests."""

import itertools
import math
from functools import lru_cache

import numpy as np


@lru_cache(maxsize=None)
def transport_vertices(n_rows: int, n_cols: int) -> np.ndarray:
    """All vertices of the balanced transportation polytope with uniform masses.

    Enumerates every choice of ``n_rows + n_cols - 1`` cells, solves the
    marginal equations restricted to those cells, and keeps the nonnegative
    unique solutions. Returns an array of shape (n_vertices, n_rows, n_cols).
    """
    cells = [(i, j) for i in range(n_rows) for j in range(n_cols)]
    a = np.zeros((n_rows + n_cols, len(cells)))
    for c, (i, j) in enumerate(cells):
        a[i, c] = 1.0
        a[n_rows + j, c] = 1.0
    b = np.concatenate([np.full(n_rows, 1.0 / n_rows), np.full(n_cols, 1.0 / n_cols)])
    size = n_rows + n_cols - 1
    found = {}
    for basis in itertools.combinations(range(len(cells)), size):
        sub = a[:, basis]
        if np.linalg.matrix_rank(sub) < size:
            continue
        x, *_ = np.linalg.lstsq(sub, b, rcond=None)
        if (x < -1e-12).any() or np.abs(sub @ x - b).max() > 1e-12:
            continue
        flow = np.zeros(len(cells))
        flow[list(basis)] = np.clip(x, 0.0, None)
        found[tuple(np.round(flow, 12))] = flow
    return np.array(list(found.values())).reshape(-1, n_rows, n_cols)


def brute_force_transport(cost: np.ndarray) -> float:
    """Minimum work over all polytope vertices, uniform masses on both sides."""
    verts = transport_vertices(*cost.shape)
    return float((verts * cost[None]).sum(axis=(1, 2)).min())


def brute_force_rank(scores: np.ndarray, target: int) -> int:
    """Rank by sorting (score descending, id ascending) over ids 1..|V|."""
    order = sorted(range(1, len(scores)), key=lambda i: (-scores[i], i))
    return order.index(target) + 1


def brute_force_metrics(ranks, n):
    """Per-case MRR, HR and NDCG at cutoff ``n`` from their definitions, then averaged."""
    mrr_terms, hr_terms, ndcg_terms = [], [], []
    for rank in ranks:
        if rank <= n:
            mrr_terms.append(1.0 / rank)
            hr_terms.append(1.0)
            ndcg_terms.append(1.0 / math.log2(rank + 1))
        else:
            mrr_terms.append(0.0)
            hr_terms.append(0.0)
            ndcg_terms.append(0.0)
    count = len(ranks)
    return (math.fsum(mrr_terms) / count, math.fsum(hr_terms) / count, math.fsum(ndcg_terms) / count)
