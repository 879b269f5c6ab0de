"""Pure-Python (numpy) graph-traversal kernel for the HNSW index.

This is the fallback implementation of the hot kernels; the compiled
extension in ``_graph_fast.pyx`` provides the same three functions with the
same contracts. Throughout, "distance" means the negated inner product, so
smaller is more similar, and all orderings use the lexicographic key
(distance, node) which makes results independent of adjacency storage order.

Each kernel is deterministic for fixed inputs, but the two kernels are not
required to agree bit-for-bit with each other: they accumulate float32
products in different orders. Graphs are reproducible per kernel.
"""

from __future__ import annotations

import heapq

import numpy as np


def dists_to(vectors: np.ndarray, center: int, ids: np.ndarray) -> np.ndarray:
    """Negated inner products between node ``center`` and each node in ``ids``."""
    return -(vectors[ids] @ vectors[center]).astype(np.float64)


def search_layer(
    vectors: np.ndarray,
    adj: np.ndarray,
    deg: np.ndarray,
    query: np.ndarray,
    entries: np.ndarray,
    ef: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Beam search over one graph layer.

    Starts from ``entries`` (distinct node ordinals) and greedily expands the
    closest unexpanded candidate until no candidate can improve the ``ef``
    best nodes found. Returns (ids, dists) sorted ascending by
    (distance, node).
    """
    visited = np.zeros(vectors.shape[0], dtype=bool)
    visited[entries] = True
    entry_dists = -(vectors[entries] @ query).astype(np.float64)

    candidates: list[tuple[float, int]] = []  # min-heap on (dist, id)
    best: list[tuple[float, int]] = []  # max-heap via negated key
    for d, e in zip(entry_dists, entries):
        d = float(d)
        e = int(e)
        heapq.heappush(candidates, (d, e))
        heapq.heappush(best, (-d, -e))
    while len(best) > ef:
        heapq.heappop(best)

    while candidates:
        dist_c, c = heapq.heappop(candidates)
        worst_d, worst_neg_id = best[0]
        if len(best) >= ef and (dist_c, c) > (-worst_d, -worst_neg_id):
            break
        neighbors = adj[c, : deg[c]]
        neighbors = neighbors[~visited[neighbors]]
        if neighbors.size == 0:
            continue
        visited[neighbors] = True
        neighbor_dists = -(vectors[neighbors] @ query).astype(np.float64)
        for d, e in zip(neighbor_dists, neighbors):
            d = float(d)
            e = int(e)
            worst_d, worst_neg_id = best[0]
            if len(best) < ef or (d, e) < (-worst_d, -worst_neg_id):
                heapq.heappush(candidates, (d, e))
                heapq.heappush(best, (-d, -e))
                if len(best) > ef:
                    heapq.heappop(best)

    found = sorted((-d, -e) for d, e in best)
    ids = np.fromiter((e for _, e in found), dtype=np.int32, count=len(found))
    dists = np.fromiter((d for d, _ in found), dtype=np.float64, count=len(found))
    return ids, dists


def select_neighbors(
    vectors: np.ndarray,
    cand_ids: np.ndarray,
    cand_dists: np.ndarray,
    m: int,
) -> np.ndarray:
    """Diversity-aware neighbor selection over (candidate, distance) pairs.

    Walks candidates in (distance, node) order and keeps one only if it is
    strictly closer to the query point than to every already-kept neighbor;
    stops once ``m`` survive. With ``m`` or fewer candidates all are kept.
    """
    order = np.lexsort((cand_ids, cand_dists))
    if cand_ids.size <= m:
        return cand_ids[order].astype(np.int32, copy=False)
    selected: list[int] = []
    for pos in order:
        if len(selected) == m:
            break
        e = int(cand_ids[pos])
        if selected:
            to_selected = -(vectors[selected] @ vectors[e]).astype(np.float64)
            if float(to_selected.min()) <= float(cand_dists[pos]):
                continue
        selected.append(e)
    return np.asarray(selected, dtype=np.int32)
