"""K-center greedy selection, exhaustive k-center oracle, cover radius,
and clustering quality metrics over an embedding matrix.

Greedy selection repeatedly takes the point farthest from the current
centers (ties to the lowest row index), which 2-approximates the optimal
max-min cover radius. Distances are Euclidean in float64 regardless of the
embedding storage precision; the argmax scan is index-ordered so results do
not depend on worker count.
"""

import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from . import _kernels

BRUTE_FORCE_LIMIT = 10 ** 6


@dataclass
class SelectionState:
    """Selected rows, each row's distance to its nearest center, and the
    greedy trace of (picked index, distance at pick time)."""

    labeled: list
    min_dist: np.ndarray
    trace: list = field(default_factory=list)


def d_phi(emb, i, j):
    """Euclidean distance between embedding rows i and j."""
    emb = np.asarray(emb, dtype=np.float64)
    n = emb.shape[0]
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"row index out of range for {n} rows")
    return float(np.linalg.norm(emb[i] - emb[j]))


def _initial_state(emb, initial_labeled):
    n = emb.shape[0]
    labeled = sorted(set(int(i) for i in initial_labeled))
    if labeled and not (0 <= min(labeled) and max(labeled) < n):
        raise IndexError("initial labeled index out of range")
    min_dist = np.full(n, np.inf)
    for idx in labeled:
        np.minimum(min_dist, _kernels.dist_to_row(emb, idx), out=min_dist)
    return SelectionState(labeled=labeled, min_dist=min_dist)


def k_center_greedy(emb, initial_labeled, k, cold_start_seed=None):
    """Extend ``initial_labeled`` with k greedy farthest-point picks.

    With an empty initial set the first center is the head of a seeded
    shuffle of the rows (row 0 when no seed is given); after that every
    pick maximizes the distance to the nearest existing center, ties going
    to the lowest row index.
    """
    emb = np.ascontiguousarray(emb, dtype=np.float64)
    n = emb.shape[0]
    state = _initial_state(emb, initial_labeled)
    if k < 0 or k > n - len(state.labeled):
        raise ValueError(
            f"budget {k} exceeds the {n - len(state.labeled)} unlabeled rows"
        )
    labeled_mask = np.zeros(n, dtype=bool)
    labeled_mask[state.labeled] = True
    for _ in range(k):
        if not state.labeled:
            if cold_start_seed is None:
                idx = 0
            else:
                idx = int(np.random.default_rng(cold_start_seed).permutation(n)[0])
            picked_dist = np.inf
        else:
            cand = np.where(labeled_mask, -np.inf, state.min_dist)
            idx = int(np.argmax(cand))
            picked_dist = float(state.min_dist[idx])
        state.labeled.append(idx)
        labeled_mask[idx] = True
        state.trace.append((idx, picked_dist))
        np.minimum(state.min_dist, _kernels.dist_to_row(emb, idx), out=state.min_dist)
    return state


def cover_radius(emb, labeled):
    """Largest distance from any row to its nearest labeled row."""
    labeled = list(labeled)
    if not labeled:
        raise ValueError("cover radius of an empty labeled set is undefined")
    emb = np.ascontiguousarray(emb, dtype=np.float64)
    min_dist = np.full(emb.shape[0], np.inf)
    for idx in labeled:
        np.minimum(min_dist, _kernels.dist_to_row(emb, idx), out=min_dist)
    return float(min_dist.max())


def brute_force_k_center(emb, initial_labeled, k):
    """Exhaustive optimum of the k-center objective.

    Tries every k-subset of the unlabeled rows and returns (optimal radius,
    first optimal subset in lexicographic order). Refuses instances with
    more than 10^6 candidate subsets.
    """
    emb = np.ascontiguousarray(emb, dtype=np.float64)
    n = emb.shape[0]
    state = _initial_state(emb, initial_labeled)
    free = [i for i in range(n) if i not in set(state.labeled)]
    if k < 0 or k > len(free):
        raise ValueError(f"budget {k} exceeds the {len(free)} unlabeled rows")
    if math.comb(len(free), k) > BRUTE_FORCE_LIMIT:
        raise ValueError(
            f"C({len(free)}, {k}) exceeds the {BRUTE_FORCE_LIMIT} subset limit"
        )
    D = _kernels.pairwise_dists(emb)
    base = state.min_dist
    best_radius = np.inf
    best_set = None
    for combo in combinations(free, k):
        radius = float(
            np.max(np.minimum(base, D[list(combo)].min(axis=0)))
            if combo
            else np.max(base)
        )
        if radius < best_radius:
            best_radius = radius
            best_set = combo
    return best_radius, list(best_set)


def silhouette_score(emb, cluster_labels):
    """Mean silhouette over all points under Euclidean distance.

    Singleton clusters score 0, as does the 0/0 case where a point's
    intra- and inter-cluster distances are both zero.
    """
    emb = np.ascontiguousarray(emb, dtype=np.float64)
    labels = np.asarray(cluster_labels)
    if labels.shape[0] != emb.shape[0]:
        raise ValueError("one cluster label per row is required")
    uniq = np.unique(labels)
    if uniq.size < 2:
        raise ValueError("silhouette needs at least two clusters")
    D = _kernels.pairwise_dists(emb)
    n = emb.shape[0]
    scores = np.zeros(n)
    members = {c: np.flatnonzero(labels == c) for c in uniq}
    for i in range(n):
        own = members[labels[i]]
        if own.size < 2:
            continue  # singleton convention: 0
        a = D[i, own].sum() / (own.size - 1)
        b = min(D[i, members[c]].mean() for c in uniq if c != labels[i])
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0 else (b - a) / denom
    return float(scores.mean())


def _kmeanspp_centers(emb, n_clusters, rng):
    n = emb.shape[0]
    centers = np.empty((n_clusters, emb.shape[1]))
    centers[0] = emb[int(rng.integers(n))]
    d2 = np.sum((emb - centers[0]) ** 2, axis=1)
    for c in range(1, n_clusters):
        total = d2.sum()
        if total == 0:
            centers[c:] = emb[int(rng.integers(n))]
            break
        centers[c] = emb[int(rng.choice(n, p=d2 / total))]
        d2 = np.minimum(d2, np.sum((emb - centers[c]) ** 2, axis=1))
    return centers


def kmeans_labels(emb, n_clusters, seed, n_iter=100, n_init=4):
    """Lloyd k-means with k-means++ seeding; deterministic, labels only.

    Runs ``n_init`` restarts and keeps the assignment with the lowest
    within-cluster sum of squares. An emptied cluster is reseeded to the
    row farthest from its current center.
    """
    emb = np.ascontiguousarray(emb, dtype=np.float64)
    n = emb.shape[0]
    if not 2 <= n_clusters <= n:
        raise ValueError("n_clusters must be in [2, n]")
    rng = np.random.default_rng(seed)
    best_labels = None
    best_inertia = np.inf
    for _ in range(n_init):
        centers = _kmeanspp_centers(emb, n_clusters, rng)
        labels = np.full(n, -1)
        for _ in range(n_iter):
            new_labels = _kernels.nn_indices(emb, centers)
            if np.array_equal(new_labels, labels):
                break
            labels = new_labels
            dist_to_center = np.linalg.norm(emb - centers[labels], axis=1)
            for c in range(n_clusters):
                mask = labels == c
                if mask.any():
                    centers[c] = emb[mask].mean(axis=0)
                else:
                    far = int(np.argmax(dist_to_center))
                    centers[c] = emb[far]
                    dist_to_center[far] = 0.0
        inertia = float(np.sum((emb - centers[labels]) ** 2))
        if inertia < best_inertia:
            best_inertia = inertia
            best_labels = labels
    return best_labels
