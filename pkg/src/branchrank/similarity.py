"""Weighted similarity core: entropy word weights, centroids, branch scoring.

A document vector x is normalized so that x'T diag(lam) x' = 1; the
similarity to a cluster is then the weighted inner product with the cluster
mean.  A branch score is the theta-weighted sum of the similarities to every
cluster on the root-to-leaf path.  All scoring here is pure: models are
value objects, and recomputing weights produces a new model.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .corpus import Corpus, TopicTree

log = logging.getLogger(__name__)

LAMBDA_MIN = 1e-6


class EmptyCluster(ValueError):
    def __init__(self, level: int, pos: int, name: str = ""):
        self.level = level
        self.pos = pos
        super().__init__(f"cluster (level={level}, k={pos + 1}) {name!r} has no documents")


@dataclass(frozen=True)
class WordWeights:
    """Per-word importance lam derived linearly from per-level entropy features.

    ``iota[m, l]`` is log(1 + entropy of word m over the level-(l+1) clusters);
    ``lam = 1 + iota @ alpha``, floored at LAMBDA_MIN to keep the weighting
    positive definite when a search explores aggressive alpha values.
    """

    alpha: np.ndarray  # (h,)
    iota: np.ndarray  # (|W|, h)
    lam: np.ndarray  # (|W|,)

    @classmethod
    def from_alpha(cls, alpha: np.ndarray, iota: np.ndarray) -> "WordWeights":
        return cls(np.asarray(alpha, float), iota, lambda_weights(alpha, iota))


def lambda_weights(alpha: np.ndarray, iota: np.ndarray) -> np.ndarray:
    """lam_m = 1 + sum_l alpha_l * iota_{m,l}, clamped below at LAMBDA_MIN."""
    lam = 1.0 + iota @ np.asarray(alpha, float)
    low = lam < LAMBDA_MIN
    if low.any():
        log.warning(
            "clamped %d word weights below %g (alpha=%s)", int(low.sum()), LAMBDA_MIN, alpha
        )
        lam = np.where(low, LAMBDA_MIN, lam)
    return lam


def normalize(x: np.ndarray, lam: np.ndarray) -> tuple[np.ndarray, bool]:
    """Scale x so that x'T diag(lam) x' = 1; a zero vector is returned as is, flagged."""
    x = np.asarray(x, float)
    q = float(np.sum(lam * x * x))
    if q <= 0.0:
        return x, True
    return x / np.sqrt(q), False


def normalize_rows(counts: sparse.spmatrix, lam: np.ndarray) -> tuple[sparse.csr_matrix, np.ndarray]:
    """Row-wise weighted normalization of a sparse count matrix.

    Returns the normalized matrix and the mask of all-zero rows (left as is).
    """
    counts = counts.tocsr()
    sq = counts.copy()
    sq.data = sq.data**2
    norms = np.sqrt(np.asarray(sq @ lam).ravel())
    zero = norms <= 0.0
    inv = np.where(zero, 0.0, 1.0 / np.where(zero, 1.0, norms))
    return sparse.diags(inv) @ counts, zero


def weighted_similarity(x: np.ndarray, y: np.ndarray, lam: np.ndarray) -> float:
    """Weighted cosine similarity; zero whenever either weighted norm is zero."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    nx = np.sqrt(np.sum(lam * x * x))
    ny = np.sqrt(np.sum(lam * y * y))
    if nx <= 0.0 or ny <= 0.0:
        return 0.0
    return float(np.sum(lam * x * y) / (nx * ny))


@dataclass(frozen=True)
class CentroidSet:
    """Per-level cluster means of weight-normalized member documents.

    ``levels[l-1]`` is a dense (K_l, |W|) array.  Internal means are averages
    over all member documents of the node's descendant leaves, not averages
    of child centroids, so unequal leaf populations carry their true weight.
    """

    levels: tuple[np.ndarray, ...]

    def node_mean(self, level: int, pos: int) -> np.ndarray:
        return self.levels[level - 1][pos]

    def branch_matrix(self, tree: TopicTree, leaf_k: int) -> np.ndarray:
        """(|W|, h) matrix whose column l-1 is the leaf's level-l ancestor mean."""
        cols = [
            self.levels[lvl][tree.ancestor_pos[lvl, leaf_k]]
            for lvl in range(tree.height)
        ]
        return np.stack(cols, axis=1)

    def leaf_level_matrix(self, tree: TopicTree, level: int) -> np.ndarray:
        """(K_h, |W|) rows: each leaf's ancestor mean at the given level."""
        return self.levels[level - 1][tree.ancestor_pos[level - 1]]


def cluster_means(
    x_norm: sparse.spmatrix, leaf_index: np.ndarray, tree: TopicTree
) -> CentroidSet:
    """Arithmetic mean of the normalized member vectors for every tree node."""
    x_norm = x_norm.tocsr()
    levels = []
    for lvl in range(1, tree.height + 1):
        nodes = tree.levels[lvl - 1]
        means = np.zeros((len(nodes), x_norm.shape[1]))
        node_of_leaf = tree.ancestor_pos[lvl - 1]
        labeled = leaf_index >= 0
        doc_node = np.where(labeled, node_of_leaf[np.where(labeled, leaf_index, 0)], -1)
        for node in nodes:
            rows = np.flatnonzero(doc_node == node.pos)
            if rows.size == 0:
                raise EmptyCluster(lvl, node.pos, node.name)
            means[node.pos] = np.asarray(x_norm[rows].sum(axis=0)).ravel() / rows.size
        levels.append(means)
    return CentroidSet(tuple(levels))


def word_cluster_distribution(level_means: np.ndarray, word_m: int) -> tuple[np.ndarray, bool]:
    """Distribution of one word over the clusters of a level.

    L1-normalizes the word's centroid components; when the word is absent
    from every centroid the uniform distribution is returned, flagged, which
    assigns it maximal entropy and hence minimal importance.
    """
    col = level_means[:, word_m]
    total = col.sum()
    if total <= 0.0:
        k = level_means.shape[0]
        return np.full(k, 1.0 / k), True
    return col / total, False


def word_entropy(p: np.ndarray) -> float:
    """Shannon entropy in nats with the 0*log(0) = 0 convention."""
    p = np.asarray(p, float)
    nz = p > 0.0
    return float(-np.sum(p[nz] * np.log(p[nz])))


def entropy_features(centroids: CentroidSet) -> np.ndarray:
    """(|W|, h) matrix of log(1 + per-level word entropy).

    The root level always contributes a zero column: with a single cluster
    every word distribution is the point mass and its entropy vanishes.
    """
    n_words = centroids.levels[0].shape[1]
    h = len(centroids.levels)
    iota = np.zeros((n_words, h))
    for lvl in range(h):
        means = centroids.levels[lvl]
        k = means.shape[0]
        totals = means.sum(axis=0)
        absent = totals <= 0.0
        safe = np.where(absent, 1.0, totals)
        p = means / safe
        with np.errstate(divide="ignore", invalid="ignore"):
            plogp = np.where(p > 0.0, p * np.log(p), 0.0)
        ent = -plogp.sum(axis=0)
        ent[absent] = np.log(k)  # flagged-uniform convention
        iota[:, lvl] = np.log1p(ent)
    return iota


def hierarchical_similarity(
    x_norm: np.ndarray, branch_matrix: np.ndarray, theta_k: np.ndarray, lam: np.ndarray
) -> float:
    """Branch score: theta-weighted sum of level similarities, x'T diag(lam) M theta."""
    return float((lam * x_norm) @ branch_matrix @ theta_k)


@dataclass(frozen=True)
class Ranking:
    """Leaves sorted by score descending, ties broken by ascending leaf index."""

    order: np.ndarray  # 0-based leaf positions, best first
    scores: np.ndarray  # parallel, non-increasing

    def position_of(self, leaf_k: int) -> int:
        """1-based rank of the given leaf."""
        where = np.flatnonzero(self.order == leaf_k)
        if where.size == 0:
            raise ValueError(f"leaf {leaf_k} not present in ranking")
        return int(where[0]) + 1


def rank_by_scores(scores: np.ndarray) -> Ranking:
    scores = np.asarray(scores, float)
    order = np.lexsort((np.arange(scores.size), -scores))
    return Ranking(order, scores[order])


class RankingModel:
    """Everything needed to score a document against every branch.

    Immutable: replacing alpha or theta means rebuilding the model, which
    also renormalizes documents and recomputes means and entropy features.
    """

    def __init__(
        self,
        dictionary,
        tree: TopicTree,
        weights: WordWeights,
        centroids: CentroidSet,
        theta: np.ndarray,
        method: str = "init",
        meta: dict | None = None,
    ):
        self.dictionary = dictionary
        self.tree = tree
        self.weights = weights
        self.centroids = centroids
        self.theta = np.asarray(theta, float)
        self.method = method
        self.meta = dict(meta or {})
        k = tree.n_leaves
        if self.theta.shape != (k, tree.height):
            raise ValueError(f"theta must be ({k}, {tree.height})")
        # Combined scoring matrix: column k = diag(lam) @ M_k @ theta_k.
        proj = np.zeros((len(dictionary), k))
        for lvl in range(tree.height):
            leaf_means = centroids.leaf_level_matrix(tree, lvl + 1)  # (K_h, |W|)
            proj += leaf_means.T * self.theta[:, lvl]
        self._proj = weights.lam[:, None] * proj
        self._level_proj = [
            weights.lam[:, None] * centroids.levels[lvl].T for lvl in range(tree.height)
        ]

    @property
    def n_leaves(self) -> int:
        return self.tree.n_leaves

    @property
    def height(self) -> int:
        return self.tree.height

    def branch_scores(self, x_norm) -> np.ndarray:
        """Scores of one normalized document against every branch."""
        if sparse.issparse(x_norm):
            return np.asarray(x_norm @ self._proj).ravel()
        return np.asarray(x_norm, float) @ self._proj

    def branch_scores_many(self, x_norm: sparse.spmatrix) -> np.ndarray:
        return np.asarray(x_norm @ self._proj)

    def level_scores(self, x_norm, level: int) -> np.ndarray:
        """Similarities of a normalized document to every level-``level`` node."""
        p = self._level_proj[level - 1]
        if sparse.issparse(x_norm):
            return np.asarray(x_norm @ p).ravel()
        return np.asarray(x_norm, float) @ p

    def normalize_counts(self, counts: sparse.spmatrix) -> sparse.csr_matrix:
        xn, _ = normalize_rows(counts, self.weights.lam)
        return xn

    def rank(self, x_norm) -> Ranking:
        return rank_by_scores(self.branch_scores(x_norm))

    def rank_topdown(self, x_norm) -> Ranking:
        """Rank level-2 nodes first, then recurse: subtree blocks never interleave.

        The attached scores are position-dominant composites
        ``(K_h - rank + leaf_similarity) / K_h``: non-increasing along the
        returned order while still carrying each leaf's own similarity in the
        fractional part.
        """
        sims = [self.level_scores(x_norm, lvl + 1) for lvl in range(self.height)]

        def visit(node) -> list[int]:
            if node.is_leaf:
                return [node.leaf_pos]
            kids = sorted(node.children, key=lambda c: (-sims[c.level - 1][c.pos], c.pos))
            out: list[int] = []
            for kid in kids:
                out.extend(visit(kid))
            return out

        order = np.array(visit(self.tree.root), dtype=np.int64)
        k = self.n_leaves
        leaf_sims = sims[self.height - 1][self.tree.ancestor_pos[self.height - 1]]
        scores = (k - np.arange(1, k + 1) + leaf_sims[order]) / k
        return Ranking(order, scores)


def expert_positions(scores: np.ndarray, expert_leaf: np.ndarray) -> np.ndarray:
    """1-based rank of each row's expert leaf under the score/tie rule.

    Matches rank_by_scores exactly: higher score first, ties to the lower
    leaf index.
    """
    scores = np.asarray(scores, float)
    n, k = scores.shape
    se = scores[np.arange(n), expert_leaf]
    higher = (scores > se[:, None]).sum(axis=1)
    ties_before = (
        (scores == se[:, None]) & (np.arange(k)[None, :] < expert_leaf[:, None])
    ).sum(axis=1)
    return higher + ties_before + 1


def build_model(
    corpus: Corpus,
    centroid_rows: np.ndarray,
    alpha: np.ndarray,
    theta: np.ndarray,
    weight_passes: int = 2,
    method: str = "init",
    meta: dict | None = None,
) -> RankingModel:
    """Build a self-consistent model from the given centroid-estimation rows.

    Weights, normalization, means and entropy features depend on each other,
    so the build iterates: start from unit weights, compute means and entropy
    features, refresh lam from alpha, and repeat ``weight_passes`` times.  The
    stored lam always equals 1 + iota @ alpha for the stored iota.  With
    alpha = 0 every pass yields unit weights and one pass suffices.
    """
    tree = corpus.tree
    counts = corpus.counts[centroid_rows]
    leaf_idx = corpus.leaf_index[centroid_rows]
    if (leaf_idx < 0).any():
        raise ValueError("centroid estimation rows must all be labeled")
    alpha = np.asarray(alpha, float)
    iota = np.zeros((len(corpus.dictionary), tree.height))
    passes = max(1, weight_passes) if np.any(alpha != 0.0) else 1
    for _ in range(passes):
        lam = lambda_weights(alpha, iota)
        xn, _ = normalize_rows(counts, lam)
        cents = cluster_means(xn, leaf_idx, tree)
        iota = entropy_features(cents)
    lam = lambda_weights(alpha, iota)
    xn, _ = normalize_rows(counts, lam)
    cents = cluster_means(xn, leaf_idx, tree)
    weights = WordWeights(alpha, iota, lam)
    return RankingModel(corpus.dictionary, tree, weights, cents, theta, method, meta)
