"""Greedy trainer: alternating grid search over alpha and per-branch QPs.

The alpha step rebuilds the model per grid candidate (renormalize, new means,
new entropy features) and keeps the candidate with the best validation area
score, ties going to the lexicographically smallest alpha.  The theta step
maximizes the summed branch scores of each leaf's documents minus a quadratic
pull toward the uniform level weighting, constrained to the probability
simplex.  With an isotropic quadratic term that program is solved exactly by
a Euclidean projection onto the simplex.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus, Partition
from .metrics import auch_from_ranks
from .similarity import RankingModel, build_model, expert_positions

log = logging.getLogger(__name__)

DEFAULT_GRID = (-0.5, -0.25, 0.0, 0.25, 0.5, 1.0)


class QpNotConverged(RuntimeError):
    def __init__(self, residual: float, tolerance: float):
        self.residual = residual
        super().__init__(f"QP stationarity residual {residual:g} exceeds {tolerance:g}")


@dataclass
class GreedyConfig:
    alpha_grid: list[list[float]] | None = None  # per level; None -> defaults
    psi: float | None = None  # None -> 0.1 * mean docs per leaf in the theta set
    max_outer_iters: int = 10
    qp_tolerance: float = 1e-9
    literal_plus_penalty: bool = False  # keep the distance term as a bonus, not a penalty
    weight_passes: int = 2

    def grids_for(self, height: int, iota_level_nonzero) -> list[list[float]]:
        """Per-level candidate values; a level whose entropy features vanish
        identically (the root) defaults to the singleton {0}."""
        if self.alpha_grid is not None:
            if len(self.alpha_grid) != height:
                raise ValueError(f"alpha_grid must have {height} levels")
            return [sorted(g) for g in self.alpha_grid]
        return [
            sorted(DEFAULT_GRID) if iota_level_nonzero[lvl] else [0.0]
            for lvl in range(height)
        ]


def init_parameters(height: int, n_leaves: int) -> tuple[np.ndarray, np.ndarray]:
    """Starting point: zero alpha, uniform level weights on every branch."""
    return np.zeros(height), np.full((n_leaves, height), 1.0 / height)


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    v = np.asarray(v, float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    rho = np.flatnonzero(u * np.arange(1, v.size + 1) > css)[-1]
    tau = css[rho] / (rho + 1.0)
    return np.maximum(v - tau, 0.0)


def qp_objective(theta: np.ndarray, c: np.ndarray, psi: float, sign: float = -1.0) -> float:
    """sum-of-scores term plus the (signed) distance-to-uniform term."""
    h = np.full(theta.shape[-1], 1.0 / theta.shape[-1])
    return float(theta @ c + sign * psi * np.sum((theta - h) ** 2))


def solve_theta_qp(
    c: np.ndarray,
    psi: float,
    qp_tolerance: float = 1e-9,
    literal_plus_penalty: bool = False,
) -> np.ndarray:
    """Maximize c.theta - psi * ||theta - uniform||^2 on the simplex.

    The maximizer is the simplex projection of uniform + c / (2 psi).  The
    KKT stationarity residual is verified against the tolerance.  In the
    literal-plus mode the distance term rewards moving away from uniform,
    the objective is convex, and the maximum sits on a simplex vertex.
    """
    c = np.asarray(c, float)
    height = c.size
    if psi <= 0:
        raise ValueError("psi must be positive")
    if literal_plus_penalty:
        # Convex maximization over a polytope peaks at a vertex; the distance
        # term is identical for all vertices, so only c decides.
        theta = np.zeros(height)
        theta[int(np.argmax(c))] = 1.0
        return theta
    uniform = np.full(height, 1.0 / height)
    theta = project_simplex(uniform + c / (2.0 * psi))
    s = theta.sum()
    if s > 0:
        theta = theta / s
    # KKT for min psi||th - v||^2 on the simplex: grad + nu*1 - mu = 0 with
    # mu >= 0 and mu.theta = 0.
    grad = 2.0 * psi * (theta - (uniform + c / (2.0 * psi)))
    active = theta > 0
    if active.any():
        nu = -grad[active].mean()
        mu = grad + nu
        residual = max(
            float(np.abs(grad[active] + nu).max() if active.any() else 0.0),
            float(max(0.0, -(mu[~active].min())) if (~active).any() else 0.0),
            abs(float(theta.sum() - 1.0)),
        )
    else:
        residual = abs(float(theta.sum() - 1.0))
    if residual > qp_tolerance:
        raise QpNotConverged(residual, qp_tolerance)
    return theta


def branch_linear_terms(model: RankingModel, corpus: Corpus, rows: np.ndarray) -> list[np.ndarray]:
    """Per leaf: sum over its documents of M_k'T diag(lam) x (the QP linear term)."""
    xn = model.normalize_counts(corpus.counts[rows])
    leaf_idx = corpus.leaf_index[rows]
    tree = model.tree
    lam = model.weights.lam
    out = []
    for k in range(tree.n_leaves):
        members = np.flatnonzero(leaf_idx == k)
        if members.size == 0:
            out.append(None)
            continue
        total = np.asarray(xn[members].sum(axis=0)).ravel() * lam
        out.append(model.centroids.branch_matrix(tree, k).T @ total)
    return out


def fit_theta_all(
    model: RankingModel, corpus: Corpus, rows: np.ndarray, config: GreedyConfig
) -> np.ndarray:
    """Solve the per-branch programs; a leaf without documents keeps uniform."""
    height = model.height
    psi = config.psi
    if psi is None:
        psi = 0.1 * max(1.0, rows.size / model.n_leaves)
    theta = np.full((model.n_leaves, height), 1.0 / height)
    for k, c in enumerate(branch_linear_terms(model, corpus, rows)):
        if c is None:
            continue
        theta[k] = solve_theta_qp(
            c, psi, config.qp_tolerance, config.literal_plus_penalty
        )
    return theta


def _auch_of(model: RankingModel, corpus: Corpus, rows: np.ndarray) -> float:
    xn = model.normalize_counts(corpus.counts[rows])
    scores = model.branch_scores_many(xn)
    pos = expert_positions(scores, corpus.leaf_index[rows])
    return auch_from_ranks(pos, model.n_leaves)


def fit_alpha_grid(
    corpus: Corpus,
    centroid_rows: np.ndarray,
    valid_rows: np.ndarray,
    theta: np.ndarray,
    grids: list[list[float]],
    weight_passes: int = 2,
) -> tuple[np.ndarray, RankingModel, float]:
    """Exhaustive grid search for alpha at fixed theta.

    Candidates are visited in lexicographic order and kept only on strict
    improvement, so ties resolve to the smallest alpha.  Every candidate
    rebuilds the model from the centroid rows before scoring the validation
    rows.
    """
    best = None
    for cand in itertools.product(*grids):
        alpha = np.asarray(cand, float)
        model = build_model(corpus, centroid_rows, alpha, theta, weight_passes)
        score = _auch_of(model, corpus, valid_rows)
        if best is None or score > best[2]:
            best = (alpha, model, score)
    assert best is not None
    return best


@dataclass
class GreedyHistory:
    """Per-outer-iteration AUCH trace on the combined validation rows."""

    auch: list[float] = field(default_factory=list)
    alpha: list[list[float]] = field(default_factory=list)
    accepted: list[bool] = field(default_factory=list)


def fit_greedy(
    corpus: Corpus, partition: Partition, config: GreedyConfig | None = None
) -> tuple[RankingModel, GreedyHistory]:
    """Alternate the alpha grid search and the theta QPs, keeping the best iterate.

    An iterate is accepted only if the area score on the combined validation
    rows does not decrease; the loop stops early once no improvement is made.
    """
    config = config or GreedyConfig()
    if not (partition.v0 and partition.v1 and partition.v2):
        raise ValueError("greedy training needs nonempty V0, V1 and V2 sets")
    tree = corpus.tree
    v0 = corpus.rows_for_ids(partition.v0)
    v1 = corpus.rows_for_ids(partition.v1)
    v2 = corpus.rows_for_ids(partition.v2)
    v12 = np.concatenate([v1, v2])

    alpha, theta = init_parameters(tree.height, tree.n_leaves)
    model = build_model(corpus, v0, alpha, theta, config.weight_passes, method="greedy")
    iota_nonzero = [bool(np.any(model.weights.iota[:, lvl] > 0)) for lvl in range(tree.height)]
    grids = config.grids_for(tree.height, iota_nonzero)

    history = GreedyHistory()
    best_model = model
    best_auch = _auch_of(model, corpus, v12)
    history.auch.append(best_auch)
    history.alpha.append([float(a) for a in alpha])
    history.accepted.append(True)

    for it in range(config.max_outer_iters):
        alpha, model, _ = fit_alpha_grid(
            corpus, v0, v1, best_model.theta, grids, config.weight_passes
        )
        theta = fit_theta_all(model, corpus, v2, config)
        candidate = RankingModel(
            corpus.dictionary, tree, model.weights, model.centroids, theta, "greedy"
        )
        score = _auch_of(candidate, corpus, v12)
        improved = score > best_auch
        history.auch.append(score)
        history.alpha.append([float(a) for a in alpha])
        history.accepted.append(score >= best_auch)
        log.info("outer iteration %d: alpha=%s validation score %.4f", it + 1, alpha, score)
        if score >= best_auch:
            best_model = candidate
            best_auch = max(best_auch, score)
        if not improved:
            break
    best_model.meta.update(
        {
            "psi": config.psi,
            "max_outer_iters": config.max_outer_iters,
            "literal_plus_penalty": config.literal_plus_penalty,
            "validation_auch": best_auch,
        }
    )
    return best_model, history
