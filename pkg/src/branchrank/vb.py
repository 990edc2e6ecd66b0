"""Variational EM for the probabilistic branch-ranking model.

The class likelihood is the softmax of per-branch scores.  The score is
linear in both the entropy-weight coefficients (through the diagonal word
weighting) and the branch level weights, so after bounding the softmax
denominator by its tangent at a variational point every factor update has a
closed form.  The factors are a Gaussian over the weight coefficients, a
Gaussian per branch over level weights, a Normal-Wishart per branch over the
level-weight mean and precision, and independent Bernoullis over unlabeled
document classes.

Geometry (document normalization, cluster means, entropy features) is frozen
at unit word weights for the whole EM run: the expected weighting enters
scores only linearly, which is what keeps the updates conjugate.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.special import digamma, expit, logsumexp, multigammaln

from .corpus import Corpus
from .similarity import (
    LAMBDA_MIN,
    CentroidSet,
    cluster_means,
    entropy_features,
    normalize_rows,
)

log = logging.getLogger(__name__)


class SingularPrecision(RuntimeError):
    pass


class NotConverged(RuntimeError):
    def __init__(self, message: str, state: "VBState", trace: "EmTrace"):
        super().__init__(message)
        self.state = state
        self.trace = trace


def softmax_prob(scores: np.ndarray) -> np.ndarray:
    """Stable softmax along the last axis."""
    scores = np.asarray(scores, float)
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_likelihood(z_onehot: np.ndarray, scores: np.ndarray) -> float:
    """Sum over labeled documents of the log softmax mass on the expert class."""
    z_onehot = np.asarray(z_onehot, float)
    log_probs = scores - logsumexp(scores, axis=-1, keepdims=True)
    return float(np.sum(z_onehot * log_probs))


def softmax_denominator_bound(x: np.ndarray, xi: np.ndarray) -> float:
    """Tangent upper bound on 1 / sum(exp(x)), parameterized by the point xi.

    Exponentiating the tangent-plane bound of the concave -log-sum-exp gives
    (1/g(xi)) * exp(sum_k softmax(xi)_k (xi_k - x_k)) >= 1/g(x), with
    equality when x = xi.
    """
    x = np.asarray(x, float)
    xi = np.asarray(xi, float)
    log_g_xi = logsumexp(xi)
    sm = np.exp(xi - log_g_xi)
    return float(np.exp(-log_g_xi + np.sum(sm * (xi - x))))


@dataclass(frozen=True)
class VBHyperparams:
    """Priors: alpha ~ N(0, I/a); theta_k ~ N(m_k, V_k^-1) with a
    Normal-Wishart prior N(m0, (b V_k)^-1) W(W_prior, nu) on (m_k, V_k)."""

    a: float
    b: float
    nu: float
    w_prior: np.ndarray  # (h, h) SPD
    m0: np.ndarray  # (h,)

    @classmethod
    def default(cls, height: int, a: float = 1.0, b: float = 1.0, nu: float | None = None):
        """Unit diagonal with -1/(2h) off-diagonal couples level weights
        negatively: raising one level's weight lowers the others."""
        h = height
        w = np.full((h, h), -1.0 / (2.0 * h))
        np.fill_diagonal(w, 1.0)
        return cls(
            a=a,
            b=b,
            nu=float(nu if nu is not None else h + 1),
            w_prior=w,
            m0=np.full(h, 1.0 / h),
        )

    def validate(self, height: int) -> None:
        if self.a <= 0 or self.b <= 0:
            raise ValueError("a and b must be positive")
        if self.nu <= height - 1:
            raise ValueError("nu must exceed h - 1")
        np.linalg.cholesky(self.w_prior)


@dataclass
class VBProblem:
    """Frozen data the EM iterates over: unit-weight geometry plus features."""

    x_lab: sparse.csr_matrix  # (N, V) unit-weight normalized
    leaf_idx: np.ndarray  # (N,)
    x_unl: sparse.csr_matrix  # (T, V)
    m_branch: np.ndarray  # (K, V, h) branch mean matrices
    iota: np.ndarray  # (V, h)
    centroids: CentroidSet
    tree: object
    dictionary: object
    unlabeled_ids: tuple[str, ...] = ()

    @property
    def n_labeled(self) -> int:
        return self.x_lab.shape[0]

    @property
    def n_unlabeled(self) -> int:
        return self.x_unl.shape[0]

    @property
    def n_leaves(self) -> int:
        return self.m_branch.shape[0]

    @property
    def height(self) -> int:
        return self.m_branch.shape[2]

    def z_onehot(self) -> np.ndarray:
        z = np.zeros((self.n_labeled, self.n_leaves))
        z[np.arange(self.n_labeled), self.leaf_idx] = 1.0
        return z

    @classmethod
    def build(cls, corpus: Corpus, labeled_rows: np.ndarray, unlabeled_rows: np.ndarray):
        tree = corpus.tree
        ones = np.ones(len(corpus.dictionary))
        x_lab, _ = normalize_rows(corpus.counts[labeled_rows], ones)
        x_unl, _ = normalize_rows(corpus.counts[unlabeled_rows], ones)
        leaf_idx = corpus.leaf_index[labeled_rows]
        if (leaf_idx < 0).any():
            raise ValueError("labeled rows must all carry a leaf")
        cents = cluster_means(x_lab, leaf_idx, tree)
        iota = entropy_features(cents)
        m_branch = np.stack(
            [cents.branch_matrix(tree, k) for k in range(tree.n_leaves)], axis=0
        )
        return cls(
            x_lab=x_lab,
            leaf_idx=leaf_idx,
            x_unl=x_unl,
            m_branch=m_branch,
            iota=iota,
            centroids=cents,
            tree=tree,
            dictionary=corpus.dictionary,
            unlabeled_ids=tuple(corpus.docs[i].id for i in unlabeled_rows),
        )


@dataclass
class VBState:
    """All variational factor parameters.

    nu_prime and b_prime are fixed at nu+1 and b+1 by the single pseudo
    observation each branch's weight vector contributes; they never change
    after initialization.
    """

    alpha0: np.ndarray  # (h,)
    m0k: np.ndarray  # (K, h) Normal-Wishart means
    wk: np.ndarray  # (K, h, h) Wishart scale matrices
    wk_inv: np.ndarray  # (K, h, h) their inverses (the directly updated form)
    m_prime: np.ndarray  # (K, h) branch weight posterior means
    theta_cov: np.ndarray  # (K, h, h) branch weight posterior covariances
    nu_prime: float
    b_prime: float
    xi: np.ndarray  # (N, K) variational points, labeled
    xi_tilde: np.ndarray  # (T, K) variational points, unlabeled
    p: np.ndarray  # (T, K) Bernoulli class probabilities
    spd_repairs: int = 0

    def copy(self) -> "VBState":
        return copy.deepcopy(self)


def expected_lambda(alpha0: np.ndarray, iota: np.ndarray) -> np.ndarray:
    """Expected diagonal word weighting 1 + alpha0 . iota_m, floored like the
    deterministic path so the scoring stays positive."""
    lam = 1.0 + iota @ alpha0
    return np.where(lam < LAMBDA_MIN, LAMBDA_MIN, lam)


def _score_projection(problem: VBProblem, state: VBState) -> np.ndarray:
    """(V, K) matrix whose column k is lam~ * (M_k @ m_prime_k)."""
    lam = expected_lambda(state.alpha0, problem.iota)
    u = np.einsum("kvh,kh->kv", problem.m_branch, state.m_prime)
    return (u * lam[None, :]).T


def expected_scores(problem: VBProblem, state: VBState) -> tuple[np.ndarray, np.ndarray]:
    """E[score] matrices for labeled and unlabeled documents."""
    proj = _score_projection(problem, state)
    e_lab = np.asarray(problem.x_lab @ proj)
    e_unl = np.asarray(problem.x_unl @ proj)
    return e_lab, e_unl


def init_state(problem: VBProblem, hyper: VBHyperparams) -> VBState:
    """EM starting point: prior parameters, tangent points at the prior scores."""
    hyper.validate(problem.height)
    k, h = problem.n_leaves, problem.height
    nu_prime = hyper.nu + 1.0
    b_prime = hyper.b + 1.0
    wk = np.broadcast_to(hyper.w_prior, (k, h, h)).copy()
    wk_inv = np.linalg.inv(wk)
    m0k = np.broadcast_to(hyper.m0, (k, h)).copy()
    m_prime = m0k.copy()
    theta_cov = wk_inv / nu_prime
    state = VBState(
        alpha0=np.zeros(h),
        m0k=m0k,
        wk=wk,
        wk_inv=wk_inv,
        m_prime=m_prime,
        theta_cov=theta_cov,
        nu_prime=nu_prime,
        b_prime=b_prime,
        xi=np.zeros((problem.n_labeled, k)),
        xi_tilde=np.zeros((problem.n_unlabeled, k)),
        p=np.full((problem.n_unlabeled, k), 1.0 / k),
    )
    state.xi, state.xi_tilde = expected_scores(problem, state)
    return state


def theta_moments(state: VBState, leaf_k: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean and second moment of the branch weight factor for one leaf."""
    try:
        np.linalg.cholesky(state.wk[leaf_k])
    except np.linalg.LinAlgError as e:
        raise SingularPrecision(f"scale matrix for leaf {leaf_k} is not SPD") from e
    mean = state.m_prime[leaf_k]
    second = state.theta_cov[leaf_k] + np.outer(mean, mean)
    return mean, second


def responsibilities(problem: VBProblem, state: VBState) -> tuple[np.ndarray, np.ndarray]:
    """Bound-linearization residuals: label indicators (or their Bernoulli
    expectations) minus the tangent softmax mass, per document and branch."""
    zhat = problem.z_onehot() - softmax_prob(state.xi)
    if problem.n_unlabeled:
        zzhat = state.p - softmax_prob(state.xi_tilde) * state.p.sum(axis=1, keepdims=True)
    else:
        zzhat = np.zeros((0, problem.n_leaves))
    return zhat, zzhat


def _spd_repair(mat: np.ndarray, floor: float = 1e-8) -> tuple[np.ndarray, bool]:
    sym = 0.5 * (mat + mat.T)
    try:
        np.linalg.cholesky(sym)
        return sym, False
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(sym)
        vals = np.maximum(vals, floor)
        return (vecs * vals) @ vecs.T, True


def update_hyper_factors(
    problem: VBProblem,
    state: VBState,
    hyper: VBHyperparams,
    wk_update: str = "subtract",
) -> None:
    """Refresh the Normal-Wishart factors and the weight-coefficient mean.

    The scale update subtracts the b' m0k m0k^T term by default, the
    coordinate maximizer of the bound (guaranteed SPD); ``wk_update='add'``
    keeps the additive variant for comparison.  Any definiteness loss is
    repaired by symmetrizing and flooring eigenvalues, with a warning.
    """
    if wk_update not in ("subtract", "add"):
        raise ValueError("wk_update must be 'subtract' or 'add'")
    k = problem.n_leaves
    means = state.m_prime
    seconds = state.theta_cov + np.einsum("kh,kg->khg", means, means)

    state.m0k = (means + hyper.b * hyper.m0[None, :]) / state.b_prime
    sign = -1.0 if wk_update == "subtract" else 1.0
    prior_outer = hyper.b * np.outer(hyper.m0, hyper.m0)
    w_prior_inv = np.linalg.inv(hyper.w_prior)
    repaired = 0
    for j in range(k):
        wk_inv = (
            seconds[j]
            + prior_outer
            + sign * state.b_prime * np.outer(state.m0k[j], state.m0k[j])
            + w_prior_inv
        )
        wk_inv, fixed = _spd_repair(wk_inv)
        repaired += int(fixed)
        state.wk_inv[j] = wk_inv
        state.wk[j] = np.linalg.inv(wk_inv)
    if repaired:
        state.spd_repairs += repaired
        log.warning("SPD repair applied to %d scale matrices", repaired)

    zhat, zzhat = responsibilities(problem, state)
    rc = np.asarray(problem.x_lab.T @ zhat)  # (V, K)
    if problem.n_unlabeled:
        rc = rc + np.asarray(problem.x_unl.T @ zzhat)
    u = np.einsum("kvh,kh->kv", problem.m_branch, means)  # (K, V)
    weighted = (u * rc.T).sum(axis=0)  # (V,)
    state.alpha0 = (problem.iota.T @ weighted) / hyper.a


def update_theta_factor(problem: VBProblem, state: VBState) -> None:
    """Refresh each branch's weight posterior given the current scale matrices."""
    zhat, zzhat = responsibilities(problem, state)
    rc = np.asarray(problem.x_lab.T @ zhat)
    if problem.n_unlabeled:
        rc = rc + np.asarray(problem.x_unl.T @ zzhat)
    lam = expected_lambda(state.alpha0, problem.iota)
    r = np.einsum("kvh,vk->kh", problem.m_branch, lam[:, None] * rc)
    state.m_prime = state.m0k + np.einsum("khg,kg->kh", state.wk_inv, r) / state.nu_prime
    state.theta_cov = state.wk_inv / state.nu_prime


def update_labels(problem: VBProblem, state: VBState) -> None:
    """Refresh the Bernoulli class probabilities of the unlabeled documents."""
    if not problem.n_unlabeled:
        return
    _, e_unl = expected_scores(problem, state)
    sm = softmax_prob(state.xi_tilde)
    row_const = np.sum(sm * (state.xi_tilde - e_unl), axis=1, keepdims=True)
    zeta = e_unl + row_const
    log_g = logsumexp(state.xi_tilde, axis=1, keepdims=True)
    state.p = expit(zeta - log_g)


def update_xi(problem: VBProblem, state: VBState) -> None:
    """Move the tangent points to the current expected scores (tightest bound)."""
    state.xi, state.xi_tilde = expected_scores(problem, state)


def surrogate(problem: VBProblem, state: VBState, hyper: VBHyperparams) -> float:
    """The bound-substituted variational objective at the current factors.

    Every closed-form update is the exact maximizer of this expression over
    its own factor, which is what the tiny-instance oracle checks.
    """
    h = problem.height
    nu, nu_p, b, b_p = hyper.nu, state.nu_prime, hyper.b, state.b_prime
    e_lab, e_unl = expected_scores(problem, state)

    sm = softmax_prob(state.xi)
    log_g = logsumexp(state.xi, axis=1)
    z = problem.z_onehot()
    total = float(
        np.sum(z * e_lab) - log_g.sum() - np.sum(sm * (e_lab - state.xi))
    )

    if problem.n_unlabeled:
        sm_u = softmax_prob(state.xi_tilde)
        log_g_u = logsumexp(state.xi_tilde, axis=1)
        row_const = np.sum(sm_u * (state.xi_tilde - e_unl), axis=1)
        zeta = e_unl + row_const[:, None]
        total += float(np.sum(state.p * (zeta - log_g_u[:, None])))
        pc = np.clip(state.p, 1e-300, 1.0 - 1e-16)
        total += float(-np.sum(pc * np.log(pc) + (1 - pc) * np.log1p(-pc)))

    w_prior_inv = np.linalg.inv(hyper.w_prior)
    sign, logdet_w = np.linalg.slogdet(hyper.w_prior)
    assert sign > 0
    dig = sum(digamma((nu_p + 1 - i) / 2.0) for i in range(1, h + 1))
    for k in range(problem.n_leaves):
        sign_k, logdet_wk = np.linalg.slogdet(state.wk[k])
        if sign_k <= 0:
            raise SingularPrecision(f"scale matrix for leaf {k} lost definiteness")
        e_logdet_v = dig + h * np.log(2.0) + logdet_wk
        d_theta = state.m_prime[k] - state.m0k[k]
        d_m = state.m0k[k] - hyper.m0
        sign_s, logdet_s = np.linalg.slogdet(state.theta_cov[k])
        if sign_s <= 0:
            raise SingularPrecision(f"weight covariance for leaf {k} lost definiteness")
        # branch-weight factor: cross entropy with its conditional plus entropy
        total += 0.5 * e_logdet_v - 0.5 * (
            nu_p * d_theta @ state.wk[k] @ d_theta
            + nu_p * np.trace(state.wk[k] @ state.theta_cov[k])
            + h / b_p
        )
        total += 0.5 * logdet_s + 0.5 * h
        # Normal-Wishart factor against its prior
        total += 0.5 * (h * np.log(b) + e_logdet_v) - 0.5 * b * (
            nu_p * d_m @ state.wk[k] @ d_m + h / b_p
        )
        total += (
            0.5 * (nu - h - 1) * e_logdet_v
            - 0.5 * nu_p * np.trace(w_prior_inv @ state.wk[k])
            - 0.5 * nu * h * np.log(2.0)
            - 0.5 * nu * logdet_w
            - multigammaln(nu / 2.0, h)
        )
        total += -0.5 * h * np.log(b_p) - 0.5 * e_logdet_v + 0.5 * h
        total += (
            -0.5 * (nu_p - h - 1) * e_logdet_v
            + 0.5 * nu_p * h
            + 0.5 * nu_p * h * np.log(2.0)
            + 0.5 * nu_p * logdet_wk
            + multigammaln(nu_p / 2.0, h)
        )
    total += -0.5 * hyper.a * float(state.alpha0 @ state.alpha0)
    return total


@dataclass
class EmTrace:
    surrogate: list[float] = field(default_factory=list)
    max_delta: list[float] = field(default_factory=list)
    alpha0: list[list[float]] = field(default_factory=list)
    converged: bool = False
    iterations: int = 0
    wk_update: str = "subtract"


def fit_em(
    problem: VBProblem,
    hyper: VBHyperparams | None = None,
    max_iters: int = 200,
    tol: float = 1e-5,
    wk_update: str = "subtract",
) -> tuple[VBState, EmTrace]:
    """Run the coordinate updates until the factor parameters stop moving.

    Convergence is the maximum absolute change across the weight-coefficient
    mean, every branch-weight mean, and every class probability.  The
    surrogate objective is recorded once per iteration, after the tangent
    points have been re-tightened.  Raises NotConverged (carrying the last
    state and the trace) when the limit is hit first.
    """
    hyper = hyper or VBHyperparams.default(problem.height)
    state = init_state(problem, hyper)
    trace = EmTrace(wk_update=wk_update)
    trace.surrogate.append(surrogate(problem, state, hyper))
    for it in range(max_iters):
        prev_alpha = state.alpha0.copy()
        prev_m_prime = state.m_prime.copy()
        prev_p = state.p.copy()
        update_hyper_factors(problem, state, hyper, wk_update)
        update_theta_factor(problem, state)
        update_labels(problem, state)
        update_xi(problem, state)
        delta = max(
            float(np.max(np.abs(state.alpha0 - prev_alpha))),
            float(np.max(np.abs(state.m_prime - prev_m_prime))),
            float(np.max(np.abs(state.p - prev_p))) if state.p.size else 0.0,
        )
        trace.surrogate.append(surrogate(problem, state, hyper))
        trace.max_delta.append(delta)
        trace.alpha0.append([float(v) for v in state.alpha0])
        trace.iterations = it + 1
        if delta < tol:
            trace.converged = True
            log.info("EM converged after %d iterations (delta %.2e)", it + 1, delta)
            return state, trace
    raise NotConverged(
        f"EM did not reach tol {tol:g} within {max_iters} iterations", state, trace
    )


@dataclass
class VBPredictor:
    """Everything needed to score unseen documents in the frozen frame."""

    iota: np.ndarray
    m_branch: np.ndarray  # (K, V, h)
    alpha0: np.ndarray
    m_prime: np.ndarray  # (K, h)
    unlabeled_ids: tuple[str, ...] = ()
    p_rows: np.ndarray | None = None  # (T, K) fitted queue probabilities

    @classmethod
    def from_fit(cls, problem: VBProblem, state: VBState) -> "VBPredictor":
        return cls(
            iota=problem.iota,
            m_branch=problem.m_branch,
            alpha0=state.alpha0,
            m_prime=state.m_prime,
            unlabeled_ids=problem.unlabeled_ids,
            p_rows=state.p.copy() if state.p.size else None,
        )

    def _expected_row(self, counts) -> np.ndarray:
        ones = np.ones(self.m_branch.shape[1])
        if sparse.issparse(counts):
            xn, _ = normalize_rows(counts.tocsr(), ones)
            xn = np.asarray(xn.todense()).ravel()
        else:
            x = np.asarray(counts, float)
            n = np.sqrt((x * x).sum())
            xn = x / n if n > 0 else x
        lam = expected_lambda(self.alpha0, self.iota)
        u = np.einsum("kvh,kh->kv", self.m_branch, self.m_prime)
        return (u * lam[None, :]) @ xn

    def predict_evidence(self, counts) -> np.ndarray:
        """Class probabilities via the fitted joint posterior approximation.

        For an unseen document the tangent points sit at its expected scores,
        where the bound correction vanishes, leaving a one-shot evaluation.
        The row is normalized for ranking and display.
        """
        if (
            self.p_rows is not None
            and isinstance(counts, str)
            and counts in self.unlabeled_ids
        ):
            row = self.p_rows[self.unlabeled_ids.index(counts)]
        else:
            e = self._expected_row(counts)
            row = expit(e - logsumexp(e))
        total = row.sum()
        return row / total if total > 0 else np.full_like(row, 1.0 / row.size)

    def predict_map(self, counts) -> np.ndarray:
        """Plug-in estimate: softmax of the scores at the posterior means."""
        return softmax_prob(self._expected_row(counts))
