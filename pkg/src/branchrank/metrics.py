"""Ranking quality metrics over expert-cluster ranks.

The central quantity is the cumulative histogram of expert ranks: entry k
counts the documents whose expert cluster was ranked within the top k.  Its
normalized area (called AUCH in reports) is 1 exactly when every expert
cluster is ranked first.  DCG and precision-at-k specialize to the single
relevant cluster per document that an expert confirmation produces.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .corpus import UnknownLeaf
from .similarity import Ranking


class IoFailure(RuntimeError):
    pass


def expert_rank(ranked: Ranking, expert_leaf: int) -> int:
    """1-based position of the expert's leaf in the permutation."""
    try:
        return ranked.position_of(expert_leaf)
    except ValueError as e:
        raise UnknownLeaf(str(e)) from e


def cumulative_histogram(ranks, n_leaves: int) -> np.ndarray:
    """counts[k-1] = number of documents whose expert rank is <= k."""
    ranks = np.asarray(ranks, dtype=np.int64)
    if ranks.size and (ranks.min() < 1 or ranks.max() > n_leaves):
        raise ValueError("ranks must lie in [1, n_leaves]")
    per_rank = np.bincount(ranks, minlength=n_leaves + 1)[1:]
    return np.cumsum(per_rank)


def auch_from_ranks(ranks, n_leaves: int) -> float:
    """Normalized area under the cumulative rank histogram, in [0, 1]."""
    ranks = np.asarray(ranks, dtype=np.int64)
    counts = cumulative_histogram(ranks, n_leaves)
    return float(counts.sum() / (n_leaves * ranks.size))


def auch_rank_identity(ranks, n_leaves: int) -> float:
    """Equivalent form: mean over documents of (K - rank + 1) / K."""
    ranks = np.asarray(ranks, dtype=np.int64)
    return float(np.mean((n_leaves - ranks + 1) / n_leaves))


def dcg_at(rank: int, k: int) -> float:
    """Gain of the single relevant cluster at the given rank, cut off at k.

    Rank 1 contributes exactly 1; ranks 2..k contribute 1/log2(rank);
    anything beyond the cutoff contributes nothing.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if rank == 1:
        return 1.0
    if rank <= k:
        return 1.0 / float(np.log2(rank))
    return 0.0


def p_at(rank: int, k: int) -> float:
    """Precision at k with one relevant cluster: 1/k if it made the cutoff."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return 1.0 / k if rank <= k else 0.0


@dataclass
class EvalReport:
    """Per-run ranking quality summary, the payload of reports and /metrics."""

    n_docs: int
    n_leaves: int
    histogram: np.ndarray
    auch: float
    dcg: dict[int, float]
    p: dict[int, float]
    ranks: dict[str, int] = field(default_factory=dict)
    extras: dict[str, float] = field(default_factory=dict)

    def envelope(self) -> np.ndarray:
        """Plot-ready y column: fraction of documents ranked within top k."""
        return self.histogram / max(self.n_docs, 1)

    def to_dict(self) -> dict:
        return {
            "n_docs": self.n_docs,
            "n_leaves": self.n_leaves,
            "histogram": [int(c) for c in self.histogram],
            "envelope": [float(v) for v in self.envelope()],
            "auch": self.auch,
            "dcg": {str(k): v for k, v in self.dcg.items()},
            "p": {str(k): v for k, v in self.p.items()},
            "extras": dict(self.extras),
        }


def evaluate_ranks(
    ids, ranks, n_leaves: int, cutoffs=(1, 3, 5, 10)
) -> EvalReport:
    """Aggregate expert ranks into the full report."""
    ranks = np.asarray(ranks, dtype=np.int64)
    ids = list(ids)
    if len(ids) != ranks.size:
        raise ValueError("ids and ranks length mismatch")
    cutoffs = [k for k in cutoffs if 1 <= k <= n_leaves]
    return EvalReport(
        n_docs=ranks.size,
        n_leaves=n_leaves,
        histogram=cumulative_histogram(ranks, n_leaves),
        auch=auch_from_ranks(ranks, n_leaves),
        dcg={k: float(np.mean([dcg_at(int(r), k) for r in ranks])) for k in cutoffs},
        p={k: float(np.mean([p_at(int(r), k) for r in ranks])) for k in cutoffs},
        ranks=dict(zip(ids, (int(r) for r in ranks))),
    )


def pairwise_cluster_similarity(centroid_level: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Weighted cosine similarity between every pair of a level's means.

    Symmetric with a unit diagonal (self-similarity of a nonzero mean is 1).
    """
    weighted = centroid_level * np.sqrt(lam)[None, :]
    norms = np.linalg.norm(weighted, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = weighted / safe[:, None]
    sim = unit @ unit.T
    return np.clip(sim, -1.0, 1.0)


def separation_ratio(similarity: np.ndarray) -> float:
    """Mean on-diagonal over mean off-diagonal similarity of a level."""
    k = similarity.shape[0]
    if k < 2:
        return float("inf")
    off = similarity[~np.eye(k, dtype=bool)]
    return float(np.mean(np.diag(similarity)) / np.mean(off))


def emit_report(report: EvalReport, path) -> None:
    """Write the report as a section,key,value table.

    Floats are written with repr so that reading the file back reproduces
    every value bit-exactly.
    """
    try:
        with open(path, "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f)
            w.writerow(["section", "key", "value"])
            w.writerow(["meta", "n_docs", report.n_docs])
            w.writerow(["meta", "n_leaves", report.n_leaves])
            w.writerow(["auch", "", repr(report.auch)])
            for k, c in enumerate(report.histogram, start=1):
                w.writerow(["histogram", k, int(c)])
            for k, v in enumerate(report.envelope(), start=1):
                w.writerow(["envelope", k, repr(float(v))])
            for k in sorted(report.dcg):
                w.writerow(["dcg", k, repr(report.dcg[k])])
            for k in sorted(report.p):
                w.writerow(["p_at", k, repr(report.p[k])])
            for key in sorted(report.extras):
                w.writerow(["extra", key, repr(report.extras[key])])
            for doc_id in report.ranks:
                w.writerow(["rank", doc_id, report.ranks[doc_id]])
    except OSError as e:
        raise IoFailure(f"cannot write report to {path}: {e}") from e


def read_report(path) -> EvalReport:
    """Read back a report table written by emit_report."""
    rows: dict[str, list[tuple[str, str]]] = {}
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            reader = csv.reader(f)
            header = next(reader)
            if header != ["section", "key", "value"]:
                raise IoFailure(f"{path} is not a report table")
            for section, key, value in reader:
                rows.setdefault(section, []).append((key, value))
    except OSError as e:
        raise IoFailure(f"cannot read report from {path}: {e}") from e
    meta = dict(rows.get("meta", []))
    hist = [int(v) for _, v in sorted(rows.get("histogram", []), key=lambda kv: int(kv[0]))]
    return EvalReport(
        n_docs=int(meta["n_docs"]),
        n_leaves=int(meta["n_leaves"]),
        histogram=np.asarray(hist, dtype=np.int64),
        auch=float(rows["auch"][0][1]),
        dcg={int(k): float(v) for k, v in rows.get("dcg", [])},
        p={int(k): float(v) for k, v in rows.get("p_at", [])},
        ranks={k: int(v) for k, v in rows.get("rank", [])},
        extras={k: float(v) for k, v in rows.get("extra", [])},
    )
