"""Figure rendering for the report path.

Every CLI report writes a delimited table first; these helpers render the
matching matplotlib figures next to it (envelope curve, cluster-similarity
heatmaps, training traces).  Rendering is file-only: the Agg backend is
forced so no display is ever needed.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import EvalReport


def render_envelope(report: EvalReport, path, title: str = "Cumulative rank envelope") -> None:
    """Step curve: fraction of documents whose expert leaf ranked within top k."""
    fig, ax = plt.subplots(figsize=(6, 4))
    k = np.arange(1, report.n_leaves + 1)
    ax.step(k, report.envelope(), where="post", lw=2)
    ax.axhline(1.0, color="grey", lw=0.8, ls="--")
    ax.set_xlabel("rank cutoff k")
    ax.set_ylabel("fraction of documents")
    ax.set_ylim(0, 1.05)
    ax.set_xlim(1, report.n_leaves)
    ax.set_title(f"{title} (area {report.auch:.3f})")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_similarity_heatmaps(
    before: np.ndarray, after: np.ndarray, path, labels=("unit weights", "trained weights")
) -> None:
    """Side-by-side pairwise cluster-similarity matrices of one level."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    vmax = max(before.max(), after.max())
    for ax, mat, label in zip(axes, (before, after), labels):
        im = ax.imshow(mat, vmin=0.0, vmax=vmax, cmap="viridis")
        ax.set_title(label)
        ax.set_xlabel("cluster")
        ax.set_ylabel("cluster")
    fig.colorbar(im, ax=list(axes), shrink=0.85)
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_greedy_history(auch_values, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(len(auch_values)), auch_values, marker="o")
    ax.set_xlabel("outer iteration")
    ax.set_ylabel("validation area score")
    ax.set_title("Alternating training progress")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_vb_trace(surrogate_values, max_deltas, path) -> None:
    """Surrogate objective and parameter movement per EM iteration."""
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(6, 6), sharex=True)
    ax1.plot(range(len(surrogate_values)), surrogate_values, marker=".")
    ax1.set_ylabel("surrogate objective")
    ax2.semilogy(range(1, len(max_deltas) + 1), np.maximum(max_deltas, 1e-16), marker=".")
    ax2.set_ylabel("max parameter change")
    ax2.set_xlabel("iteration")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
