"""Versioned model snapshot files.

A snapshot is a single JSON document carrying the dictionary, the tree, the
word weights, the per-branch level weights and the centroids (sparse
triplets).  A variational fit additionally embeds its factor parameters and
the frozen-frame assets needed to score unseen documents.  Snapshots are
written atomically (temp file + rename) so a reader never observes a partial
file.
"""

from __future__ import annotations

import json
import os
import tempfile
from datetime import datetime, timezone

import numpy as np

from .corpus import Dictionary, load_hierarchy
from .similarity import CentroidSet, RankingModel, WordWeights
from .vb import VBPredictor

FORMAT = "branchrank-model"
VERSION = 1


class SnapshotError(ValueError):
    pass


def _centroids_to_triplets(centroids: CentroidSet) -> list:
    triplets = []
    for lvl, means in enumerate(centroids.levels, start=1):
        for k, row in enumerate(means):
            nz = np.flatnonzero(row)
            for m in nz:
                triplets.append([lvl, int(k), int(m), float(row[m])])
    return triplets


def _centroids_from_triplets(triplets, level_counts, n_words) -> CentroidSet:
    levels = [np.zeros((count, n_words)) for count in level_counts]
    for lvl, k, m, value in triplets:
        levels[lvl - 1][k, m] = value
    return CentroidSet(tuple(levels))


def save_model(model: RankingModel, path, vb: VBPredictor | None = None) -> None:
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "created_utc": datetime.now(timezone.utc).isoformat(),
        "method": model.method,
        "meta": model.meta,
        "dictionary": list(model.dictionary.words),
        "tree": model.tree.to_nested(),
        "level_counts": model.tree.level_counts,
        "alpha": model.weights.alpha.tolist(),
        "iota": model.weights.iota.tolist(),
        "lambda": model.weights.lam.tolist(),
        "theta": model.theta.tolist(),
        "centroids": _centroids_to_triplets(model.centroids),
        "vb": None,
    }
    if vb is not None:
        payload["vb"] = {
            "alpha0": vb.alpha0.tolist(),
            "m_prime": vb.m_prime.tolist(),
            "iota": vb.iota.tolist(),
            "m_branch": vb.m_branch.tolist(),
            "unlabeled_ids": list(vb.unlabeled_ids),
            "p_rows": vb.p_rows.tolist() if vb.p_rows is not None else None,
        }
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump(payload, f)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_model(path) -> tuple[RankingModel, VBPredictor | None]:
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    if payload.get("format") != FORMAT:
        raise SnapshotError(f"{path} is not a model snapshot")
    if payload.get("version") != VERSION:
        raise SnapshotError(f"unsupported snapshot version {payload.get('version')}")
    dictionary = Dictionary.from_words(payload["dictionary"])
    tree = load_hierarchy(payload["tree"])
    weights = WordWeights(
        alpha=np.asarray(payload["alpha"], float),
        iota=np.asarray(payload["iota"], float),
        lam=np.asarray(payload["lambda"], float),
    )
    centroids = _centroids_from_triplets(
        payload["centroids"], payload["level_counts"], len(dictionary)
    )
    model = RankingModel(
        dictionary,
        tree,
        weights,
        centroids,
        np.asarray(payload["theta"], float),
        method=payload.get("method", "init"),
        meta=payload.get("meta", {}),
    )
    vb = None
    if payload.get("vb"):
        raw = payload["vb"]
        vb = VBPredictor(
            iota=np.asarray(raw["iota"], float),
            m_branch=np.asarray(raw["m_branch"], float),
            alpha0=np.asarray(raw["alpha0"], float),
            m_prime=np.asarray(raw["m_prime"], float),
            unlabeled_ids=tuple(raw.get("unlabeled_ids", ())),
            p_rows=np.asarray(raw["p_rows"], float) if raw.get("p_rows") else None,
        )
    return model, vb
