"""Synthetic three-level corpora with planted keyword structure.

Each level-2 node owns a pool of keywords shared by its leaves, each leaf
owns its own pool, and all documents draw from a common noise pool.  A small
cross-leaf contamination draw makes flat leaf ranking genuinely harder than
ranking the level-2 node first.  Everything is deterministic in the seed.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass

import numpy as np

LETTERS = string.ascii_lowercase


def _word(prefix: str, i: int) -> str:
    return f"{prefix}{LETTERS[i // 26]}{LETTERS[i % 26]}"


@dataclass(frozen=True)
class SynthSpec:
    n_areas: int = 4
    leaves_per_area: int = 4
    docs_per_leaf: int = 30
    n_unlabeled: int = 60
    leaf_kw: int = 12  # keywords owned by each leaf
    area_kw: int = 15  # keywords owned by each area
    n_noise: int = 150
    leaf_draws: int = 16  # tokens drawn from the leaf pool per document
    area_draws: int = 18
    noise_draws: int = 26
    contamination_draws: int = 7  # tokens drawn from one random other leaf

    @property
    def n_leaves(self) -> int:
        return self.n_areas * self.leaves_per_area


AREA_NAMES = [
    "Optimization",
    "Logistics",
    "Analytics",
    "Energy",
    "Finance",
    "Health",
    "Transport",
    "Manufacturing",
]

LEAF_NAMES = [
    "Theory",
    "Applications",
    "Software",
    "Case Studies",
    "Methods",
    "Practice",
    "Systems",
    "Surveys",
]


def make_tree(spec: SynthSpec) -> dict:
    children = []
    for a in range(spec.n_areas):
        area = AREA_NAMES[a % len(AREA_NAMES)]
        leaves = [
            {"name": f"{area} {LEAF_NAMES[l % len(LEAF_NAMES)]}"}
            for l in range(spec.leaves_per_area)
        ]
        children.append({"name": area, "children": leaves})
    return {"name": "Conference", "children": children}


def leaf_name(spec: SynthSpec, leaf: int) -> str:
    area = AREA_NAMES[(leaf // spec.leaves_per_area) % len(AREA_NAMES)]
    return f"{area} {LEAF_NAMES[(leaf % spec.leaves_per_area) % len(LEAF_NAMES)]}"


def _pools(spec: SynthSpec):
    leaf_pools = [
        [_word(f"kw{LETTERS[k // 26]}{LETTERS[k % 26]}", i) for i in range(spec.leaf_kw)]
        for k in range(spec.n_leaves)
    ]
    area_pools = [
        [_word(f"area{LETTERS[a]}", i) for i in range(spec.area_kw)]
        for a in range(spec.n_areas)
    ]
    noise_pool = [_word("noise", i) for i in range(spec.n_noise)]
    return leaf_pools, area_pools, noise_pool


def _doc_tokens(spec: SynthSpec, rng: np.random.Generator, leaf: int, pools) -> list[str]:
    leaf_pools, area_pools, noise_pool = pools
    area = leaf // spec.leaves_per_area
    tokens = list(rng.choice(leaf_pools[leaf], size=spec.leaf_draws))
    tokens += list(rng.choice(area_pools[area], size=spec.area_draws))
    tokens += list(rng.choice(noise_pool, size=spec.noise_draws))
    other = int(rng.integers(spec.n_leaves - 1))
    other = other if other < leaf else other + 1
    tokens += list(rng.choice(leaf_pools[other], size=spec.contamination_draws))
    rng.shuffle(tokens)
    return [str(t) for t in tokens]


def make_records(spec: SynthSpec = SynthSpec(), seed: int = 0):
    """Labeled records, unlabeled records (with held-back truth), and the tree."""
    rng = np.random.default_rng(seed)
    pools = _pools(spec)
    labeled = []
    for leaf in range(spec.n_leaves):
        for d in range(spec.docs_per_leaf):
            tokens = _doc_tokens(spec, rng, leaf, pools)
            labeled.append(
                {
                    "id": f"doc-{leaf:02d}-{d:03d}",
                    "text": " ".join(tokens),
                    "leaf": leaf_name(spec, leaf),
                }
            )
    unlabeled = []
    truth = {}
    for u in range(spec.n_unlabeled):
        leaf = int(rng.integers(spec.n_leaves))
        tokens = _doc_tokens(spec, rng, leaf, pools)
        doc_id = f"unl-{u:03d}"
        truth[doc_id] = leaf_name(spec, leaf)
        unlabeled.append({"id": doc_id, "text": " ".join(tokens)})
    return labeled, unlabeled, make_tree(spec), truth


def write_corpus_files(
    docs_path, tree_path, spec: SynthSpec = SynthSpec(), seed: int = 0, truth_path=None
):
    labeled, unlabeled, tree, truth = make_records(spec, seed)
    with open(docs_path, "w", encoding="utf-8") as f:
        for rec in labeled + unlabeled:
            f.write(json.dumps(rec) + "\n")
    with open(tree_path, "w", encoding="utf-8") as f:
        json.dump(tree, f, indent=1)
    if truth_path is not None:
        with open(truth_path, "w", encoding="utf-8") as f:
            json.dump(truth, f, indent=1)
    return labeled, unlabeled, tree, truth
