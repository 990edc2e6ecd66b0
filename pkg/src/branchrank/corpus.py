"""Corpus ingestion: tokenization, dictionary pruning, count vectors, topic tree, splits.

The corpus file is JSON-lines, one record per document with fields
``{"id": str, "text": str, "leaf": optional str}``.  The hierarchy file is a
nested JSON record ``{"name": str, "children": optional list}``; a node
without children is a leaf.  All artifacts built here are immutable once
constructed and safe to share across threads.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

log = logging.getLogger(__name__)


class CorpusError(ValueError):
    pass


class EmptyDictionary(CorpusError):
    """Dictionary pruning removed every word."""


class NonUniformDepth(CorpusError):
    """Topic tree has leaves at different levels."""


class DuplicateName(CorpusError):
    """Two siblings in the topic tree share a name."""


class UnknownLeaf(CorpusError):
    """A document names a leaf that is not in the tree."""


class OutOfRange(CorpusError):
    """Ancestor lookup walked past the root."""


class InsufficientData(CorpusError):
    """A leaf has no documents available for the centroid-estimation split."""


@dataclass(frozen=True)
class TokenizerConfig:
    """Deterministic preprocessing rules: lowercase, alphabetic-only tokens."""

    min_len: int = 2
    stopwords: frozenset[str] | None = None


def tokenize(raw_text: str, config: TokenizerConfig = TokenizerConfig()) -> list[str]:
    """Lowercase, strip non-alphabetic characters, split, and filter tokens.

    Tokens shorter than ``config.min_len`` are dropped, as are stopwords when
    a list is configured.  Empty input yields an empty list.
    """
    out = []
    word: list[str] = []
    for ch in raw_text.lower():
        if ch.isalpha():
            word.append(ch)
        elif word:
            out.append("".join(word))
            word.clear()
    if word:
        out.append("".join(word))
    stop = config.stopwords
    return [
        t for t in out if len(t) >= config.min_len and (stop is None or t not in stop)
    ]


@dataclass(frozen=True)
class Dictionary:
    """Ordered set of retained words with the inverse word -> index map."""

    words: tuple[str, ...]
    index: dict[str, int]

    @classmethod
    def from_words(cls, words) -> "Dictionary":
        words = tuple(words)
        index = {w: i for i, w in enumerate(words)}
        if len(index) != len(words):
            raise CorpusError("duplicate words in dictionary")
        return cls(words, index)

    def __len__(self) -> int:
        return len(self.words)


def build_dictionary(docs, min_df: int = 2, max_df_ratio: float = 0.5) -> Dictionary:
    """Build the dictionary from token sequences with document-frequency pruning.

    Keeps words that occur in at least ``min_df`` documents and in at most
    ``max_df_ratio * n_docs`` documents, in first-occurrence order.
    """
    if min_df < 1:
        raise CorpusError("min_df must be >= 1")
    if not (0 < max_df_ratio <= 1):
        raise CorpusError("max_df_ratio must be in (0, 1]")
    docs = list(docs)
    order: list[str] = []
    df: dict[str, int] = {}
    for tokens in docs:
        for w in set(tokens):
            if w not in df:
                order.append(w)
                df[w] = 0
            df[w] += 1
    limit = max_df_ratio * len(docs)
    kept = [w for w in order if df[w] >= min_df and df[w] <= limit]
    if not kept:
        raise EmptyDictionary(
            f"pruning (min_df={min_df}, max_df_ratio={max_df_ratio}) removed all words"
        )
    return Dictionary.from_words(kept)


def vectorize(tokens, dictionary: Dictionary) -> dict[int, int]:
    """Sparse count vector of the tokens; out-of-dictionary tokens are ignored."""
    if len(dictionary) == 0:
        raise CorpusError("dictionary is empty")
    counts: dict[int, int] = {}
    index = dictionary.index
    for t in tokens:
        i = index.get(t)
        if i is not None:
            counts[i] = counts.get(i, 0) + 1
    return counts


@dataclass(eq=False)
class TreeNode:
    name: str
    level: int  # 1-based; root is level 1
    pos: int  # 0-based index among all nodes of this level (left-to-right)
    parent: "TreeNode | None" = None
    children: list["TreeNode"] = field(default_factory=list)
    leaf_pos: int = -1  # 0-based leaf number for leaves, -1 otherwise

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def ancestor(self, steps: int) -> "TreeNode":
        """Walk ``steps`` parent links up; steps=0 returns the node itself."""
        node = self
        for _ in range(steps):
            if node.parent is None:
                raise OutOfRange(f"cannot walk {steps} levels up from level {self.level}")
            node = node.parent
        return node

    def path_names(self) -> list[str]:
        names = []
        node: TreeNode | None = self
        while node is not None:
            names.append(node.name)
            node = node.parent
        return names[::-1]


class TopicTree:
    """Fixed expert hierarchy with uniform leaf depth.

    Leaves are enumerated depth-first left-to-right; that order fixes both
    the label-matrix columns and the branch numbering used everywhere else.
    """

    def __init__(self, root: TreeNode, height: int, levels: list[list[TreeNode]]):
        self.root = root
        self.height = height
        self.levels = levels  # levels[l-1] = nodes of level l in left-to-right order
        self.leaves = levels[height - 1]
        self.level_counts = [len(nodes) for nodes in levels]
        self._leaf_by_name: dict[str, TreeNode | None] = {}
        for leaf in self.leaves:
            # None marks an ambiguous name; lookup reports it as unknown
            self._leaf_by_name[leaf.name] = (
                None if leaf.name in self._leaf_by_name else leaf
            )
        # ancestor_pos[l-1][k] = 0-based level-l index of leaf k's ancestor
        self.ancestor_pos = np.zeros((height, len(self.leaves)), dtype=np.int64)
        for leaf in self.leaves:
            node: TreeNode | None = leaf
            for lvl in range(height, 0, -1):
                assert node is not None and node.level == lvl
                self.ancestor_pos[lvl - 1, leaf.leaf_pos] = node.pos
                node = node.parent

    @property
    def n_leaves(self) -> int:
        return len(self.leaves)

    def leaf(self, name: str) -> TreeNode:
        found = self._leaf_by_name.get(name, "missing")
        if found == "missing":
            raise UnknownLeaf(f"leaf {name!r} is not in the topic tree")
        if found is None:
            raise UnknownLeaf(f"leaf name {name!r} is ambiguous in the topic tree")
        return found

    def parent_of_leaf(self, leaf_k: int, steps: int) -> TreeNode:
        """Ancestor of leaf ``leaf_k`` (0-based) after ``steps`` parent hops."""
        if steps < 0 or steps >= self.height:
            raise OutOfRange(f"steps must be in [0, {self.height - 1}], got {steps}")
        return self.leaves[leaf_k].ancestor(steps)

    def to_nested(self) -> dict:
        def rec(node: TreeNode) -> dict:
            if node.is_leaf:
                return {"name": node.name}
            return {"name": node.name, "children": [rec(c) for c in node.children]}

        return rec(self.root)


def load_hierarchy(tree_document) -> TopicTree:
    """Parse a nested name/children record into a validated TopicTree.

    Raises NonUniformDepth when leaves occur at different levels and
    DuplicateName when a sibling set repeats a name.
    """
    if isinstance(tree_document, str):
        tree_document = json.loads(tree_document)

    levels: list[list[TreeNode]] = []

    def build(rec: dict, level: int, parent: TreeNode | None) -> TreeNode:
        if "name" not in rec:
            raise CorpusError("tree record missing 'name'")
        while len(levels) < level:
            levels.append([])
        node = TreeNode(rec["name"], level, len(levels[level - 1]), parent)
        levels[level - 1].append(node)
        kids = rec.get("children") or []
        seen = set()
        for kid in kids:
            if kid.get("name") in seen:
                raise DuplicateName(
                    f"duplicate child name {kid.get('name')!r} under {node.name!r}"
                )
            seen.add(kid.get("name"))
            node.children.append(build(kid, level + 1, node))
        return node

    root = build(tree_document, 1, None)
    height = len(levels)
    for lvl, nodes in enumerate(levels, start=1):
        for node in nodes:
            if node.is_leaf and lvl != height:
                raise NonUniformDepth(
                    f"leaf {node.name!r} at level {lvl}, expected all leaves at {height}"
                )
    for k, leaf in enumerate(levels[height - 1]):
        leaf.leaf_pos = k
    return TopicTree(root, height, levels)


@dataclass
class Document:
    """Bag-of-words document: sparse counts over the dictionary."""

    id: str
    counts: dict[int, int]
    leaf: str | None = None
    text: str | None = None
    tokens: list[str] | None = None


def build_label_matrix(docs: list[Document], tree: TopicTree) -> np.ndarray:
    """One-hot rows over leaves; unlabeled documents get an all-zero row."""
    z = np.zeros((len(docs), tree.n_leaves), dtype=np.int8)
    for n, doc in enumerate(docs):
        if doc.leaf is not None:
            z[n, tree.leaf(doc.leaf).leaf_pos] = 1
    return z


class Corpus:
    """Immutable bundle of documents, dictionary, tree, counts and labels."""

    def __init__(
        self,
        docs: list[Document],
        dictionary: Dictionary,
        tree: TopicTree,
        tokenizer: TokenizerConfig = TokenizerConfig(),
        min_df: int = 2,
        max_df_ratio: float = 0.5,
    ):
        self.docs = docs
        self.dictionary = dictionary
        self.tree = tree
        self.tokenizer = tokenizer
        self.min_df = min_df
        self.max_df_ratio = max_df_ratio
        self.id_to_row = {d.id: n for n, d in enumerate(docs)}
        if len(self.id_to_row) != len(docs):
            raise CorpusError("duplicate document ids")

        rows, cols, vals = [], [], []
        for n, doc in enumerate(docs):
            for m, c in doc.counts.items():
                if not (0 <= m < len(dictionary)):
                    raise CorpusError(f"doc {doc.id}: word index {m} out of range")
                if c < 1:
                    raise CorpusError(f"doc {doc.id}: nonpositive count")
                rows.append(n)
                cols.append(m)
                vals.append(float(c))
        self.counts = sparse.csr_matrix(
            (vals, (rows, cols)), shape=(len(docs), len(dictionary))
        )
        self.empty_mask = np.asarray(self.counts.sum(axis=1)).ravel() == 0
        if bool(self.empty_mask.all()):
            raise CorpusError("every document has an empty count vector")
        if self.empty_mask.any():
            flagged = [docs[i].id for i in np.flatnonzero(self.empty_mask)[:5]]
            log.warning(
                "%d documents have empty vectors after pruning (e.g. %s); "
                "rankers fall back to the leaf-index permutation for them",
                int(self.empty_mask.sum()),
                flagged,
            )
        self.leaf_index = np.full(len(docs), -1, dtype=np.int64)
        for n, doc in enumerate(docs):
            if doc.leaf is not None:
                self.leaf_index[n] = tree.leaf(doc.leaf).leaf_pos

    @property
    def n_docs(self) -> int:
        return len(self.docs)

    def labeled_rows(self) -> np.ndarray:
        return np.flatnonzero(self.leaf_index >= 0)

    def unlabeled_rows(self) -> np.ndarray:
        return np.flatnonzero(self.leaf_index < 0)

    def rows_for_ids(self, ids) -> np.ndarray:
        return np.array([self.id_to_row[i] for i in ids], dtype=np.int64)

    def label_matrix(self) -> np.ndarray:
        return build_label_matrix(self.docs, self.tree)

    def relabel(self, labels: dict[str, str]) -> "Corpus":
        """New corpus with extra/overridden leaf labels (id -> leaf name)."""
        docs = [
            Document(d.id, d.counts, labels.get(d.id, d.leaf), d.text, d.tokens)
            for d in self.docs
        ]
        return Corpus(
            docs, self.dictionary, self.tree, self.tokenizer, self.min_df, self.max_df_ratio
        )


def build_corpus(
    records,
    tree: TopicTree,
    tokenizer: TokenizerConfig = TokenizerConfig(),
    min_df: int = 2,
    max_df_ratio: float = 0.5,
) -> Corpus:
    """Tokenize raw records, build the pruned dictionary, and vectorize.

    ``records`` is an iterable of mappings with keys id/text and optional leaf.
    """
    records = list(records)
    token_lists = [tokenize(r.get("text", ""), tokenizer) for r in records]
    dictionary = build_dictionary(token_lists, min_df=min_df, max_df_ratio=max_df_ratio)
    docs = []
    for r, tokens in zip(records, token_lists):
        docs.append(
            Document(
                id=str(r["id"]),
                counts=vectorize(tokens, dictionary),
                leaf=r.get("leaf"),
                text=r.get("text"),
                tokens=tokens,
            )
        )
    return Corpus(docs, dictionary, tree, tokenizer, min_df, max_df_ratio)


def read_jsonl(path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def save_corpus(corpus: Corpus, path) -> None:
    payload = {
        "format": "branchrank-corpus",
        "version": 1,
        "tokenizer": {
            "min_len": corpus.tokenizer.min_len,
            "stopwords": sorted(corpus.tokenizer.stopwords)
            if corpus.tokenizer.stopwords
            else None,
        },
        "min_df": corpus.min_df,
        "max_df_ratio": corpus.max_df_ratio,
        "dictionary": list(corpus.dictionary.words),
        "tree": corpus.tree.to_nested(),
        "docs": [
            {
                "id": d.id,
                "text": d.text,
                "leaf": d.leaf,
                "counts": {str(k): v for k, v in d.counts.items()},
            }
            for d in corpus.docs
        ],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f)


def load_corpus(path) -> Corpus:
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    if payload.get("format") != "branchrank-corpus":
        raise CorpusError(f"{path} is not a corpus file")
    tok = payload.get("tokenizer", {})
    tokenizer = TokenizerConfig(
        min_len=tok.get("min_len", 2),
        stopwords=frozenset(tok["stopwords"]) if tok.get("stopwords") else None,
    )
    dictionary = Dictionary.from_words(payload["dictionary"])
    tree = load_hierarchy(payload["tree"])
    docs = [
        Document(
            id=d["id"],
            counts={int(k): int(v) for k, v in d["counts"].items()},
            leaf=d.get("leaf"),
            text=d.get("text"),
        )
        for d in payload["docs"]
    ]
    return Corpus(
        docs,
        dictionary,
        tree,
        tokenizer,
        payload.get("min_df", 2),
        payload.get("max_df_ratio", 0.5),
    )


@dataclass(frozen=True)
class Partition:
    """Disjoint document-id sets for training and testing."""

    v0: tuple[str, ...]
    v1: tuple[str, ...]
    v2: tuple[str, ...]
    test: tuple[str, ...]

    def all_ids(self) -> set[str]:
        return set(self.v0) | set(self.v1) | set(self.v2) | set(self.test)


def split(
    corpus: Corpus,
    fractions: tuple[float, float, float, float],
    seed: int,
) -> Partition:
    """Stratified per-leaf split of the labeled documents, deterministic in seed.

    The first set estimates centroids, so every leaf must contribute at least
    one document to it; a leaf with a single labeled document is forced there
    with a warning.
    """
    if any(f <= 0 for f in fractions) or sum(fractions) > 1 + 1e-12:
        raise CorpusError("fractions must be positive and sum to at most 1")
    rng = np.random.default_rng(seed)
    buckets: list[list[str]] = [[], [], [], []]
    cuts = np.cumsum(fractions)
    for leaf in corpus.tree.leaves:
        rows = np.flatnonzero(corpus.leaf_index == leaf.leaf_pos)
        if rows.size == 0:
            raise InsufficientData(
                f"leaf {leaf.name!r} has no labeled documents; cannot fill V0"
            )
        rows = rows[rng.permutation(rows.size)]
        bounds = np.floor(cuts * rows.size + 1e-9).astype(int)
        pieces = np.split(rows, bounds[:-1])[:4]
        if len(pieces[0]) == 0:
            log.warning(
                "leaf %r has %d labeled documents; forcing one into the "
                "centroid-estimation set",
                leaf.name,
                rows.size,
            )
            pieces = [rows[:1]] + [p[p != rows[0]] for p in pieces[1:]]
        for b, piece in enumerate(pieces):
            buckets[b].extend(corpus.docs[i].id for i in piece)
    return Partition(*(tuple(b) for b in buckets))
