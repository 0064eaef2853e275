"""
Incremental visual-word vocabulary with an inverted index.

Quantization uses the NNDR test against the two nearest word prototypes;
failing descriptors become new words when indexing (mapping) and stay
unassigned (-1) for localization queries.
"""

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from errors import EmptyVocabulary, FamilyMismatch
from features import Descriptor, DescriptorFamily, FeatureFrame, distance_matrix, get_family
from mapio import decode_array, encode_array

logger = logging.getLogger(__name__)


@dataclass
class VocabularyConfig:
    nndr_ratio: float = 0.8
    backend: str = "kdtree"
    rebuild_every: int = 200


@dataclass(frozen=True)
class VisualWord:
    word_id: int
    prototype: Descriptor
    postings: Tuple[Tuple[int, int], ...]


@dataclass
class LikelihoodVector:
    """Similarity score per node; absent nodes score 0."""
    scores: Dict[int, float] = field(default_factory=dict)

    def get(self, node_id: int) -> float:
        return self.scores.get(node_id, 0.0)

    def __len__(self):
        return len(self.scores)


def _best_two(idx: np.ndarray, dist: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per row, the two smallest distances; ties go to the lower word id."""
    order = np.lexsort((idx, dist), axis=-1)[:, :2]
    return np.take_along_axis(idx, order, axis=1), np.take_along_axis(dist, order, axis=1)


class ExactIndex:
    """Linear scan over all prototypes. Reference backend."""

    def __init__(self, family: DescriptorFamily):
        self.family = family
        self._buffer = np.zeros((256, family.dimension), dtype=family.dtype)
        self._size = 0

    def __len__(self):
        return self._size

    @property
    def vectors(self) -> np.ndarray:
        return self._buffer[:self._size]

    def add(self, vectors: np.ndarray):
        vectors = np.asarray(vectors, dtype=self.family.dtype).reshape(-1, self.family.dimension)
        needed = self._size + len(vectors)
        if needed > len(self._buffer):
            grown = np.zeros((max(needed, 2 * len(self._buffer)), self.family.dimension), dtype=self.family.dtype)
            grown[:self._size] = self.vectors
            self._buffer = grown
        self._buffer[self._size:needed] = vectors
        self._size = needed

    def _scan(self, queries: np.ndarray, offset: int, vectors: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        n = len(queries)
        idx = np.full((n, 2), -1, dtype=np.int64)
        dist = np.full((n, 2), np.inf)
        if len(vectors) == 0:
            return idx, dist
        D = distance_matrix(self.family, queries, vectors)
        rows = np.arange(n)
        first = D.argmin(axis=1)
        idx[:, 0] = first + offset
        dist[:, 0] = D[rows, first]
        if D.shape[1] > 1:
            D[rows, first] = np.inf
            second = D.argmin(axis=1)
            idx[:, 1] = second + offset
            dist[:, 1] = D[rows, second]
        return idx, dist

    def knn2(self, queries: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return self._scan(queries, 0, self.vectors)


class KDTreeIndex(ExactIndex):
    """
    KD-tree over real-valued prototypes, rebuilt every `rebuild_every` new
    words; words added since the last rebuild are scanned linearly.
    """

    def __init__(self, family: DescriptorFamily, rebuild_every: int = 200):
        super().__init__(family)
        self.rebuild_every = rebuild_every
        self._tree: Optional[cKDTree] = None
        self._built = 0

    def add(self, vectors: np.ndarray):
        super().add(vectors)
        if self._size - self._built >= self.rebuild_every:
            self._tree = cKDTree(self.vectors.astype(float))
            self._built = self._size
            logger.debug(f"Rebuilt vocabulary KD-tree over {self._built} words")

    def knn2(self, queries: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        queries = np.asarray(queries, dtype=float)
        n = len(queries)
        pending_idx, pending_dist = self._scan(queries, self._built, self.vectors[self._built:])
        if self._tree is None:
            return pending_idx, pending_dist
        k = min(2, self._built)
        dist, idx = self._tree.query(queries, k=k)
        tree_idx = np.full((n, 2), -1, dtype=np.int64)
        tree_dist = np.full((n, 2), np.inf)
        tree_idx[:, :k] = np.asarray(idx).reshape(n, k)
        tree_dist[:, :k] = np.asarray(dist).reshape(n, k)
        return _best_two(np.hstack([tree_idx, pending_idx]), np.hstack([tree_dist, pending_dist]))


def make_index(family: DescriptorFamily, cfg: VocabularyConfig) -> ExactIndex:
    if cfg.backend == "exact" or family.binary:
        return ExactIndex(family)
    if cfg.backend == "kdtree":
        return KDTreeIndex(family, cfg.rebuild_every)
    raise ValueError(f"unknown nearest-neighbor backend {cfg.backend!r}")


class Vocabulary:
    def __init__(self, family: str, cfg: VocabularyConfig = None):
        self.family = family
        self.cfg = cfg or VocabularyConfig()
        self.nn_index = make_index(get_family(family), self.cfg)
        self.postings: Dict[int, Dict[int, int]] = {}
        self.node_word_counts: Dict[int, int] = {}

    def __len__(self):
        return len(self.nn_index)

    @property
    def total_indexed_nodes(self) -> int:
        return len(self.node_word_counts)

    @property
    def prototypes(self) -> np.ndarray:
        return self.nn_index.vectors

    def word(self, word_id: int) -> VisualWord:
        posting = self.postings.get(word_id, {})
        return VisualWord(word_id, Descriptor(self.family, self.prototypes[word_id]),
                          tuple(sorted(posting.items())))

    def words(self) -> Iterable[VisualWord]:
        for w in range(len(self)):
            yield self.word(w)

    def index_node(self, node_id: int, word_ids: np.ndarray):
        if node_id in self.node_word_counts:
            raise ValueError(f"node {node_id} is already indexed")
        assigned = word_ids[word_ids >= 0]
        words, counts = np.unique(assigned, return_counts=True)
        for w, c in zip(words.tolist(), counts.tolist()):
            self.postings.setdefault(w, {})
            self.postings[w][node_id] = self.postings[w].get(node_id, 0) + c
        self.node_word_counts[node_id] = int(len(assigned))

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "config": {"nndr_ratio": self.cfg.nndr_ratio, "backend": self.cfg.backend,
                       "rebuild_every": self.cfg.rebuild_every},
            "prototypes": encode_array(self.prototypes),
            "postings": [[w, [[n, c] for n, c in sorted(p.items())]] for w, p in sorted(self.postings.items())],
            "node_word_counts": [[n, c] for n, c in sorted(self.node_word_counts.items())],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        v = cls(d["family"], VocabularyConfig(**d["config"]))
        v.nn_index.add(decode_array(d["prototypes"]))
        v.postings = {int(w): {int(n): int(c) for n, c in p} for w, p in d["postings"]}
        v.node_word_counts = {int(n): int(c) for n, c in d["node_word_counts"]}
        return v


def quantize_frame(v: Vocabulary, f: FeatureFrame, nndr_ratio: float = None, indexing: bool = False,
                   node_id: Optional[int] = None) -> int:
    """
    Assign each descriptor of f to a visual word, writing f.word_ids.

    With indexing, descriptors failing the NNDR test become new words and the
    frame is added to the inverted index under node_id. Without indexing the
    vocabulary is left untouched and failing descriptors stay unassigned.
    Returns the number of words created.
    """
    if f.family != v.family:
        raise FamilyMismatch(f"frame family {f.family} does not match vocabulary family {v.family}")
    if indexing and node_id is None:
        raise ValueError("indexing requires a node id")
    ratio = nndr_ratio if nndr_ratio is not None else v.cfg.nndr_ratio
    n = len(f)
    word_ids = np.full(n, -1, dtype=np.int64)
    if n and len(v.nn_index) >= 2:
        idx, dist = v.nn_index.knn2(f.descriptors)
        ok = dist[:, 0] < ratio * dist[:, 1]
        word_ids[ok] = idx[ok, 0]
    created = 0
    if indexing:
        new = np.flatnonzero(word_ids < 0)
        if len(new):
            start = len(v.nn_index)
            v.nn_index.add(f.descriptors[new])
            word_ids[new] = np.arange(start, start + len(new))
            created = len(new)
        v.index_node(node_id, word_ids)
    f.word_ids = word_ids
    return created


def compute_likelihood(v: Vocabulary, query: FeatureFrame, exclude: Iterable[int] = ()) -> LikelihoodVector:
    """
    tf-idf score per indexed node over the words it shares with the query:
    sum of (n_wi / n_i) * log(N / n_w).
    """
    N = v.total_indexed_nodes
    if N == 0:
        raise EmptyVocabulary("no nodes have been indexed")
    excluded = set(exclude)
    scores: Dict[int, float] = defaultdict(float)
    for w in np.unique(query.word_ids[query.word_ids >= 0]).tolist():
        posting = v.postings.get(w)
        if not posting:
            continue
        idf = math.log(N / len(posting))
        if idf <= 0.0:
            continue
        for node, count in posting.items():
            if node in excluded:
                continue
            scores[node] += count / v.node_word_counts[node] * idf
    return LikelihoodVector(dict(scores))
