"""Linear scoring, deterministic ranking, the additive rank metric and nDCG@k."""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import Query

RELEVANT_GRADES = frozenset({3, 4})


class NoRelevantDocumentsError(ValueError):
    """No query in the evaluated set has a relevant document (IDCG = 0 everywhere)."""


@dataclass(frozen=True, eq=False)
class LinearModel:
    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 1:
            raise ValueError("weights must be a 1-d array")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def zeros(cls, dim: int) -> "LinearModel":
        return cls(np.zeros(dim))

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    def fingerprint(self) -> str:
        """SHA-256 hex digest of the little-endian float64 weight bytes."""
        return hashlib.sha256(self.weights.astype("<f8").tobytes()).hexdigest()

    def __eq__(self, other):
        if not isinstance(other, LinearModel):
            return NotImplemented
        return np.array_equal(self.weights, other.weights)

    __hash__ = None


class RankWeighting(enum.Enum):
    """Rank-weighting function lambda; only the identity is implemented."""

    IDENTITY = "identity"

    def __call__(self, rank):
        return rank

    def derivative(self, rank):
        return np.ones_like(rank, dtype=np.float64) if np.ndim(rank) else 1.0


def score(model: LinearModel, query: Query) -> np.ndarray:
    if model.dim != query.dim:
        raise ValueError(f"model dim {model.dim} != query dim {query.dim}")
    return query.features @ model.weights


def order_by_scores(scores: np.ndarray) -> np.ndarray:
    """Indices sorted by descending score; ties keep ascending index."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def ranks_from_scores(scores: np.ndarray) -> np.ndarray:
    """1-based rank of every document under the deterministic tie-break."""
    order = order_by_scores(scores)
    ranks = np.empty(len(order), dtype=np.int64)
    ranks[order] = np.arange(1, len(order) + 1)
    return ranks


def rank_all(model: LinearModel, query: Query) -> np.ndarray:
    """The ranked list: doc indices ordered from rank 1 downward."""
    return order_by_scores(score(model, query))


def rank_of(model: LinearModel, query: Query, doc_index: int) -> int:
    if not 0 <= doc_index < query.n_docs:
        raise IndexError(f"doc_index {doc_index} out of range for {query.n_docs} candidates")
    s = score(model, query)
    mine = s[doc_index]
    higher = np.count_nonzero(s > mine)
    tied_before = np.count_nonzero(s[:doc_index] == mine)
    return int(1 + higher + tied_before)


def binary_relevance(query: Query) -> np.ndarray:
    return np.isin(query.relevance, list(RELEVANT_GRADES)).astype(np.float64)


def delta_metric(
    model: LinearModel,
    query: Query,
    weighting: RankWeighting = RankWeighting.IDENTITY,
) -> float:
    """Sum of lambda(rank) over the binarized-relevant documents."""
    ranks = ranks_from_scores(score(model, query))
    return float(np.sum(weighting(ranks.astype(np.float64)) * binary_relevance(query)))


class EvalSet:
    """Queries packed into padded arrays for repeated nDCG@k evaluation.

    Building this once and calling :meth:`ndcg` per checkpoint avoids a
    Python loop over queries on every evaluation.
    """

    def __init__(self, queries: Sequence[Query], k: int = 10):
        if k < 1:
            raise ValueError("k must be >= 1")
        if not queries:
            raise NoRelevantDocumentsError("empty query set")
        self.k = k
        dim = queries[0].dim
        n_max = max(q.n_docs for q in queries)
        nq = len(queries)
        self.features = np.zeros((nq, n_max, dim))
        self.gains = np.zeros((nq, n_max))
        self.mask = np.zeros((nq, n_max), dtype=bool)
        for i, q in enumerate(queries):
            if q.dim != dim:
                raise ValueError("queries disagree on feature dimensionality")
            n = q.n_docs
            self.features[i, :n] = q.features
            self.gains[i, :n] = 2.0 ** q.relevance - 1.0
            self.mask[i, :n] = True
        depth = min(k, n_max)
        self.discounts = 1.0 / np.log2(np.arange(2, depth + 2))
        ideal = -np.sort(-self.gains, axis=1)[:, :depth]
        idcg = ideal @ self.discounts
        self.included = idcg > 0
        if not self.included.any():
            raise NoRelevantDocumentsError("no query has a document with grade > 0")
        self.idcg = idcg[self.included]
        self.features = self.features[self.included]
        self.gains = self.gains[self.included]
        self.mask = self.mask[self.included]
        self.dim = dim

    def __len__(self):
        return len(self.idcg)

    def per_query(self, weights: np.ndarray) -> np.ndarray:
        scores = self.features @ weights
        scores[~self.mask] = -np.inf
        depth = len(self.discounts)
        order = np.argsort(-scores, axis=1, kind="stable")[:, :depth]
        dcg = np.take_along_axis(self.gains, order, axis=1) @ self.discounts
        return dcg / self.idcg

    def ndcg(self, weights: np.ndarray) -> float:
        return float(np.mean(self.per_query(np.asarray(weights, dtype=np.float64))))


def ndcg_at_k(model: LinearModel, queries: Sequence[Query], k: int = 10) -> float:
    """Mean nDCG@k with gain 2^grade - 1 and log2(1 + rank) discount.

    Queries whose ideal DCG is zero are left out of the mean; if that leaves
    nothing, :class:`NoRelevantDocumentsError` is raised.
    """
    ev = EvalSet(queries, k)
    if model.dim != ev.dim:
        raise ValueError(f"model dim {model.dim} != query dim {ev.dim}")
    return ev.ndcg(model.weights)
