"""Supervised LTR datasets: SVMLight parsing, synthetic generation, splits."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, TextIO

import numpy as np

MAX_GRADE = 4

# Share of documents per grade 0..4 in synthetic queries, in percent.
GRADE_PERCENTS = (50, 20, 15, 10, 5)
LATENT_NOISE = 0.5


class SVMLightError(ValueError):
    """Raised for malformed SVMLight input; carries the 1-based line number."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class Document:
    doc_index: int
    features: np.ndarray
    relevance: int


@dataclass(frozen=True, eq=False)
class Query:
    """One query with its candidate set D_q.

    ``features`` is a ``(n_docs, dim)`` float array and ``relevance`` an int
    array of grades; row ``i`` is the document with ``doc_index == i``.
    """

    query_id: str
    features: np.ndarray
    relevance: np.ndarray

    def __post_init__(self):
        features = np.ascontiguousarray(self.features, dtype=np.float64)
        relevance = np.asarray(self.relevance, dtype=np.int64)
        if features.ndim != 2 or features.shape[0] == 0:
            raise ValueError(f"query {self.query_id!r} needs a non-empty 2-d feature array")
        if relevance.shape != (features.shape[0],):
            raise ValueError(f"query {self.query_id!r}: relevance/feature row mismatch")
        if not np.all(np.isfinite(features)):
            raise ValueError(f"query {self.query_id!r} has non-finite features")
        if relevance.min() < 0 or relevance.max() > MAX_GRADE:
            raise ValueError(f"query {self.query_id!r} has grades outside 0..{MAX_GRADE}")
        features.setflags(write=False)
        relevance.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "relevance", relevance)

    @property
    def n_docs(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def documents(self) -> list[Document]:
        return [
            Document(i, self.features[i], int(self.relevance[i]))
            for i in range(self.n_docs)
        ]

    def __eq__(self, other):
        if not isinstance(other, Query):
            return NotImplemented
        return (
            self.query_id == other.query_id
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.relevance, other.relevance)
        )

    __hash__ = None


@dataclass(frozen=True)
class Dataset:
    dim: int
    train: list[Query] = field(default_factory=list)
    validation: list[Query] = field(default_factory=list)
    test: list[Query] = field(default_factory=list)

    def __post_init__(self):
        for name in ("train", "validation", "test"):
            for q in getattr(self, name):
                if q.dim != self.dim:
                    raise ValueError(
                        f"{name} query {q.query_id!r} has dim {q.dim}, dataset dim is {self.dim}"
                    )

    def split(self, name: str) -> list[Query]:
        if name in ("valid", "vali"):
            name = "validation"
        if name not in ("train", "validation", "test"):
            raise KeyError(name)
        return getattr(self, name)


# ---------------------------------------------------------------------------
# SVMLight


def _parse_lines(lines: Iterable[str]) -> Iterator[tuple[int, int, str, dict[int, float]]]:
    for lineno, raw in enumerate(lines, start=1):
        data = raw.split("#", 1)[0].strip()
        if not data:
            continue
        tokens = data.split()
        if len(tokens) < 2:
            raise SVMLightError(lineno, "expected '<grade> qid:<id> ...'")
        try:
            grade_value = float(tokens[0])
        except ValueError:
            raise SVMLightError(lineno, f"bad grade {tokens[0]!r}") from None
        if not grade_value.is_integer():
            raise SVMLightError(lineno, f"grade {tokens[0]!r} is not an integer")
        grade = int(grade_value)
        if not 0 <= grade <= MAX_GRADE:
            raise SVMLightError(lineno, f"grade {grade} outside 0..{MAX_GRADE}")
        if not tokens[1].startswith("qid:") or len(tokens[1]) == 4:
            raise SVMLightError(lineno, f"expected qid:<id>, got {tokens[1]!r}")
        qid = tokens[1][4:]
        feats: dict[int, float] = {}
        for tok in tokens[2:]:
            idx_s, sep, val_s = tok.partition(":")
            if not sep:
                raise SVMLightError(lineno, f"bad feature token {tok!r}")
            try:
                idx = int(idx_s)
                val = float(val_s)
            except ValueError:
                raise SVMLightError(lineno, f"bad feature token {tok!r}") from None
            if idx < 1:
                raise SVMLightError(lineno, f"feature index {idx} < 1")
            if idx in feats:
                raise SVMLightError(lineno, f"duplicate feature index {idx}")
            if not math.isfinite(val):
                raise SVMLightError(lineno, f"non-finite feature value {val_s!r}")
            feats[idx] = val
        yield lineno, grade, qid, feats


def parse_svmlight(stream: TextIO | Iterable[str], dim: int | None = None) -> list[Query]:
    """Parse SVMLight/LETOR text into queries.

    Consecutive lines sharing a ``qid`` form one query. Missing feature
    indices read as 0.0. ``dim`` defaults to the largest feature index seen;
    passing it explicitly keeps trailing all-zero features.
    """
    groups: list[tuple[str, list[int], list[dict[int, float]]]] = []
    max_index = 0
    for lineno, grade, qid, feats in _parse_lines(stream):
        if feats:
            max_index = max(max_index, max(feats))
        if not groups or groups[-1][0] != qid:
            groups.append((qid, [], []))
        groups[-1][1].append(grade)
        groups[-1][2].append(feats)
        if dim is not None and feats and max(feats) > dim:
            raise SVMLightError(lineno, f"feature index {max(feats)} exceeds dim {dim}")
    if dim is None:
        dim = max_index
    queries = []
    for qid, grades, rows in groups:
        X = np.zeros((len(rows), dim))
        for i, feats in enumerate(rows):
            for idx, val in feats.items():
                X[i, idx - 1] = val
        queries.append(Query(qid, X, np.array(grades, dtype=np.int64)))
    return queries


def to_svmlight(queries: Iterable[Query]) -> str:
    """Serialize queries so that ``parse_svmlight(..., dim=...)`` round-trips them exactly."""
    out = io.StringIO()
    for q in queries:
        for i in range(q.n_docs):
            feats = " ".join(f"{j + 1}:{float(v)!r}" for j, v in enumerate(q.features[i]))
            out.write(f"{int(q.relevance[i])} qid:{q.query_id} {feats}\n")
    return out.getvalue()


def load_svmlight(path: str | Path, dim: int | None = None) -> list[Query]:
    with open(path, encoding="utf-8") as fh:
        return parse_svmlight(fh, dim=dim)


def load_dataset(
    train: str | Path,
    validation: str | Path,
    test: str | Path,
    dim: int | None = None,
) -> Dataset:
    """Load three SVMLight files; dimensionality is the max over all three unless given."""
    splits = [load_svmlight(p, dim=dim) for p in (train, validation, test)]
    if dim is None:
        dim = max((q.dim for split in splits for q in split), default=0)
        splits = [[_pad(q, dim) for q in split] for split in splits]
    return Dataset(dim, *splits)


def _pad(q: Query, dim: int) -> Query:
    if q.dim == dim:
        return q
    X = np.zeros((q.n_docs, dim))
    X[:, : q.dim] = q.features
    return Query(q.query_id, X, q.relevance)


# ---------------------------------------------------------------------------
# Synthetic data


def _grade_counts(n_docs: int) -> list[int]:
    # Cumulative ceilings from the top grade down, so a singleton gets grade 4.
    counts = []
    taken = 0
    cumulative = 0
    for pct in reversed(GRADE_PERCENTS[1:]):
        cumulative += pct
        upto = -(-cumulative * n_docs // 100)
        counts.append(upto - taken)
        taken = upto
    counts.append(n_docs - taken)
    return counts[::-1]  # index = grade


def generate_synthetic_ltr(n_queries: int, docs_per_query: int, dim: int, seed: int) -> Dataset:
    """Gaussian-feature LTR data with grades from a hidden linear model.

    Grades are assigned per query by latent-score quantiles
    (50/20/15/10/5 % for grades 0..4). Queries are split 60/20/20.
    """
    if n_queries < 1 or docs_per_query < 1 or dim < 1:
        raise ValueError("n_queries, docs_per_query and dim must be positive")
    rng = np.random.default_rng(seed)
    hidden = rng.standard_normal(dim)
    hidden /= np.linalg.norm(hidden)
    counts = _grade_counts(docs_per_query)
    grades_by_rank = np.repeat(np.arange(MAX_GRADE, -1, -1), counts[::-1])

    queries = []
    for qi in range(n_queries):
        X = rng.standard_normal((docs_per_query, dim))
        latent = X @ hidden + LATENT_NOISE * rng.standard_normal(docs_per_query)
        order = np.argsort(-latent, kind="stable")
        grades = np.empty(docs_per_query, dtype=np.int64)
        grades[order] = grades_by_rank
        queries.append(Query(str(qi), X, grades))

    perm = rng.permutation(n_queries)
    n_train = int(round(0.6 * n_queries))
    n_valid = int(round(0.2 * n_queries))
    train = [queries[i] for i in perm[:n_train]]
    valid = [queries[i] for i in perm[n_train : n_train + n_valid]]
    test = [queries[i] for i in perm[n_train + n_valid :]]
    return Dataset(dim, train, valid, test)


def standardize_features(dataset: Dataset, enabled: bool = True) -> Dataset:
    """Z-score features with train-split statistics; zero-variance features are left as-is."""
    if not enabled:
        return dataset
    if not dataset.train:
        raise ValueError("standardization needs a non-empty train split")
    X = np.concatenate([q.features for q in dataset.train])
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    constant = X.max(axis=0) == X.min(axis=0)
    mean[constant] = 0.0
    std[constant] = 1.0

    def apply(split):
        return [Query(q.query_id, (q.features - mean) / std, q.relevance) for q in split]

    return Dataset(dataset.dim, apply(dataset.train), apply(dataset.validation), apply(dataset.test))
