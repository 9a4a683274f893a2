"""Position-biased click simulation and click-log statistics.

Random stream layout
--------------------
A log seeded with ``seed`` uses Philox4x64 with key
``SeedSequence(seed).generate_state(2, uint64)``. Session ``s`` reads its own
substream, starting at counter ``[0, 0, s, 0]``. Each raw 64-bit output ``x``
becomes the uniform ``(x >> 11) * 2**-53``. The first uniform picks the
query (``floor(u * n_train)``); the next ``|D_q|`` uniforms decide clicks on
the candidates in rank order. Sessions are therefore independent and can
be generated in any order without changing the log.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .dataset import Dataset
from .ranking import RELEVANT_GRADES, LinearModel, ranks_from_scores, score

MIN_EXPECTED_CLICKS = 1e-9
_U53 = 2.0**-53


class SimulationError(RuntimeError):
    pass


class ClickLogFormatError(ValueError):
    pass


@dataclass(frozen=True)
class BiasConfig:
    gamma: float = 1.0
    noise_click_prob: float = 0.1
    relevant_grades: frozenset = RELEVANT_GRADES
    n_clicks: int = 1_000_000

    def __post_init__(self):
        if not self.gamma >= 0:
            raise ValueError("gamma must be >= 0")
        if not 0.0 <= self.noise_click_prob <= 1.0:
            raise ValueError("noise_click_prob must lie in [0, 1]")
        if self.n_clicks < 1:
            raise ValueError("n_clicks must be >= 1")
        object.__setattr__(self, "relevant_grades", frozenset(self.relevant_grades))


@dataclass(frozen=True)
class ClickLogEntry:
    query_ref: int
    clicked_doc: int
    propensity: float


@dataclass(frozen=True, eq=False)
class ClickLog:
    """Clicks as parallel arrays: train-query index, doc index, propensity."""

    query: np.ndarray
    doc: np.ndarray
    propensity: np.ndarray
    gamma: float
    seed: int
    policy: str = ""
    # Sessions simulated to fill the log; not part of the file format.
    n_sessions: int | None = None

    def __post_init__(self):
        q = np.asarray(self.query, dtype=np.int64)
        d = np.asarray(self.doc, dtype=np.int64)
        p = np.asarray(self.propensity, dtype=np.float64)
        if not (q.shape == d.shape == p.shape) or q.ndim != 1:
            raise ValueError("query, doc and propensity must be equal-length 1-d arrays")
        if len(p) and not (np.all(p > 0) and np.all(p <= 1)):
            raise ValueError("propensities must lie in (0, 1]")
        for a in (q, d, p):
            a.setflags(write=False)
        object.__setattr__(self, "query", q)
        object.__setattr__(self, "doc", d)
        object.__setattr__(self, "propensity", p)

    def __len__(self):
        return len(self.propensity)

    @property
    def entries(self) -> Iterator[ClickLogEntry]:
        for q, d, p in zip(self.query.tolist(), self.doc.tolist(), self.propensity.tolist()):
            yield ClickLogEntry(q, d, p)

    def __eq__(self, other):
        if not isinstance(other, ClickLog):
            return NotImplemented
        return (
            self.gamma == other.gamma
            and self.seed == other.seed
            and self.policy == other.policy
            and np.array_equal(self.query, other.query)
            and np.array_equal(self.doc, other.doc)
            and np.array_equal(self.propensity, other.propensity)
        )

    __hash__ = None

    def validate(self, dataset: Dataset) -> None:
        n_train = len(dataset.train)
        if len(self) == 0:
            raise ValueError("click log is empty")
        if self.query.min() < 0 or self.query.max() >= n_train:
            raise ValueError("click log references queries outside the train split")
        sizes = np.array([q.n_docs for q in dataset.train])
        if np.any(self.doc < 0) or np.any(self.doc >= sizes[self.query]):
            raise ValueError("click log references documents outside their query")


def observation_propensity(rank, gamma: float):
    """(1/rank)^gamma; works elementwise on arrays."""
    if np.any(np.asarray(rank) < 1):
        raise ValueError("rank must be >= 1")
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    return (1.0 / rank) ** gamma


def train_logging_policy(
    dataset: Dataset,
    fraction: float = 0.001,
    seed: int = 0,
    **train_kwargs,
) -> LinearModel:
    """Supervised ranker on a uniformly drawn ``ceil(fraction * |train|)`` queries."""
    from .optimization import train_supervised

    if not dataset.train:
        raise ValueError("train split is empty")
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    n_pick = max(1, math.ceil(fraction * len(dataset.train) - 1e-12))
    rng = np.random.default_rng(seed)
    picked = np.sort(rng.choice(len(dataset.train), size=n_pick, replace=False))
    queries = [dataset.train[i] for i in picked]
    return train_supervised(queries, seed=seed, **train_kwargs)


def _session_uniforms(key: np.ndarray, session: int, count: int) -> np.ndarray:
    bg = np.random.Philox(key=key, counter=[0, 0, session, 0])
    return (bg.random_raw(count) >> np.uint64(11)) * _U53


def simulate_clicks(
    dataset: Dataset,
    policy: LinearModel,
    config: BiasConfig,
    seed: int,
    max_sessions: int | None = None,
) -> ClickLog:
    """Sample sessions until exactly ``config.n_clicks`` clicks are logged.

    The last session may be cut off mid-scan once the budget is reached.
    """
    if not dataset.train:
        raise ValueError("train split is empty")
    if policy.dim != dataset.dim:
        raise ValueError(f"policy dim {policy.dim} != dataset dim {dataset.dim}")

    # Per query, in rank order: candidate doc index, propensity, click probability.
    docs_by_rank, props_by_rank, click_by_rank = [], [], []
    relevant = np.array(sorted(config.relevant_grades), dtype=np.int64)
    for q in dataset.train:
        ranks = ranks_from_scores(score(policy, q))
        order = np.argsort(ranks)
        props = observation_propensity(ranks[order].astype(np.float64), config.gamma)
        is_rel = np.isin(q.relevance[order], relevant)
        docs_by_rank.append(order)
        props_by_rank.append(props)
        click_by_rank.append(props * np.where(is_rel, 1.0, config.noise_click_prob))

    expected = float(np.mean([c.sum() for c in click_by_rank]))
    if expected < MIN_EXPECTED_CLICKS:
        raise SimulationError(
            f"expected clicks per session is {expected:.3g}; the log would never fill "
            f"(gamma={config.gamma}, noise={config.noise_click_prob})"
        )
    if max_sessions is None:
        max_sessions = int(min(10 * config.n_clicks / expected + 1000, 2**62))

    key = np.random.SeedSequence(seed).generate_state(2, np.uint64)
    n_train = len(dataset.train)
    width = 1 + max(len(d) for d in docs_by_rank)
    out_q, out_d, out_p = [], [], []
    remaining = config.n_clicks
    session = 0
    while remaining > 0:
        if session >= max_sessions:
            raise SimulationError(
                f"session budget of {max_sessions} exhausted with {remaining} clicks still "
                f"missing (expected {expected:.3g} clicks per session)"
            )
        u = _session_uniforms(key, session, width)
        qi = min(int(u[0] * n_train), n_train - 1)
        probs = click_by_rank[qi]
        hits = np.flatnonzero(u[1 : 1 + len(probs)] < probs)[:remaining]
        if len(hits):
            out_q.append(np.full(len(hits), qi))
            out_d.append(docs_by_rank[qi][hits])
            out_p.append(props_by_rank[qi][hits])
            remaining -= len(hits)
        session += 1

    return ClickLog(
        np.concatenate(out_q),
        np.concatenate(out_d),
        np.concatenate(out_p),
        gamma=float(config.gamma),
        seed=int(seed),
        policy=policy.fingerprint(),
        n_sessions=session,
    )


def log_stats(log: ClickLog) -> tuple[float, float]:
    """(M, M_bar): the max and mean inverse propensity."""
    if len(log) == 0:
        raise ValueError("click log is empty")
    inv = 1.0 / log.propensity
    return float(inv.max()), float(inv.mean())


def inverse_propensity_histogram(log: ClickLog) -> dict[int, int]:
    """Counts of 1/p_i per power-of-two bucket ``[2^k, 2^(k+1))``, keyed by k."""
    inv = 1.0 / log.propensity
    buckets = np.floor(np.log2(inv)).astype(np.int64)
    keys, counts = np.unique(buckets, return_counts=True)
    return {int(k): int(c) for k, c in zip(keys, counts)}


# ---------------------------------------------------------------------------
# JSON Lines I/O


def dumps_log(log: ClickLog) -> str:
    header = {"gamma": log.gamma, "seed": log.seed, "policy": log.policy, "n": len(log)}
    lines = [json.dumps(header)]
    for q, d, p in zip(log.query.tolist(), log.doc.tolist(), log.propensity.tolist()):
        lines.append(json.dumps({"q": q, "d": d, "p": p}))
    return "\n".join(lines) + "\n"


def write_log(log: ClickLog, path: str | Path) -> None:
    Path(path).write_text(dumps_log(log), encoding="utf-8")


def loads_log(text: str) -> ClickLog:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ClickLogFormatError("empty click-log file (no header)")
    try:
        header = json.loads(lines[0])
        gamma, seed, policy, n = header["gamma"], header["seed"], header["policy"], header["n"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ClickLogFormatError(f"line 1: bad header: {exc}") from None
    qs, ds, ps = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            q, d, p = rec["q"], rec["d"], rec["p"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ClickLogFormatError(f"line {lineno}: bad entry: {exc}") from None
        if not (isinstance(q, int) and isinstance(d, int) and isinstance(p, (int, float))):
            raise ClickLogFormatError(f"line {lineno}: wrong field types")
        if not 0 < p <= 1:
            raise ClickLogFormatError(f"line {lineno}: propensity {p!r} outside (0, 1]")
        qs.append(q)
        ds.append(d)
        ps.append(float(p))
    if len(ps) != n:
        raise ClickLogFormatError(f"header says n={n} but file has {len(ps)} entries")
    return ClickLog(
        np.array(qs, dtype=np.int64),
        np.array(ds, dtype=np.int64),
        np.array(ps, dtype=np.float64),
        gamma=float(gamma),
        seed=int(seed),
        policy=str(policy),
    )


def read_log(path: str | Path) -> ClickLog:
    return loads_log(Path(path).read_text(encoding="utf-8"))
