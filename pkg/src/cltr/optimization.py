"""Optimizers, the three counterfactual training loops, regret and eta tuning.

The inner SGD loop runs in a numba kernel; everything that only happens at
checkpoints (nDCG evaluation, bookkeeping) stays in Python.
"""

from __future__ import annotations

import enum
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numba
import numpy as np

from .dataset import Dataset, Query
from .ranking import RELEVANT_GRADES, EvalSet, LinearModel
from .sampling import build_alias, ips_distribution
from .simulation import ClickLog, log_stats

DIVERGENCE_NORM = 1e12
# {1, 3} x 10^k for k = -10..-1, then 1 and 3.
DEFAULT_GRID = tuple(float(f"{m}e{k}") for k in range(-10, 1) for m in (1, 3))
# Bound on sampled indices held in memory at once; results do not depend on it.
_CHUNK_DRAWS = 1 << 18


class DivergenceError(RuntimeError):
    pass


class AllDivergentError(RuntimeError):
    """Every learning rate in a grid search diverged."""


class Method(str, enum.Enum):
    BIASED = "Biased"
    IPS_SGD = "IpsSgd"
    COUNTER_SAMPLE = "CounterSample"

    @classmethod
    def parse(cls, value) -> "Method":
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("-", "").replace("_", "")
        aliases = {
            "biased": cls.BIASED,
            "biasedsgd": cls.BIASED,
            "ips": cls.IPS_SGD,
            "ipssgd": cls.IPS_SGD,
            "countersample": cls.COUNTER_SAMPLE,
        }
        if key not in aliases:
            raise ValueError(f"unknown method {value!r}")
        return aliases[key]


class Optimizer(str, enum.Enum):
    SGD = "sgd"
    ADAM = "adam"
    ADAGRAD = "adagrad"

    @classmethod
    def parse(cls, value) -> "Optimizer":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown optimizer {value!r}") from None


_OPT_CODE = {Optimizer.SGD: 0, Optimizer.ADAM: 1, Optimizer.ADAGRAD: 2}


# ---------------------------------------------------------------------------
# Update rules (reference Python versions; the kernel below mirrors them)


@dataclass
class OptimizerState:
    kind: Optimizer
    eta: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    accumulator: np.ndarray | None = None

    def __post_init__(self):
        self.kind = Optimizer.parse(self.kind)
        if not self.eta > 0:
            raise ValueError("eta must be > 0")


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite input to optimizer step")


def sgd_step(state: OptimizerState, w: np.ndarray, g: np.ndarray) -> np.ndarray:
    _check_finite(g)
    state.t += 1
    return w - state.eta * g


def adam_step(state: OptimizerState, w: np.ndarray, g: np.ndarray) -> np.ndarray:
    _check_finite(w, g)
    if state.m is None:
        state.m = np.zeros_like(w)
        state.v = np.zeros_like(w)
    state.t += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * g
    state.v = state.beta2 * state.v + (1 - state.beta2) * g * g
    m_hat = state.m / (1 - state.beta1**state.t)
    v_hat = state.v / (1 - state.beta2**state.t)
    return w - state.eta * m_hat / (np.sqrt(v_hat) + state.eps)


def adagrad_step(state: OptimizerState, w: np.ndarray, g: np.ndarray) -> np.ndarray:
    _check_finite(w, g)
    if state.accumulator is None:
        state.accumulator = np.zeros_like(w)
    state.t += 1
    state.accumulator = state.accumulator + g * g
    return w - state.eta * g / (np.sqrt(state.accumulator) + state.eps)


def optimizer_step(state: OptimizerState, w: np.ndarray, g: np.ndarray) -> np.ndarray:
    step = {Optimizer.SGD: sgd_step, Optimizer.ADAM: adam_step, Optimizer.ADAGRAD: adagrad_step}
    return step[state.kind](state, w, g)


# ---------------------------------------------------------------------------
# Kernel


@numba.njit(nogil=True, cache=True)
def _run_steps(
    w, wbar, t_done, idx, batch, X, start, size, clicked, scale,
    opt, eta, m, v, acc, margin, beta1, beta2, eps, g, tmp, trace,
):
    """Run ``len(idx) // batch`` steps in place; returns the divergent step or -1."""
    dim = w.shape[0]
    n_steps = idx.shape[0] // batch
    for step in range(n_steps):
        t = t_done + step + 1
        for j in range(dim):
            g[j] = 0.0
        for b in range(batch):
            i = idx[step * batch + b]
            c = clicked[i]
            sc = 0.0
            for j in range(dim):
                sc += X[c, j] * w[j]
            for j in range(dim):
                tmp[j] = 0.0
            active = 0
            for r in range(start[i], start[i] + size[i]):
                if r == c:
                    continue
                sr = 0.0
                for j in range(dim):
                    sr += X[r, j] * w[j]
                if sc - sr < margin:
                    active += 1
                    for j in range(dim):
                        tmp[j] += X[r, j]
            for j in range(dim):
                g[j] += scale[i] * (tmp[j] - active * X[c, j])
        for j in range(dim):
            g[j] /= batch

        if opt == 0:
            for j in range(dim):
                w[j] -= eta * g[j]
        elif opt == 1:
            bc1 = 1.0 - beta1**t
            bc2 = 1.0 - beta2**t
            for j in range(dim):
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j]
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j]
                w[j] -= eta * (m[j] / bc1) / (math.sqrt(v[j] / bc2) + eps)
        else:
            for j in range(dim):
                acc[j] += g[j] * g[j]
                w[j] -= eta * g[j] / (math.sqrt(acc[j]) + eps)

        norm2 = 0.0
        for j in range(dim):
            norm2 += w[j] * w[j]
        if not (norm2 <= 1e24):  # also catches NaN
            return t
        for j in range(dim):
            wbar[j] = ((t - 1) * wbar[j] + w[j]) / t
        if trace.shape[0] > 0:
            for j in range(dim):
                trace[t - 1, j] = w[j]
    return -1


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TrainConfig:
    method: Method = Method.COUNTER_SAMPLE
    optimizer: Optimizer = Optimizer.SGD
    eta: float = 0.01
    batch_size: int = 1
    T: int = 10_000
    seed: int = 0
    eval_every: int | None = None
    apply_mbar_scaling: bool = True
    eval_split: str = "validation"
    margin: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "method", Method.parse(self.method))
        object.__setattr__(self, "optimizer", Optimizer.parse(self.optimizer))
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.eta > 0:
            raise ValueError("eta must be > 0")
        if self.eval_every is not None and not 1 <= self.eval_every <= self.T:
            raise ValueError("eval_every must lie in [1, T]")
        if not self.margin > 0:
            raise ValueError("margin must be > 0")

    @property
    def stride(self) -> int:
        return self.eval_every if self.eval_every is not None else max(1, self.T // 100)

    def checkpoint_times(self) -> list[int]:
        times = list(range(self.stride, self.T + 1, self.stride))
        if not times or times[-1] != self.T:
            times.append(self.T)
        return times

    def to_dict(self) -> dict:
        d = asdict(self)
        d["method"] = self.method.value
        d["optimizer"] = self.optimizer.value
        d["eval_every"] = self.stride
        return d


@dataclass
class TrainResult:
    weights: LinearModel
    checkpoints: list[tuple[int, float]]
    curves: dict[str, list[float]]
    regret: float | None
    divergent: bool
    diverged_at: int | None
    config: TrainConfig
    wall_time: float = 0.0
    iterates: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        """JSON-ready form; wall time is left out so files are reproducible."""
        return {
            "config": self.config.to_dict(),
            "divergent": self.divergent,
            "diverged_at": self.diverged_at,
            "regret": self.regret,
            "checkpoints": [
                {"t": t, **{name: vals[k] for name, vals in self.curves.items()}}
                for k, (t, _) in enumerate(self.checkpoints)
            ],
            "weights": self.weights.weights.tolist(),
        }


def _flatten_train(queries: Sequence[Query]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    sizes = np.array([q.n_docs for q in queries], dtype=np.int64)
    offsets = np.zeros(len(queries), dtype=np.int64)
    np.cumsum(sizes[:-1], out=offsets[1:])
    X = np.ascontiguousarray(np.concatenate([q.features for q in queries]))
    return X, offsets, sizes


class _Sampler:
    """Chunked index source: uniform (one uniform per draw) or alias (two)."""

    def __init__(self, n: int, seed: int, table=None):
        self.n = n
        self.table = table
        self.rng = np.random.default_rng(seed)

    def take(self, count: int) -> np.ndarray:
        if self.table is None:
            u = self.rng.random(count)
            return np.minimum((u * self.n).astype(np.int64), self.n - 1)
        u = self.rng.random((count, 2))
        slots = np.minimum((u[:, 0] * self.n).astype(np.int64), self.n - 1)
        keep = u[:, 1] < self.table.prob[slots]
        return np.where(keep, slots, self.table.alias[slots])


def _per_sample_scale(log: ClickLog, config: TrainConfig) -> tuple[np.ndarray, object]:
    n = len(log)
    if config.method is Method.BIASED:
        return np.ones(n), None
    if config.method is Method.IPS_SGD:
        return 1.0 / log.propensity, None
    _, m_bar = log_stats(log)
    table = build_alias(ips_distribution(log.propensity))
    factor = m_bar if config.apply_mbar_scaling else 1.0
    return np.full(n, factor), table


def _run(
    X, offsets, sizes, entry_query, entry_row, scale, table, config: TrainConfig,
    evalsets: dict[str, EvalSet], record_iterates: bool = False,
):
    dim = X.shape[1]
    n = len(entry_query)
    start = offsets[entry_query]
    size = sizes[entry_query]
    clicked = start + entry_row
    w = np.zeros(dim)
    wbar = np.zeros(dim)
    g = np.zeros(dim)
    tmp = np.zeros(dim)
    m = np.zeros(dim)
    v = np.zeros(dim)
    acc = np.zeros(dim)
    trace = np.zeros((config.T if record_iterates else 0, dim))
    sampler = _Sampler(n, config.seed, table)
    opt = _OPT_CODE[config.optimizer]
    batch = config.batch_size
    steps_per_chunk = max(1, _CHUNK_DRAWS // batch)

    checkpoints: list[tuple[int, float]] = []
    curves: dict[str, list[float]] = {name: [] for name in evalsets}
    primary = next(iter(evalsets), None)
    t_done = 0
    diverged_at = None
    for t_eval in config.checkpoint_times():
        while t_done < t_eval:
            k = min(t_eval - t_done, steps_per_chunk)
            idx = sampler.take(k * batch)
            bad = _run_steps(
                w, wbar, t_done, idx, batch, X, start, size, clicked, scale,
                opt, config.eta, m, v, acc, config.margin, 0.9, 0.999, 1e-8, g, tmp, trace,
            )
            if bad >= 0:
                diverged_at = int(bad)
                break
            t_done += k
        if diverged_at is not None:
            break
        for name, ev in evalsets.items():
            curves[name].append(ev.ndcg(wbar))
        if primary is not None:
            checkpoints.append((t_eval, curves[primary][-1]))
    iterates = trace[: t_done if diverged_at is None else diverged_at - 1] if record_iterates else None
    return wbar, checkpoints, curves, diverged_at, iterates


def train(
    log: ClickLog,
    dataset: Dataset,
    config: TrainConfig,
    gold_ndcg: float | None = None,
    track: Sequence[str] | None = None,
    evalsets: dict[str, EvalSet] | None = None,
    record_iterates: bool = False,
) -> TrainResult:
    """Learn a linear ranker from a click log with one of the three methods.

    Biased and IpsSgd draw clicks uniformly and scale each gradient by 1 or
    1/p_i; CounterSample draws from the inverse-propensity distribution via
    an alias table and scales by M_bar. The returned model is the running
    average of the post-update iterates. nDCG@10 of that average is recorded
    at every checkpoint on ``config.eval_split`` and on any split in
    ``track``.
    """
    t0 = time.perf_counter()
    log.validate(dataset)
    if evalsets is None:
        names = [config.eval_split] + [s for s in (track or ()) if s != config.eval_split]
        evalsets = {name: EvalSet(dataset.split(name)) for name in names}
    elif config.eval_split not in evalsets:
        raise KeyError(f"evalsets lack the designated split {config.eval_split!r}")
    else:
        evalsets = {config.eval_split: evalsets[config.eval_split], **evalsets}

    X, offsets, sizes = _flatten_train(dataset.train)
    scale, table = _per_sample_scale(log, config)
    wbar, checkpoints, curves, diverged_at, iterates = _run(
        X, offsets, sizes, log.query, log.doc, np.ascontiguousarray(scale), table,
        config, evalsets, record_iterates,
    )
    divergent = diverged_at is not None
    reg = None
    if gold_ndcg is not None:
        reg = float(gold_ndcg) if divergent else regret(checkpoints, gold_ndcg)
    return TrainResult(
        weights=LinearModel(wbar),
        checkpoints=checkpoints,
        curves=curves,
        regret=reg,
        divergent=divergent,
        diverged_at=diverged_at,
        config=config,
        wall_time=time.perf_counter() - t0,
        iterates=iterates,
    )


def regret(checkpoints: Sequence[tuple[int, float]], gold_ndcg: float) -> float:
    """Average nDCG gap to the gold model, holding each checkpoint's value
    over the iterations since the previous checkpoint."""
    if not checkpoints:
        raise ValueError("no checkpoints")
    T = checkpoints[-1][0]
    total = 0.0
    prev = 0
    for t, value in checkpoints:
        total += (gold_ndcg - value) * (t - prev)
        prev = t
    return total / T


# ---------------------------------------------------------------------------
# Supervised training and learning-rate search


def train_supervised(
    queries: Sequence[Query],
    optimizer: Optimizer | str = Optimizer.SGD,
    eta: float | None = None,
    T: int = 100_000,
    seed: int = 0,
    grid: Sequence[float] = DEFAULT_GRID,
    batch_size: int = 1,
) -> LinearModel:
    """Full-information pairwise hinge training.

    Uniformly samples (query, relevant document) pairs and applies plain
    unweighted steps. With ``eta=None`` every grid value is tried and the
    one with the best final nDCG@10 on ``queries`` wins (ties go to the
    smaller eta).
    """
    pairs_q, pairs_d = [], []
    for qi, q in enumerate(queries):
        for d in np.flatnonzero(np.isin(q.relevance, list(RELEVANT_GRADES))):
            pairs_q.append(qi)
            pairs_d.append(int(d))
    if not pairs_q:
        raise ValueError("no relevant documents to train on")
    entry_query = np.array(pairs_q, dtype=np.int64)
    entry_row = np.array(pairs_d, dtype=np.int64)
    X, offsets, sizes = _flatten_train(queries)
    scale = np.ones(len(entry_query))

    def fit(rate: float):
        cfg = TrainConfig(
            method=Method.BIASED, optimizer=optimizer, eta=rate, T=T, seed=seed,
            batch_size=batch_size, eval_every=T,
        )
        wbar, _, _, diverged_at, _ = _run(X, offsets, sizes, entry_query, entry_row, scale, None, cfg, {})
        return wbar, diverged_at

    if eta is not None:
        wbar, diverged_at = fit(eta)
        if diverged_at is not None:
            raise DivergenceError(f"supervised training diverged at step {diverged_at}")
        return LinearModel(wbar)

    try:
        ev = EvalSet(queries)
    except ValueError:
        ev = None  # nothing to rank by: every eta is as good as any other
    best = None
    for rate in sorted(grid):
        wbar, diverged_at = fit(rate)
        if diverged_at is not None:
            continue
        value = ev.ndcg(wbar) if ev is not None else 0.0
        if best is None or value > best[0]:
            best = (value, wbar)
    if best is None:
        raise AllDivergentError("every learning rate diverged in supervised training")
    return LinearModel(best[1])


@dataclass
class GridSearchResult:
    best_eta: float
    regrets: list[tuple[float, float, bool]]  # (eta, regret, divergent)
    best: TrainResult


def grid_search_eta(
    log: ClickLog,
    dataset: Dataset,
    config: TrainConfig,
    gold_ndcg: float,
    grid: Sequence[float] = DEFAULT_GRID,
    track: Sequence[str] | None = None,
    evalsets: dict[str, EvalSet] | None = None,
) -> GridSearchResult:
    """Train once per eta (same seed) and keep the eta with least validation regret.

    Divergent runs count as regret ``gold_ndcg``. Ties go to the smaller eta.
    """
    if not grid:
        raise ValueError("empty learning-rate grid")
    config = replace(config, eval_split="validation")
    if evalsets is None:
        names = ["validation"] + [s for s in (track or ()) if s != "validation"]
        evalsets = {name: EvalSet(dataset.split(name)) for name in names}
    rows = []
    best = None
    for rate in sorted(grid):
        result = train(log, dataset, replace(config, eta=rate), gold_ndcg=gold_ndcg, evalsets=evalsets)
        rows.append((rate, result.regret, result.divergent))
        if not result.divergent and (best is None or result.regret < best.regret):
            best = result
    if best is None:
        raise AllDivergentError("every learning rate in the grid diverged")
    return GridSearchResult(best.config.eta, rows, best)


# ---------------------------------------------------------------------------
# Convergence-bound helpers


@dataclass(frozen=True)
class TheoryParams:
    B: float
    G: float
    M: float
    M_bar: float
    epsilon: float = 1.0

    def __post_init__(self):
        for name in ("B", "G", "M", "M_bar", "epsilon"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")

    def effective_M(self, method) -> float:
        method = Method.parse(method)
        if method is Method.IPS_SGD:
            return self.M
        if method is Method.COUNTER_SAMPLE:
            return self.M_bar
        raise ValueError("bounds exist only for IpsSgd and CounterSample")


def required_iterations(params: TheoryParams, method) -> float:
    """Iterations sufficient for expected suboptimality <= epsilon: B^2 (M G)^2 / eps^2."""
    m = params.effective_M(method)
    return params.B**2 * (m * params.G) ** 2 / params.epsilon**2


def theoretical_eta(params: TheoryParams, T: int, method) -> float:
    """Step size B / (M G sqrt(T)) used by the convergence bound."""
    if T < 1:
        raise ValueError("T must be >= 1")
    m = params.effective_M(method)
    return params.B / (m * params.G * math.sqrt(T))


def suboptimality_bound(params: TheoryParams, T: int, method) -> float:
    """B M G / sqrt(T), the bound on E[R(w_bar) - R(w*)]."""
    return params.B * params.effective_M(method) * params.G / math.sqrt(T)
