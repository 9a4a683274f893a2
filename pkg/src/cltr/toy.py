"""Two-weight IPS-weighted least-squares toy problem.

Compares CounterSample against IPS-weighted SGD on 50 noiseless samples
with uniform propensities in [0.05, 1].
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .sampling import build_alias, ips_distribution

W_STAR = np.array([0.973, 1.144])
N_SAMPLES = 50
P_MIN, P_MAX = 0.05, 1.0
DEFAULT_ETAS = (0.001, 0.005, 0.01, 0.05)
METHODS = ("CounterSample", "IpsSgd")


@dataclass(frozen=True, eq=False)
class ToyProblem:
    X: np.ndarray
    y: np.ndarray
    propensities: np.ndarray
    w_star: np.ndarray

    @property
    def m_bar(self) -> float:
        return float(np.mean(1.0 / self.propensities))


def generate_toy(seed: int) -> ToyProblem:
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((N_SAMPLES, 2))
    y = X @ W_STAR
    p = rng.uniform(P_MIN, P_MAX, N_SAMPLES)
    return ToyProblem(X, y, p, W_STAR.copy())


def toy_loss(problem: ToyProblem, w) -> float:
    r = problem.X @ np.asarray(w, dtype=np.float64) - problem.y
    return float(np.mean(r * r / problem.propensities))


def toy_grad(problem: ToyProblem, w) -> np.ndarray:
    r = problem.X @ np.asarray(w, dtype=np.float64) - problem.y
    return (2.0 * r / problem.propensities) @ problem.X / len(r)


def sample_grads(problem: ToyProblem, w) -> np.ndarray:
    """Row i is the unweighted per-sample gradient 2 (<x_i, w> - y_i) x_i."""
    r = problem.X @ np.asarray(w, dtype=np.float64) - problem.y
    return 2.0 * r[:, None] * problem.X


def step_second_moments(problem: ToyProblem, w) -> dict[str, float]:
    """Exact E||g||^2 of one stochastic step at ``w`` for both samplers."""
    G2 = np.sum(sample_grads(problem, w) ** 2, axis=1)
    inv = 1.0 / problem.propensities
    q = ips_distribution(problem.propensities)
    return {
        "IpsSgd": float(np.mean(inv**2 * G2)),
        "CounterSample": float(np.sum(q * problem.m_bar**2 * G2)),
    }


def expected_first_steps(problem: ToyProblem, eta: float, w=None) -> dict[str, np.ndarray]:
    """Exact expected update -eta * E[g] from ``w`` (default origin) for both samplers."""
    w = np.zeros(2) if w is None else np.asarray(w, dtype=np.float64)
    G = sample_grads(problem, w)
    inv = 1.0 / problem.propensities
    q = ips_distribution(problem.propensities)
    return {
        "IpsSgd": -eta * (inv[:, None] * G).mean(axis=0),
        "CounterSample": -eta * problem.m_bar * (q[:, None] * G).sum(axis=0),
    }


@dataclass
class Trajectory:
    method: str
    eta: float
    seed: int
    path: np.ndarray  # (len, 2); path[0] is the starting point
    divergent: bool

    @property
    def final_distance(self) -> float:
        if self.divergent:
            return float("inf")
        return float(np.linalg.norm(self.path[-1] - W_STAR))


def _trajectory(problem, method, eta, T, seed) -> Trajectory:
    rng = np.random.default_rng(seed)
    inv = 1.0 / problem.propensities
    n = len(inv)
    if method == "CounterSample":
        table = build_alias(ips_distribution(problem.propensities))
        u = rng.random((T, 2))
        slots = np.minimum((u[:, 0] * n).astype(np.int64), n - 1)
        idx = np.where(u[:, 1] < table.prob[slots], slots, table.alias[slots])
        weights = np.full(n, problem.m_bar)
    else:
        idx = np.minimum((rng.random(T) * n).astype(np.int64), n - 1)
        weights = inv
    path = [np.zeros(2)]
    w = path[0]
    with np.errstate(over="ignore", invalid="ignore"):
        for i in idx:
            residual = problem.X[i] @ w - problem.y[i]
            w = w - eta * weights[i] * 2.0 * residual * problem.X[i]
            if not np.all(np.isfinite(w)):
                return Trajectory(method, eta, seed, np.array(path), True)
            path.append(w)
    return Trajectory(method, eta, seed, np.array(path), False)


def run_toy_comparison(
    problem: ToyProblem | None,
    etas: Sequence[float] = DEFAULT_ETAS,
    T: int = 50,
    seeds: Iterable[int] = range(10),
) -> list[Trajectory]:
    """Trajectories from the origin for every (method, eta, seed).

    With ``problem=None`` each seed also generates its own problem, so a
    seed fixes both the data and the sample sequence.
    """
    out = []
    for seed in seeds:
        prob = generate_toy(seed) if problem is None else problem
        for eta in etas:
            for method in METHODS:
                out.append(_trajectory(prob, method, float(eta), T, seed))
    return out


def largest_stable_eta(trajectories: Sequence[Trajectory], threshold: float = 0.3) -> float | None:
    """Largest eta whose mean CounterSample final distance is below ``threshold * ||w*||``."""
    limit = threshold * float(np.linalg.norm(W_STAR))
    best = None
    for eta in sorted({t.eta for t in trajectories}):
        dists = [t.final_distance for t in trajectories if t.eta == eta and t.method == "CounterSample"]
        if dists and np.mean(dists) < limit:
            best = eta
    return best


def trajectories_csv(trajectories: Sequence[Trajectory]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "eta", "seed", "t", "w1", "w2", "dist_to_wstar"])
    for tr in trajectories:
        for t, w in enumerate(tr.path, start=1):
            dist = float(np.linalg.norm(w - W_STAR))
            writer.writerow([tr.method, repr(tr.eta), tr.seed, t, repr(float(w[0])), repr(float(w[1])), repr(dist)])
    return buf.getvalue()


def summarize(trajectories: Sequence[Trajectory]) -> list[dict]:
    rows = []
    for method in METHODS:
        for eta in sorted({t.eta for t in trajectories}):
            sel = [t for t in trajectories if t.method == method and t.eta == eta]
            if not sel:
                continue
            finite = [t.final_distance for t in sel if not t.divergent]
            rows.append({
                "method": method,
                "eta": eta,
                "runs": len(sel),
                "divergent": sum(t.divergent for t in sel),
                "mean_final_distance": float(np.mean(finite)) if finite else None,
                "median_final_distance": float(np.median([t.final_distance for t in sel])),
            })
    return rows
