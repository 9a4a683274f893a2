"""Per-click hinge surrogate of the rank, its subgradient, and the IPS risk."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Dataset, Query
from .ranking import LinearModel, RankWeighting, score


@dataclass(frozen=True)
class HingeConfig:
    margin: float = 1.0
    # Drop the d' = d term; it only adds the constant ``margin``.
    exclude_self: bool = True

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError("margin must be > 0")


DEFAULT_HINGE = HingeConfig()


def _slack(model: LinearModel, query: Query, clicked_doc: int) -> np.ndarray:
    if not 0 <= clicked_doc < query.n_docs:
        raise IndexError(f"clicked_doc {clicked_doc} out of range for {query.n_docs} candidates")
    s = score(model, query)
    return s[clicked_doc] - s


def hinge_rank_bound(
    model: LinearModel, query: Query, clicked_doc: int, cfg: HingeConfig = DEFAULT_HINGE
) -> float:
    """1 + sum over other candidates of max(0, margin - (S(d) - S(d')))."""
    terms = np.maximum(0.0, cfg.margin - _slack(model, query, clicked_doc))
    if cfg.exclude_self:
        terms[clicked_doc] = 0.0
    return float(1.0 + terms.sum())


def loss_f(
    model: LinearModel,
    query: Query,
    clicked_doc: int,
    weighting: RankWeighting = RankWeighting.IDENTITY,
    cfg: HingeConfig = DEFAULT_HINGE,
) -> float:
    return float(weighting(hinge_rank_bound(model, query, clicked_doc, cfg)))


def grad_f(
    model: LinearModel,
    query: Query,
    clicked_doc: int,
    weighting: RankWeighting = RankWeighting.IDENTITY,
    cfg: HingeConfig = DEFAULT_HINGE,
) -> np.ndarray:
    """Subgradient of :func:`loss_f` in the weights.

    Each active pair (slack < margin) contributes ``x_d' - x_d``; pairs
    sitting exactly on the kink contribute nothing.
    """
    active = _slack(model, query, clicked_doc) < cfg.margin
    active[clicked_doc] = False  # the self term is constant either way
    X = query.features
    diff = X[active].sum(axis=0) - np.count_nonzero(active) * X[clicked_doc]
    outer = weighting.derivative(hinge_rank_bound(model, query, clicked_doc, cfg))
    return outer * diff


def r_ips(
    log,
    dataset: Dataset,
    model: LinearModel,
    weighting: RankWeighting = RankWeighting.IDENTITY,
    cfg: HingeConfig = DEFAULT_HINGE,
) -> float:
    """(1/n) sum_i f_i(w) / p_i over the click log."""
    total = 0.0
    for q, d, p in zip(log.query, log.doc, log.propensity):
        total += loss_f(model, dataset.train[q], int(d), weighting, cfg) / p
    return total / len(log)


def grad_r_ips(
    log,
    dataset: Dataset,
    model: LinearModel,
    weighting: RankWeighting = RankWeighting.IDENTITY,
    cfg: HingeConfig = DEFAULT_HINGE,
) -> np.ndarray:
    """Explicit full gradient (1/n) sum_i grad f_i(w) / p_i."""
    total = np.zeros(model.dim)
    for q, d, p in zip(log.query, log.doc, log.propensity):
        total += grad_f(model, dataset.train[q], int(d), weighting, cfg) / p
    return total / len(log)


def per_click_gradients(
    log,
    dataset: Dataset,
    model: LinearModel,
    weighting: RankWeighting = RankWeighting.IDENTITY,
    cfg: HingeConfig = DEFAULT_HINGE,
) -> np.ndarray:
    """Matrix whose row i is grad f_i(w), unweighted."""
    return np.stack(
        [grad_f(model, dataset.train[q], int(d), weighting, cfg) for q, d in zip(log.query, log.doc)]
    )
