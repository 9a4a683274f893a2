"""Counterfactual learning to rank from position-biased click logs."""

from .dataset import Dataset, Query, generate_synthetic_ltr, parse_svmlight, standardize_features
from .optimization import (
    Method,
    Optimizer,
    TrainConfig,
    TrainResult,
    grid_search_eta,
    regret,
    train,
    train_supervised,
)
from .ranking import LinearModel, ndcg_at_k
from .simulation import BiasConfig, ClickLog, log_stats, simulate_clicks, train_logging_policy

__version__ = "0.1.0"
