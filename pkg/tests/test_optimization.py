import math

import numpy as np
import pytest

from cltr.dataset import Dataset, Query
from cltr.objectives import grad_f, grad_r_ips
from cltr.optimization import (
    DEFAULT_GRID,
    AllDivergentError,
    DivergenceError,
    Method,
    Optimizer,
    OptimizerState,
    TheoryParams,
    TrainConfig,
    adagrad_step,
    adam_step,
    grid_search_eta,
    optimizer_step,
    regret,
    required_iterations,
    sgd_step,
    suboptimality_bound,
    theoretical_eta,
    train,
    train_supervised,
)
from cltr.ranking import EvalSet, LinearModel, ndcg_at_k, rank_of
from cltr.sampling import build_alias, ips_distribution
from cltr.simulation import ClickLog, log_stats

from conftest import one_query_dataset, random_log


# ---------------------------------------------------------------------------
# update rules


def test_sgd_step_example():
    st = OptimizerState("sgd", eta=0.5)
    assert sgd_step(st, np.array([1.0, 2.0]), np.array([2.0, -2.0])).tolist() == [0.0, 3.0]


@pytest.mark.parametrize("kind", ["adam", "adagrad"])
def test_zero_gradient_first_step_is_identity(kind):
    w = np.array([0.3, -1.0])
    assert np.array_equal(optimizer_step(OptimizerState(kind, eta=0.1), w, np.zeros(2)), w)


def test_adam_first_step():
    st = OptimizerState("adam", eta=0.01)
    w = adam_step(st, np.array([0.0]), np.array([1.0]))
    assert w[0] == pytest.approx(-0.01 / (1 + 1e-8), rel=1e-15)


def test_adagrad_two_steps():
    st = OptimizerState("adagrad", eta=1.0)
    w1 = adagrad_step(st, np.array([0.0]), np.array([1.0]))
    w2 = adagrad_step(st, w1, np.array([1.0]))
    assert -w1[0] == pytest.approx(1 / (1 + 1e-8), rel=1e-15)
    assert w1[0] - w2[0] == pytest.approx(1 / (math.sqrt(2) + 1e-8), rel=1e-15)


def test_step_rejects_non_finite():
    with pytest.raises(ValueError):
        sgd_step(OptimizerState("sgd", eta=1.0), np.zeros(1), np.array([np.nan]))


def test_enum_parsing():
    assert Method.parse("ips") is Method.IPS_SGD
    assert Method.parse("Biased-SGD") is Method.BIASED
    assert Optimizer.parse("Adam") is Optimizer.ADAM
    with pytest.raises(ValueError):
        Method.parse("nope")


# ---------------------------------------------------------------------------
# kernel vs a plain Python reference


def _reference_train(log, ds, cfg):
    """Step-by-step training with grad_f and the Python optimizer steps."""
    n = len(log)
    rng = np.random.default_rng(cfg.seed)
    if cfg.method is Method.COUNTER_SAMPLE:
        table = build_alias(ips_distribution(log))
        scale = np.full(n, log_stats(log)[1] if cfg.apply_mbar_scaling else 1.0)
    else:
        table = None
        scale = 1.0 / log.propensity if cfg.method is Method.IPS_SGD else np.ones(n)
    state = OptimizerState(cfg.optimizer, eta=cfg.eta)
    w = np.zeros(ds.dim)
    iterates = []
    for _ in range(cfg.T):
        g = np.zeros(ds.dim)
        for _ in range(cfg.batch_size):
            if table is None:
                i = min(int(rng.random() * n), n - 1)
            else:
                u = rng.random(2)
                slot = min(int(u[0] * n), n - 1)
                i = slot if u[1] < table.prob[slot] else int(table.alias[slot])
            q = ds.train[log.query[i]]
            g += scale[i] * grad_f(LinearModel(w), q, int(log.doc[i]))
        w = optimizer_step(state, w, g / cfg.batch_size)
        iterates.append(w)
    return np.mean(iterates, axis=0), np.array(iterates)


@pytest.mark.parametrize("method", list(Method))
@pytest.mark.parametrize("opt", list(Optimizer))
@pytest.mark.parametrize("batch", [1, 3])
def test_kernel_matches_reference(small_dataset, small_log, method, opt, batch):
    cfg = TrainConfig(method=method, optimizer=opt, eta=0.05, batch_size=batch, T=60, seed=4)
    result = train(small_log, small_dataset, cfg, record_iterates=True)
    wbar, iterates = _reference_train(small_log, small_dataset, cfg)
    assert np.allclose(result.iterates, iterates, rtol=1e-10, atol=1e-12)
    assert np.allclose(result.weights.weights, wbar, rtol=1e-10, atol=1e-12)


def test_mbar_scaling_flag(small_dataset, small_log):
    cfg = TrainConfig(method="CounterSample", eta=0.05, T=40, seed=2, apply_mbar_scaling=False)
    result = train(small_log, small_dataset, cfg)
    assert np.allclose(result.weights.weights, _reference_train(small_log, small_dataset, cfg)[0], atol=1e-12)


def test_average_equals_mean_of_iterates(small_dataset, small_log):
    for method in Method:
        cfg = TrainConfig(method=method, optimizer="adam", eta=0.01, T=1000, seed=1)
        result = train(small_log, small_dataset, cfg, record_iterates=True)
        assert result.iterates.shape == (1000, small_dataset.dim)
        assert np.max(np.abs(result.weights.weights - result.iterates.mean(axis=0))) <= 1e-12


def test_t_equals_one_returns_first_iterate(small_dataset, small_log):
    result = train(small_log, small_dataset, TrainConfig(T=1, eta=0.1), record_iterates=True)
    assert np.array_equal(result.weights.weights, result.iterates[0])
    assert [t for t, _ in result.checkpoints] == [1]


def test_t_zero_disallowed():
    with pytest.raises(ValueError):
        TrainConfig(T=0)


def test_single_click_log_ips_equals_countersample():
    rng = np.random.default_rng(0)
    q = Query("0", rng.standard_normal((6, 3)), [4, 0, 1, 0, 3, 2])
    ds = Dataset(3, [q], [q], [q])
    log = ClickLog([0], [4], [0.3], gamma=1.0, seed=0)
    runs = [
        train(log, ds, TrainConfig(method=m, eta=0.1, T=25, seed=s), record_iterates=True).iterates
        for m, s in (("IpsSgd", 0), ("CounterSample", 1))
    ]
    assert np.allclose(runs[0], runs[1], rtol=1e-14, atol=0)


def _per_step_bound_check(log, ds, method, scale_bound):
    cfg = TrainConfig(method=method, eta=0.05, T=200, seed=3)
    iterates = train(log, ds, cfg, record_iterates=True).iterates
    prev = np.zeros(ds.dim)
    for w in iterates:
        g_norm = np.linalg.norm(w - prev) / cfg.eta
        grads = [np.linalg.norm(grad_f(LinearModel(prev), ds.train[a], int(b))) for a, b in zip(log.query, log.doc)]
        assert g_norm <= scale_bound * max(grads) * (1 + 1e-9) + 1e-12
        prev = w


def test_gradient_norm_bounds(small_dataset):
    log = random_log(np.random.default_rng(4), small_dataset, 25)
    M, M_bar = log_stats(log)
    _per_step_bound_check(log, small_dataset, "CounterSample", M_bar)
    _per_step_bound_check(log, small_dataset, "IpsSgd", M)


def test_training_is_deterministic(small_dataset, small_log):
    cfg = TrainConfig(method="CounterSample", optimizer="adagrad", eta=0.1, T=500, seed=9, batch_size=2)
    a = train(small_log, small_dataset, cfg, gold_ndcg=0.9)
    b = train(small_log, small_dataset, cfg, gold_ndcg=0.9)
    assert a.to_dict() == b.to_dict()
    assert a.weights.weights.tobytes() == b.weights.weights.tobytes()
    c = train(small_log, small_dataset, TrainConfig(**{**cfg.__dict__, "seed": 10}))
    assert not np.array_equal(a.weights.weights, c.weights.weights)


def test_checkpoints_do_not_perturb_training(small_dataset, small_log):
    base = dict(method="IpsSgd", eta=0.02, T=300, seed=5)
    sparse = train(small_log, small_dataset, TrainConfig(**base, eval_every=300))
    dense = train(small_log, small_dataset, TrainConfig(**base, eval_every=7))
    assert np.array_equal(sparse.weights.weights, dense.weights.weights)
    assert [t for t, _ in dense.checkpoints][-2:] == [294, 300]


def test_chunking_is_invisible(small_dataset, small_log, monkeypatch):
    import cltr.optimization as opt

    cfg = TrainConfig(method="CounterSample", eta=0.02, T=500, seed=5, batch_size=2)
    whole = train(small_log, small_dataset, cfg).weights.weights
    monkeypatch.setattr(opt, "_CHUNK_DRAWS", 6)
    assert np.array_equal(train(small_log, small_dataset, cfg).weights.weights, whole)


def test_default_eval_stride():
    assert TrainConfig(T=50_000).checkpoint_times()[:2] == [500, 1000]
    assert TrainConfig(T=50).checkpoint_times() == list(range(1, 51))
    assert TrainConfig(T=10, eval_every=4).checkpoint_times() == [4, 8, 10]


def test_divergence_is_flagged_and_contained(small_dataset, small_log):
    cfg = TrainConfig(method="IpsSgd", eta=1e14, T=100, seed=0, eval_every=1)
    result = train(small_log, small_dataset, cfg, gold_ndcg=0.8)
    assert result.divergent
    assert result.diverged_at == 1  # the origin has a nonzero gradient
    assert result.regret == 0.8
    assert all(np.isfinite(v) for _, v in result.checkpoints)
    assert np.all(np.isfinite(result.weights.weights))


def test_train_rejects_inconsistent_log(small_dataset):
    log = ClickLog([999], [0], [0.5], gamma=1.0, seed=0)
    with pytest.raises(ValueError):
        train(log, small_dataset, TrainConfig(T=5))


def test_countersample_improves_over_zero_model(small_dataset, small_log):
    result = train(small_log, small_dataset, TrainConfig(eta=0.01, T=3000, seed=0))
    zero = ndcg_at_k(LinearModel.zeros(small_dataset.dim), small_dataset.validation)
    assert result.checkpoints[-1][1] > zero


def test_result_serialization(small_dataset, small_log):
    d = train(small_log, small_dataset, TrainConfig(T=20, eval_every=10), gold_ndcg=1.0).to_dict()
    assert d["config"]["method"] == "CounterSample" and d["config"]["eval_every"] == 10
    assert [c["t"] for c in d["checkpoints"]] == [10, 20]
    assert "wall_time" not in d


# ---------------------------------------------------------------------------
# regret


def test_regret_examples():
    assert regret([(10, 0.7), (20, 0.7)], 0.7) == 0.0
    assert regret([(100, 0.5)], 0.6) == pytest.approx(0.1)
    assert regret([(1, 0.0), (4, 0.5)], 1.0) == pytest.approx((1 * 1.0 + 3 * 0.5) / 4)
    with pytest.raises(ValueError):
        regret([], 1.0)


def test_dense_regret_equals_exact_sum(small_dataset, small_log):
    cfg = TrainConfig(method="IpsSgd", eta=0.05, T=40, seed=1, eval_every=1)
    gold = 0.95
    result = train(small_log, small_dataset, cfg, gold_ndcg=gold, record_iterates=True)
    ev = EvalSet(small_dataset.validation)
    wbars = np.cumsum(result.iterates, axis=0) / np.arange(1, 41)[:, None]
    exact = np.mean([gold - ev.ndcg(w) for w in wbars])
    assert result.regret == pytest.approx(exact, abs=1e-12)


# ---------------------------------------------------------------------------
# supervised training and grid search


def test_supervised_ranks_single_relevant_doc_first():
    rng = np.random.default_rng(0)
    q = Query("0", rng.standard_normal((8, 3)), [0, 0, 4, 0, 1, 0, 0, 2])
    model = train_supervised([q], T=2000)
    assert rank_of(model, q, 2) == 1


def test_supervised_degenerate_all_relevant():
    q = Query("0", np.ones((4, 2)), [3, 4, 3, 4])
    assert np.all(np.isfinite(train_supervised([q], T=100).weights))


def test_supervised_needs_relevant_docs():
    with pytest.raises(ValueError):
        train_supervised([Query("0", np.ones((3, 2)), [0, 1, 2])], T=10)


def test_supervised_divergence_with_fixed_eta():
    q = Query("0", [[1e6], [-1e6]], [0, 4])
    with pytest.raises(DivergenceError):
        train_supervised([q], eta=1e10, T=10)


def test_gold_beats_logging_policy():
    from cltr.dataset import generate_synthetic_ltr
    from cltr.simulation import train_logging_policy

    ds = generate_synthetic_ltr(100, 20, 8, seed=2)
    policy = train_logging_policy(ds, fraction=0.01, seed=0, T=5000)
    gold = train_supervised(ds.train, T=5000)
    assert ndcg_at_k(gold, ds.test) >= ndcg_at_k(policy, ds.test)


def test_default_grid():
    assert len(DEFAULT_GRID) == 22
    assert DEFAULT_GRID[0] == 1e-10 and DEFAULT_GRID[1] == 3e-10
    assert DEFAULT_GRID[-2:] == (1.0, 3.0)


def test_grid_of_one_value(small_dataset, small_log):
    found = grid_search_eta(small_log, small_dataset, TrainConfig(T=50), gold_ndcg=1.0, grid=[0.02])
    assert found.best_eta == 0.02
    assert len(found.regrets) == 1


def test_grid_prefers_smaller_eta_on_ties(small_dataset, small_log):
    # tiny etas leave the model ranking like the zero model: identical regret
    found = grid_search_eta(small_log, small_dataset, TrainConfig(T=20), gold_ndcg=1.0, grid=[1e-300, 1e-301])
    assert found.regrets[0][1] == found.regrets[1][1]
    assert found.best_eta == 1e-301


def test_grid_marks_divergent_runs(small_dataset, small_log):
    found = grid_search_eta(small_log, small_dataset, TrainConfig(method="IpsSgd", T=50), 1.0, grid=[0.01, 1e14])
    assert found.regrets[1] == (1e14, 1.0, True)
    assert found.best_eta == 0.01


def test_grid_all_divergent(small_dataset, small_log):
    with pytest.raises(AllDivergentError):
        grid_search_eta(small_log, small_dataset, TrainConfig(method="IpsSgd", T=50), 1.0, grid=[1e14, 1e15])


def test_grid_empty(small_dataset, small_log):
    with pytest.raises(ValueError):
        grid_search_eta(small_log, small_dataset, TrainConfig(T=5), 1.0, grid=[])


# ---------------------------------------------------------------------------
# theory helpers


def test_required_iterations_examples():
    unit = TheoryParams(B=1, G=1, M=1, M_bar=1, epsilon=1)
    assert required_iterations(unit, "IpsSgd") == 1
    p = TheoryParams(B=1, G=1, M=4, M_bar=3, epsilon=1)
    assert required_iterations(p, "IpsSgd") == 16
    assert required_iterations(p, "CounterSample") == 9
    p2 = TheoryParams(B=1, G=1, M=4, M_bar=3, epsilon=2)
    assert required_iterations(p2, "IpsSgd") == 4


def test_theoretical_eta_examples():
    unit = TheoryParams(B=1, G=1, M=1, M_bar=1)
    assert theoretical_eta(unit, 1, "IpsSgd") == 1
    assert theoretical_eta(unit, 4, "IpsSgd") == 0.5
    skewed = TheoryParams(B=1, G=1, M=129, M_bar=7.92)
    ratio = theoretical_eta(skewed, 1000, "CounterSample") / theoretical_eta(skewed, 1000, "IpsSgd")
    assert ratio == pytest.approx(129 / 7.92, abs=1e-9)


def test_suboptimality_bound_shrinks_with_t():
    p = TheoryParams(B=2, G=1, M=10, M_bar=4)
    assert suboptimality_bound(p, 4, "IpsSgd") == 10
    assert suboptimality_bound(p, 16, "CounterSample") == 2


def test_theory_rejects_biased_and_nonpositive():
    with pytest.raises(ValueError):
        required_iterations(TheoryParams(1, 1, 1, 1), "Biased")
    with pytest.raises(ValueError):
        TheoryParams(B=0, G=1, M=1, M_bar=1)


def test_exact_gradient_expectations(small_dataset):
    rng = np.random.default_rng(12)
    log = random_log(rng, small_dataset, 10)
    w = LinearModel(rng.standard_normal(small_dataset.dim))
    grads = np.array([grad_f(w, small_dataset.train[a], int(b)) for a, b in zip(log.query, log.doc)])
    target = grad_r_ips(log, small_dataset, w)
    _, m_bar = log_stats(log)
    q = ips_distribution(log)
    assert np.max(np.abs((q[:, None] * m_bar * grads).sum(axis=0) - target)) <= 1e-10
    assert np.max(np.abs((grads / log.propensity[:, None]).mean(axis=0) - target)) <= 1e-10
