import numpy as np
import pytest

from cltr.dataset import generate_synthetic_ltr
from cltr.ranking import LinearModel, ndcg_at_k, ranks_from_scores, score
from cltr.simulation import (
    BiasConfig,
    ClickLog,
    ClickLogFormatError,
    SimulationError,
    dumps_log,
    inverse_propensity_histogram,
    loads_log,
    log_stats,
    observation_propensity,
    read_log,
    simulate_clicks,
    train_logging_policy,
    write_log,
)

from conftest import one_query_dataset


@pytest.mark.parametrize(
    "rank, gamma, expected",
    [(1, 0.0, 1.0), (1, 1.7, 1.0), (2, 1.0, 0.5), (4, 0.5, 0.5), (7, 0.0, 1.0), (10, 2.0, 0.01)],
)
def test_observation_propensity(rank, gamma, expected):
    assert observation_propensity(rank, gamma) == pytest.approx(expected, rel=1e-15)


def test_observation_propensity_rejects_rank_zero():
    with pytest.raises(ValueError):
        observation_propensity(0, 1.0)


def test_bias_config_validation():
    with pytest.raises(ValueError):
        BiasConfig(gamma=-0.1)
    with pytest.raises(ValueError):
        BiasConfig(noise_click_prob=1.5)


def test_single_certain_click_per_session():
    ds = one_query_dataset([[1.0]], [4])
    log = simulate_clicks(ds, LinearModel([1.0]), BiasConfig(gamma=0.0, noise_click_prob=0.0, n_clicks=25), seed=1)
    assert len(log) == 25
    assert log.n_sessions == 25
    assert np.all(log.propensity == 1.0)
    assert np.all(log.doc == 0)


def test_exact_click_budget_truncates_last_session():
    ds = one_query_dataset(np.eye(5), [4, 4, 4, 4, 4])
    log = simulate_clicks(ds, LinearModel(np.arange(5.0)), BiasConfig(gamma=0.0, n_clicks=12), seed=0)
    # every candidate is clicked each session: 5 + 5 + 2
    assert len(log) == 12 and log.n_sessions == 3
    assert log.doc.tolist() == [4, 3, 2, 1, 0] * 2 + [4, 3]


def test_propensities_recomputable_from_policy(small_dataset, small_policy, small_log):
    for q, d, p in zip(small_log.query, small_log.doc, small_log.propensity):
        rank = ranks_from_scores(score(small_policy, small_dataset.train[q]))[d]
        assert p == observation_propensity(float(rank), small_log.gamma)
    max_rank = round(1 / small_log.propensity.min() ** (1 / small_log.gamma))
    assert small_log.propensity.min() == observation_propensity(float(max_rank), small_log.gamma)
    assert small_log.policy == small_policy.fingerprint()


def test_logs_are_bit_identical(small_dataset, small_policy, small_log):
    again = simulate_clicks(small_dataset, small_policy, BiasConfig(gamma=1.0, n_clicks=300), seed=5)
    assert again == small_log
    assert dumps_log(again) == dumps_log(small_log)
    other = simulate_clicks(small_dataset, small_policy, BiasConfig(gamma=1.0, n_clicks=300), seed=6)
    assert other != small_log


def test_click_through_rate_follows_propensity():
    # One query, ranking fixed: relevant docs sit at ranks 1, 2, 5 and 10.
    grades = np.zeros(12, dtype=int)
    grades[[0, 1, 4, 9]] = 4
    ds = one_query_dataset(-np.arange(12.0)[:, None], grades)
    cfg = BiasConfig(gamma=1.0, noise_click_prob=0.1, n_clicks=226_000)
    log = simulate_clicks(ds, LinearModel([1.0]), cfg, seed=3)
    sessions = log.n_sessions
    assert sessions > 100_000
    for doc in (0, 1, 4, 9):
        r = doc + 1
        ctr = np.count_nonzero(log.doc == doc) / sessions
        se = np.sqrt((1 / r) * (1 - 1 / r) / sessions) if r > 1 else 1 / sessions
        assert abs(ctr - 1 / r) <= 3 * se + 1 / sessions, (r, ctr)


def test_never_filling_log_is_reported():
    grades = np.zeros(50, dtype=int)
    grades[-1] = 4
    ds = one_query_dataset(-np.arange(50.0)[:, None], grades)
    with pytest.raises(SimulationError, match="expected clicks"):
        simulate_clicks(ds, LinearModel([1.0]), BiasConfig(gamma=10.0, noise_click_prob=0.0, n_clicks=10), seed=0)


def test_session_budget_is_enforced():
    ds = one_query_dataset([[1.0], [0.0]], [0, 0])
    with pytest.raises(SimulationError, match="budget"):
        simulate_clicks(ds, LinearModel([1.0]), BiasConfig(n_clicks=1000), seed=0, max_sessions=50)


def test_policy_dimension_checked(small_dataset):
    with pytest.raises(ValueError):
        simulate_clicks(small_dataset, LinearModel([1.0]), BiasConfig(n_clicks=1), seed=0)


def test_log_stats_examples():
    log = ClickLog([0, 0], [0, 1], [0.5, 0.25], gamma=1.0, seed=0)
    assert log_stats(log) == (4.0, 3.0)
    same = ClickLog([0, 0, 0], [0, 1, 2], [0.2] * 3, gamma=1.0, seed=0)
    M, M_bar = log_stats(same)
    assert M == M_bar == pytest.approx(5.0)
    with pytest.raises(ValueError):
        log_stats(ClickLog([], [], [], gamma=1.0, seed=0))


def test_m_bar_never_exceeds_m(small_log):
    M, M_bar = log_stats(small_log)
    assert M_bar <= M
    assert M_bar < M  # propensities in this log are not all equal


def test_ratio_grows_with_gamma():
    ds = generate_synthetic_ltr(40, 25, 5, seed=0)
    policy = LinearModel(np.random.default_rng(0).standard_normal(5))
    ratios = []
    for gamma in (0.5, 1.0, 1.5):
        M, M_bar = log_stats(simulate_clicks(ds, policy, BiasConfig(gamma=gamma, n_clicks=5000), seed=1))
        ratios.append(M / M_bar)
    assert ratios[0] < ratios[1] < ratios[2]


def test_jsonl_round_trip_is_bit_exact(tmp_path, small_log):
    path = tmp_path / "log.jsonl"
    write_log(small_log, path)
    back = read_log(path)
    assert back == small_log
    assert back.propensity.tobytes() == small_log.propensity.tobytes()
    first = path.read_text().splitlines()[0]
    assert first.startswith('{"gamma": 1.0, "seed": 5, "policy": "')
    assert first.endswith(f'"n": {len(small_log)}}}')


@pytest.mark.parametrize(
    "text",
    [
        "",
        "not json\n",
        '{"gamma": 1.0, "seed": 0, "policy": "x", "n": 1}\n{"q": 0, "d": 0}\n',
        '{"gamma": 1.0, "seed": 0, "policy": "x", "n": 2}\n{"q": 0, "d": 0, "p": 0.5}\n',
        '{"gamma": 1.0, "seed": 0, "policy": "x", "n": 1}\n{"q": 0, "d": 0, "p": 0.0}\n',
    ],
)
def test_malformed_log_files(text):
    with pytest.raises(ClickLogFormatError):
        loads_log(text)


def test_histogram_buckets_by_powers_of_two():
    log = ClickLog([0] * 4, [0] * 4, [1.0, 0.5, 0.3, 0.25], gamma=1.0, seed=0)
    # 1/p = 1, 2, 3.33, 4
    assert inverse_propensity_histogram(log) == {0: 1, 1: 2, 2: 1}


def test_logging_policy_query_count(monkeypatch):
    import cltr.optimization as opt

    ds = generate_synthetic_ltr(1000, 6, 3, seed=0)
    assert len(ds.train) == 600
    seen = []
    real = opt.train_supervised

    def spy(queries, **kw):
        seen.append(len(queries))
        return real(queries, **kw)

    monkeypatch.setattr(opt, "train_supervised", spy)
    for fraction in (0.001, 1.0, 0.0025):
        train_logging_policy(ds, fraction=fraction, seed=0, T=200, eta=0.1)
    # ceil(fraction * 600)
    assert seen == [1, 600, 2]


def test_logging_policy_beats_zero_model():
    ds = generate_synthetic_ltr(200, 30, 10, seed=0)
    policy = train_logging_policy(ds, fraction=0.01, seed=0, T=20_000)
    zero = LinearModel.zeros(ds.dim)
    assert ndcg_at_k(policy, ds.test) > ndcg_at_k(zero, ds.test)


def test_logging_policy_rejects_empty_train():
    from cltr.dataset import Dataset

    with pytest.raises(ValueError):
        train_logging_policy(Dataset(2), fraction=0.5)
