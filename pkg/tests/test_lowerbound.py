import math

import numpy as np
import pytest

from passive_rl.lowerbound import (EnumerationError, adaptive_pair, bernoulli_kl, enumerate_history_kl,
                                   evaluate_learner_on_pair, least_visited_cell, lower_bound_value,
                                   make_hard_pair, occupancy_weighted_kl, optimal_delta, oracle_learner,
                                   passive_memory_learner, uniform_learner, visit_stats)
from passive_rl.mdp import Policy, TabularMdp
from passive_rl.online import OnlineConfig
from passive_rl.oracle import optimal_policy


def _random_policy(rng, s, a):
    p = rng.random((s, a)) + 0.05
    return Policy(p / p.sum(axis=1, keepdims=True))


def test_hard_pair_rewards():
    pair = make_hard_pair(2, 2, 0.9, 0.1, (1, 1))
    np.testing.assert_allclose(pair.m.reward_param, [[0.6, 0.5], [0.5, 0.5]])
    np.testing.assert_allclose(pair.m_prime.reward_param, [[0.6, 0.5], [0.5, 0.7]])
    assert pair.m.reward_bernoulli.all() and pair.m_prime.reward_bernoulli.all()
    np.testing.assert_array_equal(pair.m.transition, pair.m_prime.transition)
    np.testing.assert_array_equal(pair.m.mu0, pair.m_prime.mu0)
    assert pair.m.gamma == pair.m_prime.gamma


def test_zero_gap_pair_identical():
    pair = make_hard_pair(2, 2, 0.9, 0.0, (0, 1))
    np.testing.assert_array_equal(pair.m.reward_param, pair.m_prime.reward_param)
    assert enumerate_history_kl(pair, Policy.uniform(2, 2), 2) == 0.0
    assert occupancy_weighted_kl(pair, Policy.uniform(2, 2), 2) == 0.0


def test_hard_pair_errors():
    with pytest.raises(ValueError):
        make_hard_pair(2, 2, 0.9, 0.1, (0, 0))
    with pytest.raises(ValueError):
        make_hard_pair(2, 2, 0.9, 0.3, (0, 1))
    with pytest.raises(ValueError):
        make_hard_pair(2, 2, 0.9, 0.1, (2, 0))
    with pytest.raises(ValueError):
        make_hard_pair(1, 1, 0.9, 0.1, (0, 1))


@pytest.mark.parametrize("cell", [(0, 1), (1, 0), (1, 1)])
def test_m_prime_optimum_plays_adversarial_action(cell):
    pair = make_hard_pair(2, 2, 0.9, 0.1, cell)
    pi, _ = optimal_policy(pair.m_prime)
    assert pi.greedy_actions()[cell[0]] == cell[1]


def test_optimal_delta_examples():
    assert optimal_delta(2, 2, 0.5, 1, 10, 100) == pytest.approx(math.sqrt(0.002), rel=1e-12)
    assert optimal_delta(2, 2, 0.5, 1, 10, 400) == pytest.approx(math.sqrt(0.002) / 2, rel=1e-12)
    assert optimal_delta(100, 100, 0.5, 1, 1, 1) == 0.25
    with pytest.raises(ValueError):
        optimal_delta(2, 2, 0.5, 0, 10, 100)


def test_lower_bound_value_at_optimal_delta_is_zero():
    # nT c Delta^2 / ((1-gamma) S A) = 1 exactly at the optimal Delta, so the factor 1 - sqrt(.) vanishes
    delta = optimal_delta(2, 2, 0.9, 8, 10, 100)
    assert abs(lower_bound_value(10, 100, delta, 0.9, 2, 2, 8)) <= 1e-9
    # a quarter of that Delta leaves a positive bound
    assert lower_bound_value(10, 100, delta / 4, 0.9, 2, 2, 8) > 0


def test_bernoulli_kl():
    assert bernoulli_kl(0.3, 0.3) == 0.0
    assert bernoulli_kl(0.5, 0.7) == pytest.approx(0.0872, abs=5e-5)
    for d in (1e-2, 1e-3):
        assert bernoulli_kl(0.5, 0.5 + 2 * d) / d ** 2 == pytest.approx(8.0, rel=0.01)
    assert bernoulli_kl(0.5, 1.0) == math.inf
    assert bernoulli_kl(1.0, 1.0) == 0.0
    with pytest.raises(ValueError):
        bernoulli_kl(1.2, 0.5)


def test_enumeration_single_step_closed_form():
    delta = 0.1
    base = make_hard_pair(2, 2, 0.9, delta, (1, 0))
    mu0 = np.array([0.0, 1.0])
    pair = make_hard_pair(2, 2, 0.9, delta, (1, 0), mu0=mu0)
    assert np.array_equal(pair.m.transition, base.m.transition)
    policy = Policy.deterministic(np.array([0, 0]), 2)
    # step 0 carries weight 1 in the discounted law
    assert enumerate_history_kl(pair, policy, 0) == pytest.approx(bernoulli_kl(0.5, 0.7), abs=1e-15)
    assert occupancy_weighted_kl(pair, policy, 0) == pytest.approx(bernoulli_kl(0.5, 0.7), abs=1e-15)


def test_enumeration_matches_decomposition_uniform():
    pair = make_hard_pair(2, 2, 0.9, 0.1, (1, 1))
    pol = Policy.uniform(2, 2)
    assert abs(enumerate_history_kl(pair, pol, 2) - occupancy_weighted_kl(pair, pol, 2)) <= 1e-9


def test_single_term_decomposition():
    pair = make_hard_pair(2, 2, 0.9, 0.05, (1, 0))
    pol = Policy.uniform(2, 2)
    h = 3
    visits = visit_stats(pair.m, pol, h).visits
    assert occupancy_weighted_kl(pair, pol, h) == pytest.approx(visits[1, 0] * bernoulli_kl(0.5, 0.6), rel=1e-12)


def test_enumeration_on_random_nonuniform_dynamics(rng):
    # the equality does not rely on uniform transitions
    for _ in range(5):
        pair = make_hard_pair(2, 2, 0.8, 0.1, (1, 1))
        t = rng.random((2, 2, 2)) + 0.1
        t /= t.sum(axis=2, keepdims=True)
        mu0 = rng.dirichlet([1, 1])
        m = TabularMdp(t, pair.m.reward_param, True, 0.8, mu0)
        mp = m.with_rewards(pair.m_prime.reward_param)
        pair = type(pair)(m, mp, pair.special_cell, pair.adversarial_cell, 0.1)
        pol = _random_policy(rng, 2, 2)
        assert abs(enumerate_history_kl(pair, pol, 3) - occupancy_weighted_kl(pair, pol, 3)) <= 1e-9


def test_enumeration_guard():
    pair = make_hard_pair(2, 2, 0.9, 0.1, (1, 1))
    with pytest.raises(EnumerationError):
        enumerate_history_kl(pair, Policy.uniform(2, 2), 7)


@pytest.mark.parametrize("h", [0, 1, 5, 40])
def test_visit_conservation(h, rng):
    pair = make_hard_pair(3, 2, 0.9, 0.1, (2, 1))
    stats = visit_stats(pair.m, _random_policy(rng, 3, 2), h, episodes=7)
    assert np.all(stats.visits >= 0)
    assert stats.total == pytest.approx(7 * (1 - 0.9 ** (h + 1)) / 0.1, abs=1e-9)


def test_uniform_learner_pair_sum_exceeds_bound():
    pair = make_hard_pair(2, 2, 0.9, 0.05, (1, 1))
    config = OnlineConfig(rounds=20, episodes_per_round=10)
    for seed in range(3):
        r_m, r_mp, bound = evaluate_learner_on_pair(uniform_learner, pair, config, seed)
        assert r_m + r_mp >= bound
        assert r_m > 0 and r_mp > 0


def test_oracle_learner_zero_regret():
    pair = make_hard_pair(2, 2, 0.9, 0.05, (1, 1))
    r_m, r_mp, _ = evaluate_learner_on_pair(oracle_learner, pair, OnlineConfig(rounds=5))
    assert abs(r_m) <= 1e-9 and abs(r_mp) <= 1e-9


def test_passive_learner_runs():
    pair = make_hard_pair(2, 2, 0.9, 0.05, (1, 1))
    config = OnlineConfig(rounds=3, episodes_per_round=10)
    r_m, r_mp, bound = evaluate_learner_on_pair(passive_memory_learner(20), pair, config, 4)
    assert r_m >= -1e-9 and r_mp >= -1e-9 and np.isfinite(bound)


def test_adaptive_pair_picks_least_visited_cell():
    config = OnlineConfig(rounds=4, episodes_per_round=10)
    # the oracle on M plays action 0 everywhere, so some action-1 cell is never visited
    pair = adaptive_pair(oracle_learner, 2, 2, 0.9, 0.05, config, seed=0)
    assert pair.provenance == "adaptive"
    assert pair.adversarial_cell[1] == 1
    rec = oracle_learner(pair.m, config, 0)
    assert least_visited_cell(pair.m, rec, config.resolved_horizon(0.9), 10) == pair.adversarial_cell
