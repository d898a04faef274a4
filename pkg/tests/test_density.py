import functools
import math

import numpy as np
import pytest
from scipy import integrate

from passive_rl.benchmarks import bench_2x2, reflected_walk_mdp
from passive_rl.density import (KernelError, bernstein_sup_bound, epanechnikov, kde_bias_bound,
                                kde_estimate, kde_l1_bound, kde_l1_deviation_bound, kernel_validate,
                                plugin_error_bound, plugin_estimate, write_kde_grid_csv)
from passive_rl.experiments import mc_occupancy
from passive_rl.mdp import Episode, Policy, derive_seed, horizon_for, rollout_batch, rollout_continuous_batch
from passive_rl.oracle import truncated_occupancy


def _episode(states, actions, h):
    n = len(states)
    return Episode(np.array(states), np.array(actions), np.zeros(n), np.array(states), h, 0)


def test_plugin_hand_example():
    d = plugin_estimate([_episode([0, 1], [0, 1], 1)], 0.5, 1, (2, 2)).d
    np.testing.assert_allclose(d, [[2 / 3, 0], [0, 1 / 3]], atol=1e-15)


def test_plugin_identical_episodes():
    ep = _episode([0, 1, 1, 0], [1, 0, 1, 1], 3)
    one = plugin_estimate([ep], 0.7, 3, (2, 2)).d
    many = plugin_estimate([ep] * 9, 0.7, 3, (2, 2)).d
    np.testing.assert_allclose(many, one, atol=1e-15)


def test_plugin_horizon_mismatch():
    with pytest.raises(ValueError):
        plugin_estimate([_episode([0, 1], [0, 0], 1)], 0.5, 2)


def test_plugin_unbiased():
    # 10^4 single-episode estimates; their mean is the pooled estimate
    mdp, pol, h = bench_2x2(), Policy.uniform(2, 2), 30
    d_h = truncated_occupancy(mdp, pol, h).d
    batch = rollout_batch(mdp, pol, 10_000, h, seed=77)
    mean, se = mc_occupancy(mdp, pol, 10_000, h, seed=77)
    np.testing.assert_allclose(plugin_estimate(batch, mdp.gamma, h, (2, 2)).d, mean, atol=1e-12)
    assert np.all(np.abs(mean - d_h) <= 3 * se)


def test_plugin_error_bound_examples():
    assert plugin_error_bound(100, 4, 0.05) == pytest.approx(0.04142, abs=1e-4)
    assert plugin_error_bound(400, 4, 0.05) == pytest.approx(plugin_error_bound(100, 4, 0.05) / 4,
                                                             rel=1e-14)
    b = plugin_error_bound(10, 4, 1.0)
    assert math.isfinite(b) and b > 0
    with pytest.raises(ValueError):
        plugin_error_bound(0, 4, 0.05)


@functools.lru_cache(maxsize=None)
def _sup_errors(n, reps, h=30, seed=5):
    mdp, pol = bench_2x2(), Policy.uniform(2, 2)
    d_h = truncated_occupancy(mdp, pol, h).d
    return np.array([np.abs(plugin_estimate(rollout_batch(mdp, pol, n, h, derive_seed(seed, n, r)),
                                            mdp.gamma, h, (2, 2)).d - d_h).max()
                     for r in range(reps)])


@pytest.mark.xfail(strict=True, reason="the closed-form bound shrinks like 1/n; the error like 1/sqrt(n)")
def test_plugin_bound_coverage_large_n():
    errs = _sup_errors(10_000, 200)
    assert np.mean(errs <= plugin_error_bound(10_000, 4, 0.05)) >= 0.95


def test_bernstein_root_coverage_large_n():
    errs = _sup_errors(10_000, 200)
    assert np.mean(errs <= bernstein_sup_bound(10_000, 4, 0.05)) >= 0.95


def test_bernstein_root_solves_inequality():
    for n, cells, delta in [(30, 4, 0.05), (1000, 25, 0.2)]:
        eps = bernstein_sup_bound(n, cells, delta)
        lg = math.log(2 * cells / delta)
        assert n * eps ** 2 == pytest.approx(2 * lg * (1 + eps / 3), rel=1e-12)


def test_kernel_validate_epanechnikov():
    spec = kernel_validate(epanechnikov, 2)
    assert spec.c_k == pytest.approx(0.2, abs=1e-10)
    first, _ = integrate.quad(lambda t: t * epanechnikov(t), -1, 1)
    assert abs(first) < 1e-15


def test_kernel_validate_2d():
    spec = kernel_validate(epanechnikov, 2, dim=2)
    # int int (t1^2 + t2^2) G(t1) G(t2) = 2 * 0.2
    assert spec.c_k == pytest.approx(0.4, abs=1e-8)


def test_kernel_rejections():
    with pytest.raises(KernelError, match="∫G ≠ 1"):
        kernel_validate(lambda x: np.ones_like(np.asarray(x, float)), 2)
    skew = lambda x: 0.5 + 0.25 * np.asarray(x, float)  # noqa: E731
    with pytest.raises(KernelError, match="s=1"):
        kernel_validate(skew, 2)
    assert kernel_validate(skew, 1).beta == 1  # no moment conditions at beta = 1
    with pytest.raises(KernelError):
        kernel_validate(epanechnikov, 2, bandwidth=0.0)
    with pytest.raises(KernelError):
        kernel_validate(epanechnikov, 2).with_bandwidth(-1.0)


def test_kernel_product_support():
    spec = kernel_validate(epanechnikov, 2, dim=2)
    assert spec(np.array([0.0, 0.0])) == pytest.approx(0.5625)
    assert spec(np.array([0.5, 1.5])) == 0.0


def _single_sample(x0, gamma=0.9):
    ep = Episode(np.array([[x0]]), np.array([0]), np.zeros(1), np.array([[x0]]), 0, 0)
    return [ep]


def test_kde_support_and_peak():
    b, x0 = 0.1, 0.4
    spec = kernel_validate(epanechnikov, 2, bandwidth=b)
    model = kde_estimate(_single_sample(x0), spec, 0.9, 0, 1, [0.0], [1.0])
    assert model.evaluate(np.array([[x0 + 2 * b]]), 0)[0] == 0.0
    # (1 - g) / ((1 - g^(H+1)) b) K(0) with H = 0
    assert model.evaluate(np.array([[x0]]), 0)[0] == pytest.approx(0.75 / b, rel=1e-14)


def test_kde_integral_and_boundary_flag():
    spec = kernel_validate(epanechnikov, 2, bandwidth=0.05)
    mdp = reflected_walk_mdp()
    batch = rollout_continuous_batch(mdp, Policy.uniform(1, 2), 50, 10, seed=3)
    model = kde_estimate(batch, spec, mdp.gamma, 10, 2, [-0.5], [1.5])
    assert model.integral() == pytest.approx(1.0, abs=1e-6)
    assert not model.near_boundary
    tight = kde_estimate(batch, spec, mdp.gamma, 10, 2, [0.0], [1.0])
    assert abs(tight.integral() - 1.0) <= 0.02 or tight.near_boundary


def test_kde_dim_mismatch():
    spec = kernel_validate(epanechnikov, 2, dim=2)
    with pytest.raises(KernelError):
        kde_estimate(_single_sample(0.5), spec, 0.9, 0, 1, [0.0], [1.0])


def test_bound_examples():
    spec = kernel_validate(epanechnikov, 2, bandwidth=0.1, holder_const=1.0)
    assert kde_bias_bound(spec) == pytest.approx(0.002, abs=1e-12)
    assert kde_bias_bound(spec.with_bandwidth(0.05)) == pytest.approx(0.002 / 4, rel=1e-9)
    assert kde_bias_bound(spec.with_bandwidth(1e-9)) < 1e-18
    assert kde_l1_bound(spec, 1.0, 1.0, 1000, 0.05) == pytest.approx(0.3890, abs=1e-4)
    assert kde_l1_bound(spec, 1.0, 1.0, 1000, 1.0) == pytest.approx(0.002, abs=1e-12)
    assert kde_l1_bound(spec, 2.0, 3.0, 10 ** 15, 0.05) == pytest.approx(0.012, abs=1e-6)
    assert kde_l1_deviation_bound(spec, 1000, 0.05) == pytest.approx(0.3870, abs=1e-4)


def test_kde_grid_csv(tmp_path):
    spec = kernel_validate(epanechnikov, 2, bandwidth=0.2)
    model = kde_estimate(_single_sample(0.5), spec, 0.9, 0, 1, [0.0], [1.0])
    path = tmp_path / "grid.csv"
    write_kde_grid_csv(model, 11, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "x1,action,density"
    assert len(lines) == 12
    assert float(lines[6].split(",")[2]) == pytest.approx(0.75 / 0.2)


def test_reflected_walk_l1_against_histogram():
    # dense weighted histogram of ~10^6 discounted visits is the oracle
    mdp = reflected_walk_mdp()
    h = horizon_for(mdp.gamma)
    pol = Policy.uniform(1, 2)
    bins = 100
    edges = np.linspace(0.0, 1.0, bins + 1)
    centers = 0.5 * (edges[1:] + edges[:-1])
    big = rollout_continuous_batch(mdp, pol, 26_000, h, seed=derive_seed(99, 0))
    w = np.broadcast_to((1 - mdp.gamma) / (1 - mdp.gamma ** (h + 1)) * mdp.gamma ** np.arange(h + 1),
                        big.actions.shape) / big.n
    s = big.states.reshape(big.n, h + 1)
    truth = np.stack([np.histogram(s[big.actions == a], edges, weights=w[big.actions == a])[0]
                      for a in range(2)]) * bins
    n, delta = 200, 0.05
    spec = kernel_validate(epanechnikov, 2, bandwidth=0.1, holder_const=mdp.holder_const)
    bound = kde_l1_bound(spec, mdp.state_volume, mdp.action_measure, n, delta)
    hits = 0
    for r in range(100):
        batch = rollout_continuous_batch(mdp, pol, n, h, seed=derive_seed(99, 1, r))
        model = kde_estimate(batch, spec, mdp.gamma, h, 2, mdp.state_low, mdp.state_high)
        est = np.stack([model.evaluate(centers[:, None], a) for a in range(2)])
        hits += np.sum(np.abs(est - truth)) / bins <= bound
    assert hits >= 95
