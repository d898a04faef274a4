"""Experiment drivers shared by the CLI and the acceptance suite."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from numpy.polynomial import Polynomial as P
from scipy import integrate, stats

from .benchmarks import BETA33_HOLDER_CONST, beta33_density, iid_resample_mdp
from .density import epanechnikov, kde_estimate, kernel_validate, kde_bias_bound, kde_l1_deviation_bound
from .mdp import Policy, TabularMdp, derive_seed, rollout_batch, rollout_continuous_batch
from .online import OnlineConfig, RegretRecord, collect_memory, run_online
from .oracle import optimal_policy

SEED_STREAM = 0x5EED
REGRET_AXES = ("memory_alpha", "T", "n", "H")
AXES = REGRET_AXES + ("bandwidth",)


def seed_list(master: int, count: int) -> list[int]:
    return [derive_seed(master, SEED_STREAM, i) for i in range(count)]


def memory_behaviour(mdp: TabularMdp, spec: str | float) -> Policy:
    """'uniform', 'optimal', 'mixture:<alpha>' or a bare alpha: alpha pi* + (1 - alpha) uniform."""
    if isinstance(spec, str):
        if spec == "uniform":
            alpha = 0.0
        elif spec == "optimal":
            alpha = 1.0
        elif spec.startswith("mixture:"):
            alpha = float(spec.split(":", 1)[1])
        else:
            raise ValueError(f"unknown memory spec {spec!r}")
    else:
        alpha = float(spec)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("memory mixture weight must lie in [0, 1]")
    uniform = Policy.uniform(mdp.n_states, mdp.n_actions)
    if alpha == 0.0:
        return uniform
    return Policy.mixture(alpha, optimal_policy(mdp)[0], uniform)


def memory_run(mdp: TabularMdp, behaviour: Policy, config: OnlineConfig,
               memory_episodes: int, seed: int) -> RegretRecord:
    memory = collect_memory(mdp, behaviour, memory_episodes, config, seed)
    return run_online(mdp, memory, replace(config, seed=seed))


def mean_ci(values: Sequence[float], level: float = 0.95) -> tuple[float, float]:
    """Mean and Student-t half-width."""
    x = np.asarray(values, dtype=float)
    if len(x) < 2:
        return float(x.mean()), float("nan")
    q = stats.t.ppf(0.5 + level / 2.0, len(x) - 1)
    return float(x.mean()), float(q * x.std(ddof=1) / math.sqrt(len(x)))


def loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


def bootstrap_slope_ci(xs: Sequence[float], per_seed: np.ndarray, reps: int = 2000,
                       level: float = 0.95, seed: int = 0) -> tuple[float, float]:
    """Percentile CI of the slope of log(mean over seeds) vs log x, resampling seeds.

    ``per_seed`` has shape (seeds, len(xs)).
    """
    per_seed = np.asarray(per_seed, dtype=float)
    rng = np.random.default_rng(seed)
    lx = np.log(np.asarray(xs, dtype=float))
    idx = rng.integers(0, per_seed.shape[0], size=(reps, per_seed.shape[0]))
    means = per_seed[idx].mean(axis=1)
    slopes = np.polyfit(lx, np.log(means).T, 1)[0]
    lo, hi = np.quantile(slopes, [(1 - level) / 2, (1 + level) / 2])
    return float(lo), float(hi)


@dataclass
class SweepPoint:
    axis: str
    value: float
    seeds: list[int]
    metric: str
    values: list[float]
    extra: dict

    def summary(self) -> tuple[float, float]:
        return mean_ci(self.values)


def regret_point(mdp: TabularMdp, axis: str, value: float, base: OnlineConfig,
                 memory: str | float, memory_episodes: int, seeds: Sequence[int]) -> SweepPoint:
    """Cumulative regret (value units) for one sweep coordinate across seeds."""
    config = base
    if axis == "T":
        config = replace(base, rounds=int(value))
    elif axis == "n":
        config = replace(base, episodes_per_round=int(value))
    elif axis == "H":
        config = replace(base, horizon=int(value))
    elif axis == "memory_alpha":
        memory = float(value)
    else:
        raise ValueError(f"not a regret axis: {axis!r}")
    behaviour = memory_behaviour(mdp, memory)
    totals, finals, etas = [], [], []
    for s in seeds:
        rec = memory_run(mdp, behaviour, config, memory_episodes, s)
        totals.append(rec.total)
        finals.append(rec.per_round_gap[-1])
        etas.append(rec.eta)
    return SweepPoint(axis, value, list(seeds), "cumulative_regret", totals,
                      {"final_gap": finals, "eta": etas})


# --- kernel estimator audit on a known smooth occupancy ----------------------

def smoothed_beta33(x: np.ndarray, bandwidth: float) -> np.ndarray:
    """Exact mean of the kernel estimate, (f * K_b)(x) for the Beta(3,3) density.

    Both factors are polynomials in y on the overlap of [x - b, x + b] and
    [0, 1], so the convolution is integrated in closed form.
    """
    f = P([0.0, 0.0, 30.0, -60.0, 30.0])
    out = np.zeros(len(x))
    for i, xi in enumerate(np.asarray(x, dtype=float)):
        lo, hi = max(0.0, xi - bandwidth), min(1.0, xi + bandwidth)
        if lo >= hi:
            continue
        u = P([xi / bandwidth, -1.0 / bandwidth])  # (x - y) / b
        prod = (0.75 * (1.0 - u * u) * f).integ()
        out[i] = (prod(hi) - prod(lo)) / bandwidth
    return out


@dataclass
class KdeAudit:
    bandwidth: float
    n: int
    delta: float
    sup_bias: float
    bias_bound: float
    deviations: np.ndarray
    deviation_bound: float
    c_k: float

    @property
    def frequency(self) -> float:
        return float(np.mean(self.deviations <= self.deviation_bound))


def kde_audit(bandwidths: Sequence[float], n: int = 200, reps: int = 100, delta: float = 0.05,
              seed: int = 0, horizon: int | None = None, grid_points: int = 1201) -> list[KdeAudit]:
    """Bias and L1 concentration of the kernel estimate on i.i.d. Beta(3,3) states.

    Sup bias is measured against the exact convolution f * K_b on interior
    points (support widened by 2b); L1 deviations of each replicate are taken
    from that same exact mean on a uniform grid over the state box.
    """
    mdp = iid_resample_mdp()
    h = 20 if horizon is None else horizon
    low, high = float(mdp.state_low[0]), float(mdp.state_high[0])
    x = np.linspace(low, high, grid_points)
    policy = Policy.uniform(1, 1)
    batches = [rollout_continuous_batch(mdp, policy, n, h, derive_seed(seed, r)) for r in range(reps)]
    out = []
    for b in bandwidths:
        kernel = kernel_validate(epanechnikov, 2, 1, b, BETA33_HOLDER_CONST)
        mean = smoothed_beta33(x, b)
        interior = (x >= -2 * b) & (x <= 1 + 2 * b)
        sup_bias = float(np.max(np.abs(mean[interior] - beta33_density(x[interior]))))
        devs = []
        for batch in batches:
            model = kde_estimate(batch, kernel, mdp.gamma, h, 1, low, high)
            est = model.evaluate(x[:, None], 0)
            devs.append(float(integrate.trapezoid(np.abs(est - mean), x)))
        out.append(KdeAudit(b, n, delta, sup_bias, kde_bias_bound(kernel), np.array(devs),
                            kde_l1_deviation_bound(kernel, n, delta), kernel.c_k))
    return out


def bandwidth_point(value: float, n: int, delta: float, seeds: Sequence[int]) -> SweepPoint:
    """L1 deviation of the kernel estimate (Beta(3,3) occupancy) at one bandwidth, one replicate per seed."""
    mdp = iid_resample_mdp()
    kernel = kernel_validate(epanechnikov, 2, 1, value, BETA33_HOLDER_CONST)
    low, high = float(mdp.state_low[0]), float(mdp.state_high[0])
    x = np.linspace(low, high, 1201)
    mean = smoothed_beta33(x, value)
    devs = []
    for s in seeds:
        batch = rollout_continuous_batch(mdp, Policy.uniform(1, 1), n, 20, s)
        est = kde_estimate(batch, kernel, mdp.gamma, 20, 1, low, high).evaluate(x[:, None], 0)
        devs.append(float(integrate.trapezoid(np.abs(est - mean), x)))
    bound = kde_l1_deviation_bound(kernel, n, delta)
    return SweepPoint("bandwidth", value, list(seeds), "l1_deviation", devs,
                      {"deviation_bound": [bound] * len(devs),
                       "bias_bound": [kde_bias_bound(kernel)] * len(devs)})


def mc_occupancy(mdp: TabularMdp, policy: Policy, episodes: int, horizon: int,
                 seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Monte-Carlo normalized occupancy and per-cell standard errors.

    Each episode contributes its own normalized discounted visit vector; the
    estimate is their mean and the standard error is sd / sqrt(episodes).
    """
    batch = rollout_batch(mdp, policy, episodes, horizon, seed)
    cells = mdp.n_cells
    w = (1.0 - mdp.gamma) / (1.0 - mdp.gamma ** (horizon + 1)) * mdp.gamma ** np.arange(horizon + 1)
    idx = np.arange(episodes)[:, None] * cells + batch.states * mdp.n_actions + batch.actions
    per_episode = np.bincount(idx.ravel(), weights=np.broadcast_to(w, idx.shape).ravel(),
                              minlength=episodes * cells).reshape(episodes, cells)
    mean = per_episode.mean(axis=0)
    se = per_episode.std(axis=0, ddof=1) / math.sqrt(episodes)
    shape = (mdp.n_states, mdp.n_actions)
    return mean.reshape(shape), se.reshape(shape)
