"""Online mirror-descent learner seeded by passive memory, plus regret bookkeeping."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .density import (KdeModel, epanechnikov, kde_estimate, kde_l1_bound, kernel_validate,
                      plugin_error_bound, plugin_estimate)
from .dual import extract_occupancy, extract_policy, solve_dual
from .mdp import (BinnedPolicy, ContinuousMdp, Episode, EpisodeBatch, Policy, TabularMdp,
                  as_batch, derive_seed, horizon_for, rollout_batch, rollout_continuous_batch)
from .oracle import OccupancyTable, exact_occupancy, exact_value, kl_divergence, optimal_policy

ETA_FLOOR = 1e-6
MEMORY_STREAM = 0


class SolverError(RuntimeError):
    def __init__(self, round_index: int, report):
        super().__init__(f"dual solver did not converge in round {round_index} "
                         f"(grad {report.grad_inf_norm:.3g} after {report.iterations} iterations)")
        self.round_index = round_index
        self.report = report


@dataclass(frozen=True)
class OnlineConfig:
    rounds: int = 16
    episodes_per_round: int = 100
    horizon: int | None = None
    eta: float | str = "auto"
    estimator: str = "plugin"
    delta: float = 0.05
    seed: int = 0
    smoothing_floor: float = 1e-6
    solver_tol: float = 1e-8
    solver_max_iters: int = 100_000
    bandwidth: float = 0.1
    bins: int = 20

    def __post_init__(self) -> None:
        if self.rounds < 1 or self.episodes_per_round < 1:
            raise ValueError("rounds and episodes_per_round must be >= 1")
        if self.horizon is not None and self.horizon < 0:
            raise ValueError("horizon must be >= 0")
        if self.estimator not in ("plugin", "kde"):
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if not (self.eta == "auto" or (isinstance(self.eta, (int, float)) and self.eta > 0)):
            raise ValueError("eta must be 'auto' or a positive number")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if not 0.0 <= self.smoothing_floor <= 1.0:
            raise ValueError("smoothing_floor must lie in [0, 1]")
        if self.bandwidth <= 0 or self.bins < 1:
            raise ValueError("bandwidth and bins must be positive")

    def resolved_horizon(self, gamma: float) -> int:
        return horizon_for(gamma) if self.horizon is None else self.horizon


@dataclass
class PassiveMemory:
    transitions: list[tuple]
    ref_dist: OccupancyTable | KdeModel
    coverage_ok: bool
    table: OccupancyTable | None = None


@dataclass
class RegretRecord:
    per_round_gap: list[float] = field(default_factory=list)
    cumulative: list[float] = field(default_factory=list)
    policies: list[Policy] = field(default_factory=list)
    eta: float = float("nan")
    solver_iters: list[int] = field(default_factory=list)
    estimator_error_bound: list[float] = field(default_factory=list)
    gap_halfwidth: list[float] = field(default_factory=list)
    references: list[OccupancyTable] = field(default_factory=list)

    def append(self, gap: float, policy: Policy, iters: int, err_bound: float,
               halfwidth: float = 0.0, reference: OccupancyTable | None = None) -> None:
        self.per_round_gap.append(gap)
        if reference is not None:
            self.references.append(reference)
        prev = self.cumulative[-1] if self.cumulative else 0.0
        self.cumulative.append(prev + gap)
        self.policies.append(policy)
        self.solver_iters.append(iters)
        self.estimator_error_bound.append(err_bound)
        self.gap_halfwidth.append(halfwidth)

    @property
    def total(self) -> float:
        return self.cumulative[-1] if self.cumulative else 0.0

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["round", "gap", "cumulative", "eta", "solver_iters",
                             "estimator_error_bound"])
            for t, gap in enumerate(self.per_round_gap):
                writer.writerow([t + 1, repr(gap), repr(self.cumulative[t]), repr(self.eta),
                                 self.solver_iters[t], repr(self.estimator_error_bound[t])])


def smooth(table: np.ndarray, floor: float) -> OccupancyTable:
    """Mix with the uniform table at weight ``floor``."""
    t = np.asarray(table, dtype=float)
    mixed = (1.0 - floor) * t / t.sum() + floor / t.size
    return OccupancyTable(mixed / mixed.sum())


def _transitions(batch: EpisodeBatch) -> list[tuple]:
    out = []
    for i in range(batch.n):
        for h in range(batch.horizon + 1):
            s, s2 = batch.states[i, h], batch.next_states[i, h]
            if np.ndim(s) == 0:
                s, s2 = int(s), int(s2)
            out.append((s, int(batch.actions[i, h]), float(batch.rewards[i, h]), s2))
    return out


def build_memory(episodes: EpisodeBatch | Sequence[Episode], estimator: str = "plugin",
                 smoothing_floor: float = 1e-6, *, gamma: float, shape: tuple[int, int] | None = None,
                 d_star: OccupancyTable | None = None, kernel=None, box=None,
                 bins: int | None = None, keep_transitions: bool = True) -> PassiveMemory:
    """Reference occupancy induced by a fixed dataset, floor-smoothed with the uniform table.

    For ``estimator="kde"`` pass ``kernel`` and ``box=(low, high)``; with
    ``bins`` the estimate is also binned into a table for the tabular solver.
    """
    batch = as_batch(episodes)
    transitions = _transitions(batch) if keep_transitions else []
    if estimator == "plugin":
        raw = plugin_estimate(batch, gamma, batch.horizon, shape)
        ref = smooth(raw.d, smoothing_floor)
        coverage = True
        if d_star is not None:
            coverage = bool(np.all(raw.d[d_star.d > 0] > 0))
        return PassiveMemory(transitions, ref, coverage, ref)
    if estimator == "kde":
        if kernel is None or box is None:
            raise ValueError("kde memory needs a kernel and a state box")
        n_actions = shape[1] if shape else int(batch.actions.max()) + 1
        model = kde_estimate(batch, kernel, gamma, batch.horizon, n_actions, *box)
        table = None
        if bins is not None:
            table = smooth(kde_bin_masses(model, bins), smoothing_floor)
        return PassiveMemory(transitions, model, True, table)
    raise ValueError(f"unknown estimator {estimator!r}")


def collect_memory(mdp: TabularMdp, behaviour: Policy, episodes: int, config: OnlineConfig,
                   seed: int | None = None) -> PassiveMemory:
    """Roll out ``behaviour`` for ``episodes`` episodes and build a plug-in memory."""
    seed = config.seed if seed is None else seed
    h = config.resolved_horizon(mdp.gamma)
    batch = rollout_batch(mdp, behaviour, episodes, h, derive_seed(seed, MEMORY_STREAM))
    return build_memory(batch, "plugin", config.smoothing_floor, gamma=mdp.gamma,
                        shape=(mdp.n_states, mdp.n_actions), keep_transitions=False)


def auto_eta(mdp: TabularMdp, memory: PassiveMemory, config: OnlineConfig,
             d_star: OccupancyTable | None = None) -> float:
    """sqrt(D(d*||d_mem) / (T |S||A| (eps + g^(H+1)/(1-g)))), floored at 1e-6.

    eps is the plug-in error bound for ``episodes_per_round`` episodes; when
    d* is unavailable D is replaced by log(|S||A|).
    """
    cells = mdp.n_cells
    h = config.resolved_horizon(mdp.gamma)
    eps = plugin_error_bound(config.episodes_per_round, cells, config.delta)
    if d_star is None:
        kl = math.log(cells) if cells > 1 else 0.0
    else:
        kl = kl_divergence(d_star, memory.table if memory.table is not None else memory.ref_dist)
    slack = eps + mdp.gamma ** (h + 1) / (1.0 - mdp.gamma)
    return max(math.sqrt(kl / (config.rounds * cells * slack)), ETA_FLOOR)


def regret_upper_bound(mdp: TabularMdp | ContinuousMdp, config: OnlineConfig, kl: float,
                       epsilon: float) -> float:
    """sqrt(kl S A (eps + g^H/(1-g)) n T), implied constant taken as one."""
    if isinstance(mdp, TabularMdp):
        s_measure, a_measure = mdp.n_states, mdp.n_actions
    else:
        s_measure, a_measure = mdp.state_volume, mdp.action_measure
    h = config.resolved_horizon(mdp.gamma)
    slack = epsilon + mdp.gamma ** h / (1.0 - mdp.gamma)
    return math.sqrt(kl * s_measure * a_measure * slack * config.episodes_per_round * config.rounds)


def run_online(mdp: TabularMdp, memory: PassiveMemory, config: OnlineConfig) -> RegretRecord:
    """Mirror descent over occupancies, one regularized dual solve per round.

    Round t solves the dual against the previous reference (the memory for
    t = 1) with reward scaled by eta, deploys the extracted policy for
    ``episodes_per_round`` episodes, re-estimates the reference from them and
    scores the policy with the exact value.
    """
    if config.estimator != "plugin":
        raise ValueError("tabular runs use the plug-in estimator")
    pi_star, v_star = optimal_policy(mdp)
    d_star = exact_occupancy(mdp, pi_star)
    eta = auto_eta(mdp, memory, config, d_star) if config.eta == "auto" else float(config.eta)
    h = config.resolved_horizon(mdp.gamma)
    err_bound = plugin_error_bound(config.episodes_per_round, mdp.n_cells, config.delta)
    ref = memory.table if memory.table is not None else memory.ref_dist
    record = RegretRecord(eta=eta)
    for t in range(1, config.rounds + 1):
        report = solve_dual(ref, mdp, eta, config.solver_tol, config.solver_max_iters)
        if not report.converged:
            raise SolverError(t, report)
        policy = extract_policy(extract_occupancy(report.v_star, ref, mdp, eta))
        batch = rollout_batch(mdp, policy, config.episodes_per_round, h,
                              derive_seed(config.seed, t))
        record.append(v_star - exact_value(mdp, policy), policy, report.iterations, err_bound,
                      reference=ref)
        ref = smooth(plugin_estimate(batch, mdp.gamma, h, (mdp.n_states, mdp.n_actions)).d,
                     config.smoothing_floor)
    return record


# --- continuous-state support ----------------------------------------------

def _bin_centers(low: np.ndarray, high: np.ndarray, bins: int) -> np.ndarray:
    axes = [lo + (np.arange(bins) + 0.5) * (hi - lo) / bins for lo, hi in zip(low, high)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(low))


def _bin_of(x: np.ndarray, low: np.ndarray, high: np.ndarray, bins: int) -> np.ndarray:
    x = np.atleast_2d(x)
    cell = np.clip(((x - low) / (high - low) * bins).astype(int), 0, bins - 1)
    return np.ravel_multi_index(tuple(cell.T), (bins,) * len(low))


def kde_bin_masses(model: KdeModel, bins: int) -> np.ndarray:
    """Midpoint-rule mass of each (bin, action), shape (bins^d, n_actions)."""
    centers = _bin_centers(model.low, model.high, bins)
    vol = float(np.prod((model.high - model.low) / bins))
    masses = np.stack([model.evaluate(centers, a) for a in range(model.n_actions)], axis=1) * vol
    if masses.sum() <= 0:
        masses = np.ones_like(masses)
    return masses


def discretize(mdp: ContinuousMdp, bins: int, samples_per_cell: int = 64, seed: int = 0,
               mu0_samples: int = 4096) -> TabularMdp:
    """Grid approximation of a continuous-state MDP with Monte-Carlo transition rows."""
    low, high = mdp.state_low, mdp.state_high
    centers = _bin_centers(low, high, bins)
    n_cells = len(centers)
    trans = np.zeros((n_cells, mdp.n_actions, n_cells))
    reward = np.zeros((n_cells, mdp.n_actions))
    for c, x in enumerate(centers):
        for a in range(mdp.n_actions):
            rng = np.random.default_rng([seed, c, a])
            nxt = np.array([mdp.transition_sampler(x, a, rng) for _ in range(samples_per_cell)])
            trans[c, a] = np.bincount(_bin_of(nxt.reshape(samples_per_cell, -1), low, high, bins),
                                      minlength=n_cells) / samples_per_cell
            reward[c, a] = mdp.reward_fn(x, a)
    rng = np.random.default_rng([seed, n_cells, mdp.n_actions])
    starts = np.array([mdp.mu0_sampler(rng) for _ in range(mu0_samples)]).reshape(mu0_samples, -1)
    mu0 = np.bincount(_bin_of(starts, low, high, bins), minlength=n_cells) / mu0_samples
    return TabularMdp(trans, reward, False, mdp.gamma, mu0)


def mc_value(mdp: ContinuousMdp, policy: Policy, episodes: int, horizon: int,
             seed: int) -> tuple[float, float]:
    """Truncated Monte-Carlo value with a 95% normal half-width."""
    batch = rollout_continuous_batch(mdp, policy, episodes, horizon, seed)
    returns = batch.rewards @ (mdp.gamma ** np.arange(horizon + 1))
    return float(returns.mean()), float(1.96 * returns.std(ddof=1) / math.sqrt(episodes))


def run_online_continuous(mdp: ContinuousMdp, memory: PassiveMemory, config: OnlineConfig,
                          baseline_value: float | None = None, eval_episodes: int = 10_000,
                          samples_per_cell: int = 64) -> RegretRecord:
    """Continuous-state variant: binned dual, KDE re-estimation, Monte-Carlo scoring.

    ``baseline_value`` stands in for V*; by default it is the Monte-Carlo
    value of the greedy policy of the discretized MDP.
    """
    bins = config.bins
    grid = discretize(mdp, bins, samples_per_cell, seed=derive_seed(config.seed, 0))
    h = config.resolved_horizon(mdp.gamma)
    kernel = kernel_validate(epanechnikov, 2, mdp.state_dim, config.bandwidth, mdp.holder_const)
    if memory.table is None:
        if not isinstance(memory.ref_dist, KdeModel):
            raise ValueError("continuous runs need a KDE memory")
        ref = smooth(kde_bin_masses(memory.ref_dist, bins), config.smoothing_floor)
    else:
        ref = memory.table

    def as_binned(p: Policy) -> BinnedPolicy:
        return BinnedPolicy(p.probs, low=mdp.state_low, high=mdp.state_high, bins=bins)

    eval_seed = derive_seed(config.seed, 1 << 40)
    if baseline_value is None:
        pi_grid, _ = optimal_policy(grid)
        baseline_value, _ = mc_value(mdp, as_binned(pi_grid), eval_episodes, h, eval_seed)
    if config.eta == "auto":
        d_star = exact_occupancy(grid, optimal_policy(grid)[0])
        eta = auto_eta(grid, PassiveMemory([], ref, True, ref), config, d_star)
    else:
        eta = float(config.eta)
    err_bound = kde_l1_bound(kernel, mdp.state_volume, mdp.action_measure,
                             config.episodes_per_round, config.delta)
    record = RegretRecord(eta=eta)
    for t in range(1, config.rounds + 1):
        report = solve_dual(ref, grid, eta, config.solver_tol, config.solver_max_iters)
        if not report.converged:
            raise SolverError(t, report)
        policy = as_binned(extract_policy(extract_occupancy(report.v_star, ref, grid, eta)))
        batch = rollout_continuous_batch(mdp, policy, config.episodes_per_round, h,
                                         derive_seed(config.seed, t))
        model = kde_estimate(batch, kernel, mdp.gamma, h, mdp.n_actions,
                             mdp.state_low, mdp.state_high)
        ref = smooth(kde_bin_masses(model, bins), config.smoothing_floor)
        value, half = mc_value(mdp, policy, eval_episodes, h, eval_seed)
        record.append(baseline_value - value, policy, report.iterations, err_bound, half)
    return record

