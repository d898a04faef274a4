"""Two-MDP hard instance for the regret lower bound, and history-level KL audits."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .mdp import Policy, TabularMdp, derive_seed
from .online import OnlineConfig, RegretRecord, collect_memory, run_online
from .oracle import exact_value, optimal_policy, truncated_occupancy

ENUMERATION_LIMIT = 10 ** 7
KL_CONSTANT = 8.0
SPECIAL_CELL = (0, 0)


class EnumerationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class HardPair:
    m: TabularMdp
    m_prime: TabularMdp
    special_cell: tuple[int, int]
    adversarial_cell: tuple[int, int]
    delta: float
    provenance: str = "static"


@dataclass(frozen=True, eq=False)
class VisitStats:
    """Expected discounted visits E[sum_h gamma^h 1{(s_h, a_h) = (s, a)}] summed over episodes."""

    visits: np.ndarray
    episodes: int

    @property
    def total(self) -> float:
        return float(self.visits.sum())


def make_hard_pair(n_states: int, n_actions: int, gamma: float, delta: float,
                   adversarial_cell: tuple[int, int], mu0=None,
                   provenance: str = "static") -> HardPair:
    """Uniform-transition pair differing only at ``adversarial_cell``.

    M pays Ber(1/2 + delta) at (0, 0) and Ber(1/2) elsewhere; M' also pays
    Ber(1/2 + 2 delta) at the adversarial cell.
    """
    if n_states * n_actions < 2:
        raise ValueError("need at least two state-action cells")
    if not 0.0 <= delta <= 0.25:
        raise ValueError("delta must lie in [0, 1/4]")
    adversarial_cell = (int(adversarial_cell[0]), int(adversarial_cell[1]))
    if adversarial_cell == SPECIAL_CELL:
        raise ValueError("adversarial cell must differ from the special cell (0, 0)")
    if not (0 <= adversarial_cell[0] < n_states and 0 <= adversarial_cell[1] < n_actions):
        raise ValueError(f"adversarial cell {adversarial_cell} out of range")
    trans = np.full((n_states, n_actions, n_states), 1.0 / n_states)
    if mu0 is None:
        mu0 = np.full(n_states, 1.0 / n_states)
    reward = np.full((n_states, n_actions), 0.5)
    reward[SPECIAL_CELL] = 0.5 + delta
    reward_prime = reward.copy()
    reward_prime[adversarial_cell] = 0.5 + 2.0 * delta
    m = TabularMdp(trans, reward, True, gamma, mu0)
    return HardPair(m, m.with_rewards(reward_prime), SPECIAL_CELL, adversarial_cell,
                    float(delta), provenance)


def optimal_delta(n_states: float, n_actions: float, gamma: float, c: float, n: int,
                  rounds: int) -> float:
    """sqrt(S A (1-gamma) / (c n T)), clamped to (0, 1/4]."""
    if min(n_states, n_actions, c, n, rounds) <= 0 or not 0 < gamma < 1:
        raise ValueError("inputs must be positive")
    return min(math.sqrt(n_states * n_actions * (1.0 - gamma) / (c * n * rounds)), 0.25)


def lower_bound_value(n: int, rounds: int, delta: float, gamma: float, n_states: float,
                      n_actions: float, c: float = KL_CONSTANT) -> float:
    """(n T delta / (2 (1-gamma))) (1 - sqrt(n T c delta^2 / ((1-gamma) S A)))."""
    scale = n * rounds * delta / (2.0 * (1.0 - gamma))
    return scale * (1.0 - math.sqrt(n * rounds * c * delta ** 2 / ((1.0 - gamma) * n_states * n_actions)))


def bernoulli_kl(p: float, q: float) -> float:
    """KL(Ber(p) || Ber(q)) in nats; infinite when p puts mass where q has none."""
    if not (0.0 <= p <= 1.0 and 0.0 <= q <= 1.0):
        raise ValueError("probabilities must lie in [0, 1]")
    total = 0.0
    for a, b in ((p, q), (1.0 - p, 1.0 - q)):
        if a == 0.0:
            continue
        if b == 0.0:
            return math.inf
        total += a * math.log(a / b)
    return max(total, 0.0)


def _cell_kls(pair: HardPair) -> np.ndarray:
    p, q = pair.m.reward_param, pair.m_prime.reward_param
    return np.array([[bernoulli_kl(p[s, a], q[s, a]) for a in range(p.shape[1])]
                     for s in range(p.shape[0])])


def visit_stats(mdp: TabularMdp, policy: Policy, horizon: int, episodes: int = 1) -> VisitStats:
    visits = truncated_occupancy(mdp, policy, horizon, normalized=False).d * episodes
    return VisitStats(visits, episodes)


def occupancy_weighted_kl(pair: HardPair, policy: Policy, horizon: int) -> float:
    """sum_{s,a} E[T_{s,a}(H)] KL(reward law in M || reward law in M')."""
    visits = visit_stats(pair.m, policy, horizon).visits
    kls = _cell_kls(pair)
    mask = visits > 0
    return float(np.sum(visits[mask] * kls[mask]))


def enumerate_history_kl(pair: HardPair, policy: Policy, horizon: int) -> float:
    """Exact KL between the discounted history laws of the two MDPs.

    The discounted law runs the episode and, after each step h < H, stops
    with probability 1 - gamma (it always stops after step H), so step h is
    reached with probability gamma^h. Every history
    (s_0, a_0, r_0, ..., s_k, a_k, r_k) is enumerated with its full product
    probability under each MDP.
    """
    m, mp = pair.m, pair.m_prime
    n_s, n_a = m.n_states, m.n_actions
    if (2 * n_s * n_a) ** (horizon + 1) > ENUMERATION_LIMIT:
        raise EnumerationError(
            f"(2*{n_s}*{n_a})^{horizon + 1} histories exceed the enumeration limit {ENUMERATION_LIMIT}")
    g = m.gamma
    # frontier: histories ending with a sampled state s_h (not yet acted on)
    state = np.arange(n_s)
    p_m = m.mu0.copy()
    p_mp = mp.mu0.copy()
    kl = 0.0
    for h in range(horizon + 1):
        # expand by action and reward
        st = np.repeat(state, n_a * 2)
        act = np.tile(np.repeat(np.arange(n_a), 2), len(state))
        rew = np.tile([0, 1], len(state) * n_a)
        pi = policy.probs[st, act]
        q_m = np.where(rew == 1, m.reward_param[st, act], 1.0 - m.reward_param[st, act])
        q_mp = np.where(rew == 1, mp.reward_param[st, act], 1.0 - mp.reward_param[st, act])
        p_m = np.repeat(p_m, n_a * 2) * pi * q_m
        p_mp = np.repeat(p_mp, n_a * 2) * pi * q_mp
        stop = 1.0 if h == horizon else 1.0 - g
        kl += _leaf_kl(p_m * stop, p_mp * stop)
        if h == horizon:
            break
        # continue with probability gamma and sample s_{h+1}
        nxt = np.tile(np.arange(n_s), len(st))
        t_m = m.transition[np.repeat(st, n_s), np.repeat(act, n_s), nxt]
        t_mp = mp.transition[np.repeat(st, n_s), np.repeat(act, n_s), nxt]
        p_m = np.repeat(p_m, n_s) * g * t_m
        p_mp = np.repeat(p_mp, n_s) * g * t_mp
        state = nxt
    return kl


def _leaf_kl(p: np.ndarray, q: np.ndarray) -> float:
    pos = p > 0
    if np.any(q[pos] == 0):
        return math.inf
    return float(np.sum(p[pos] * np.log(p[pos] / q[pos])))


# --- learners ---------------------------------------------------------------

Learner = Callable[[TabularMdp, OnlineConfig, int], RegretRecord]


def _fixed_policy_record(mdp: TabularMdp, policy: Policy, rounds: int) -> RegretRecord:
    _, v_star = optimal_policy(mdp)
    gap = v_star - exact_value(mdp, policy)
    record = RegretRecord(eta=float("nan"))
    for _ in range(rounds):
        record.append(gap, policy, 0, float("nan"))
    return record


def uniform_learner(mdp: TabularMdp, config: OnlineConfig, seed: int) -> RegretRecord:
    """Deploys the uniform policy every round."""
    return _fixed_policy_record(mdp, Policy.uniform(mdp.n_states, mdp.n_actions), config.rounds)


def oracle_learner(mdp: TabularMdp, config: OnlineConfig, seed: int) -> RegretRecord:
    """Knows the MDP and deploys its optimal policy."""
    return _fixed_policy_record(mdp, optimal_policy(mdp)[0], config.rounds)


def passive_memory_learner(memory_episodes: int = 100, memory_policy: str = "uniform") -> Learner:
    """run_online with a memory collected by the uniform (or optimal) policy."""

    def learner(mdp: TabularMdp, config: OnlineConfig, seed: int) -> RegretRecord:
        if memory_policy == "optimal":
            behaviour = optimal_policy(mdp)[0]
        else:
            behaviour = Policy.uniform(mdp.n_states, mdp.n_actions)
        memory = collect_memory(mdp, behaviour, memory_episodes, config, seed)
        return run_online(mdp, memory, replace(config, seed=seed))

    return learner


def least_visited_cell(mdp: TabularMdp, record: RegretRecord, horizon: int,
                       episodes_per_round: int) -> tuple[int, int]:
    """argmin over cells other than (0, 0) of expected discounted visits of the run."""
    visits = np.zeros((mdp.n_states, mdp.n_actions))
    for policy in record.policies:
        visits += visit_stats(mdp, policy, horizon, episodes_per_round).visits
    visits = visits.copy()
    visits[SPECIAL_CELL] = np.inf
    s, a = np.unravel_index(int(np.argmin(visits)), visits.shape)
    return int(s), int(a)


def adaptive_pair(learner: Learner, n_states: int, n_actions: int, gamma: float, delta: float,
                  config: OnlineConfig, seed: int) -> HardPair:
    """Build M, run the learner on it, and put the 2-delta cell where it visits least."""
    base = make_hard_pair(n_states, n_actions, gamma, delta, (0, 1) if n_actions > 1 else (1, 0))
    record = learner(base.m, config, seed)
    cell = least_visited_cell(base.m, record, config.resolved_horizon(gamma),
                              config.episodes_per_round)
    return make_hard_pair(n_states, n_actions, gamma, delta, cell, provenance="adaptive")


def evaluate_learner_on_pair(learner: Learner, pair: HardPair, config: OnlineConfig,
                             seed: int | None = None, c: float = KL_CONSTANT) -> tuple[float, float, float]:
    """Regret of ``learner`` on M and on M' over all n T episodes, plus the bound's RHS.

    Regrets are ``episodes_per_round`` times the cumulative per-round value
    gap, each scored against its own MDP's optimum.
    """
    seed = config.seed if seed is None else seed
    n, rounds = config.episodes_per_round, config.rounds
    rec_m = learner(pair.m, config, derive_seed(seed, 1))
    rec_mp = learner(pair.m_prime, config, derive_seed(seed, 2))
    bound = lower_bound_value(n, rounds, pair.delta, pair.m.gamma, pair.m.n_states,
                              pair.m.n_actions, c)
    return n * rec_m.total, n * rec_mp.total, bound

