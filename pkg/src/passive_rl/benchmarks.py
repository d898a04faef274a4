"""Fixed benchmark MDPs and random instance generators used by tests and sweeps."""

from __future__ import annotations

import numpy as np

from .mdp import ContinuousMdp, Policy, TabularMdp


def two_state_cycle(gamma: float = 0.5) -> TabularMdp:
    """s0 -> s1 -> s0 deterministically, one action, reward 1 in s0 only."""
    trans = np.array([[[0.0, 1.0]], [[1.0, 0.0]]])
    return TabularMdp(trans, [[1.0], [0.0]], False, gamma, [1.0, 0.0])


def single_cell(reward: float = 1.0, gamma: float = 0.5) -> TabularMdp:
    return TabularMdp(np.ones((1, 1, 1)), [[reward]], False, gamma, [1.0])


def bench_2x2() -> TabularMdp:
    trans = np.array([
        [[0.9, 0.1], [0.2, 0.8]],
        [[0.7, 0.3], [0.1, 0.9]],
    ])
    reward = np.array([[0.3, 0.6], [0.9, 0.1]])
    return TabularMdp(trans, reward, True, 0.9, [0.7, 0.3])


def bench_3x2() -> TabularMdp:
    trans = np.array([
        [[0.9, 0.1, 0.0], [0.2, 0.7, 0.1]],
        [[0.6, 0.3, 0.1], [0.1, 0.2, 0.7]],
        [[0.1, 0.2, 0.7], [0.3, 0.3, 0.4]],
    ])
    reward = np.array([[0.2, 0.1], [0.3, 0.2], [0.9, 0.6]])
    return TabularMdp(trans, reward, True, 0.9, [1 / 3, 1 / 3, 1 / 3])


BENCHMARKS = {
    "two_state_cycle": two_state_cycle,
    "bench_2x2": bench_2x2,
    "bench_3x2": bench_3x2,
}


def random_mdp(rng: np.random.Generator, n_states: int, n_actions: int,
               gamma: float | None = None, gamma_range=(0.5, 0.95)) -> TabularMdp:
    """Dirichlet(1) transitions and initial law, Bernoulli rewards with uniform means."""
    trans = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    reward = rng.uniform(size=(n_states, n_actions))
    mu0 = rng.dirichlet(np.ones(n_states))
    if gamma is None:
        gamma = float(rng.uniform(*gamma_range))
    return TabularMdp(trans, reward, True, gamma, mu0)


def random_policy(rng: np.random.Generator, n_states: int, n_actions: int) -> Policy:
    return Policy(rng.dirichlet(np.ones(n_actions), size=n_states))


# Beta(3,3) density on [0, 1]: f = 30 x^2 (1-x)^2, |f''| <= 60 so f' is 60-Lipschitz
BETA33_HOLDER_CONST = 60.0


def beta33_density(x):
    x = np.asarray(x, dtype=float)
    return np.where((x >= 0) & (x <= 1), 30.0 * x ** 2 * (1.0 - x) ** 2, 0.0)


def iid_resample_mdp(low: float = -1.0, high: float = 2.0, gamma: float = 0.9) -> ContinuousMdp:
    """One-action MDP whose states are i.i.d. Beta(3,3) draws.

    Every state, including the first, has law Beta(3,3), so the occupancy
    density is exactly ``beta33_density`` and lies in the Hölder class
    with beta = 2 and L = 60.
    """
    return ContinuousMdp(
        state_low=[low], state_high=[high], n_actions=1,
        transition_sampler=lambda s, a, rng: np.array([rng.beta(3.0, 3.0)]),
        reward_fn=lambda s, a: float(np.clip(s[0], 0.0, 1.0)),
        gamma=gamma,
        mu0_sampler=lambda rng: np.array([rng.beta(3.0, 3.0)]),
        holder_beta=2, holder_const=BETA33_HOLDER_CONST,
    )


def reflected_walk_mdp(gamma: float = 0.8, step: float = 0.1, n_actions: int = 2) -> ContinuousMdp:
    """Gaussian random walk on [0, 1] reflected at the edges; action 1 drifts right.

    Reward is the position, so drifting right is optimal.
    """
    drift = np.linspace(-0.05, 0.05, n_actions)

    def step_fn(s, a, rng):
        x = s[0] + drift[a] + step * rng.standard_normal()
        # fold back into [0, 1]
        x = np.abs(x) % 2.0
        return np.array([2.0 - x if x > 1.0 else x])

    return ContinuousMdp(
        state_low=[0.0], state_high=[1.0], n_actions=n_actions,
        transition_sampler=step_fn,
        reward_fn=lambda s, a: float(s[0]),
        gamma=gamma,
        mu0_sampler=lambda rng: np.array([rng.uniform(0.3, 0.7)]),
    )
