"""MDP containers, policies, seeded rollouts and the plain-text MDP format."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

ROW_TOL = 1e-12

# splitmix64 constants
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1

# channels of the per-episode uniform stream
_CH_INIT, _CH_ACTION, _CH_REWARD, _CH_NEXT = 0, 1, 2, 3


class MdpFormatError(ValueError):
    """Raised for malformed MDP files or MDPs violating their invariants."""


def _mix64(z: np.ndarray) -> np.ndarray:
    z = z + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministically derive a child 64-bit seed from ``seed`` and integer keys."""
    z = np.array([seed & _MASK64], dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = _mix64(z)
        for k in keys:
            z = _mix64(z ^ np.uint64(k & _MASK64))
    return int(z[0])


def episode_uniforms(seed: int, episodes: np.ndarray, step: int, channel: int) -> np.ndarray:
    """Uniform draws in [0, 1) for the given episode indices at one (step, channel).

    Each value is a hash of (seed, episode, step, channel), so an episode's
    stream does not depend on which other episodes are simulated with it.
    """
    key = np.array([derive_seed(seed)], dtype=np.uint64)
    counter = np.uint64(((step + 1) * 4 + channel) & _MASK64)
    with np.errstate(over="ignore"):
        z = _mix64(key ^ episodes.astype(np.uint64))
        z = _mix64(z + counter * _GOLDEN)
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def _sample_rows(cum: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF sampling, one draw per row of a cumulative table."""
    idx = (u[:, None] >= cum).sum(axis=1)
    return np.minimum(idx, cum.shape[1] - 1)


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Finite MDP with Bernoulli or deterministic rewards in [0, 1].

    ``transition[s, a, s']`` is the next-state law, ``reward_param[s, a]`` the
    Bernoulli success probability or deterministic reward, and
    ``reward_bernoulli[s, a]`` says which of the two applies.
    """

    transition: np.ndarray
    reward_param: np.ndarray
    reward_bernoulli: np.ndarray
    gamma: float
    mu0: np.ndarray

    def __post_init__(self) -> None:
        trans = np.array(self.transition, dtype=float)
        reward = np.array(self.reward_param, dtype=float)
        bern = np.broadcast_to(np.asarray(self.reward_bernoulli, dtype=bool), reward.shape).copy()
        mu0 = np.array(self.mu0, dtype=float)
        if trans.ndim != 3 or trans.shape[0] != trans.shape[2]:
            raise MdpFormatError(f"transition must have shape (S, A, S), got {trans.shape}")
        n_states, n_actions, _ = trans.shape
        if n_states < 1 or n_actions < 1:
            raise MdpFormatError("need at least one state and one action")
        if reward.shape != (n_states, n_actions):
            raise MdpFormatError(f"reward table must have shape {(n_states, n_actions)}")
        if mu0.shape != (n_states,):
            raise MdpFormatError(f"mu0 must have length {n_states}")
        if not 0.0 < float(self.gamma) < 1.0:
            raise MdpFormatError(f"gamma must lie in (0, 1), got {self.gamma}")
        for s in range(n_states):
            for a in range(n_actions):
                row = trans[s, a]
                if np.any(row < 0):
                    raise MdpFormatError(f"row (s={s},a={a}) has a negative entry")
                total = row.sum()
                if abs(total - 1.0) > ROW_TOL:
                    raise MdpFormatError(f"row (s={s},a={a}) sums to {total:g}")
        if np.any(mu0 < 0) or abs(mu0.sum() - 1.0) > ROW_TOL:
            raise MdpFormatError(f"mu0 must be a distribution (sums to {mu0.sum():g})")
        bad = np.argwhere((reward < 0) | (reward > 1))
        if len(bad):
            s, a = bad[0]
            raise MdpFormatError(
                f"reward parameter out of [0,1] at (s={s},a={a}): {reward[s, a]:g}"
            )
        for name, arr in (("transition", trans), ("reward_param", reward),
                          ("reward_bernoulli", bern), ("mu0", mu0)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def n_cells(self) -> int:
        return self.n_states * self.n_actions

    @property
    def mean_reward(self) -> np.ndarray:
        # Bernoulli mean and deterministic value coincide with the parameter
        return self.reward_param

    def with_rewards(self, reward_param: np.ndarray, reward_bernoulli=None) -> "TabularMdp":
        bern = self.reward_bernoulli if reward_bernoulli is None else reward_bernoulli
        return TabularMdp(self.transition, reward_param, bern, self.gamma, self.mu0)


@dataclass(frozen=True, eq=False)
class ContinuousMdp:
    """Compact box state space with finitely many actions.

    ``transition_sampler(s, a, rng)`` returns a next state inside the box,
    ``reward_fn(s, a)`` a reward in [0, 1] and ``mu0_sampler(rng)`` an
    initial state. ``holder_beta``/``holder_const`` describe the smoothness
    of the induced occupancy density, when known.
    """

    state_low: np.ndarray
    state_high: np.ndarray
    n_actions: int
    transition_sampler: Callable[[np.ndarray, int, np.random.Generator], np.ndarray]
    reward_fn: Callable[[np.ndarray, int], float]
    gamma: float
    mu0_sampler: Callable[[np.random.Generator], np.ndarray]
    transition_density: Callable[[np.ndarray, int, np.ndarray], float] | None = None
    action_measure: float | None = None
    holder_beta: int = 2
    holder_const: float = 1.0

    def __post_init__(self) -> None:
        low = np.atleast_1d(np.asarray(self.state_low, dtype=float))
        high = np.atleast_1d(np.asarray(self.state_high, dtype=float))
        if low.shape != high.shape or np.any(high <= low):
            raise ValueError("state box must satisfy low < high coordinatewise")
        if self.n_actions < 1:
            raise ValueError("n_actions must be positive")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        object.__setattr__(self, "state_low", low)
        object.__setattr__(self, "state_high", high)
        if self.action_measure is None:
            object.__setattr__(self, "action_measure", float(self.n_actions))

    @property
    def state_dim(self) -> int:
        return self.state_low.shape[0]

    @property
    def state_volume(self) -> float:
        return float(np.prod(self.state_high - self.state_low))

    def contains(self, s: np.ndarray) -> bool:
        s = np.asarray(s, dtype=float)
        return bool(np.all(s >= self.state_low) and np.all(s <= self.state_high))


@dataclass(frozen=True, eq=False)
class Policy:
    """Stochastic policy given as a (states x actions) probability table."""

    probs: np.ndarray

    def __post_init__(self) -> None:
        probs = np.array(self.probs, dtype=float)
        if probs.ndim != 2:
            raise ValueError("policy table must be 2-D")
        if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > ROW_TOL):
            raise ValueError("policy rows must be distributions")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "Policy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions: Sequence[int], n_actions: int) -> "Policy":
        probs = np.zeros((len(actions), n_actions))
        probs[np.arange(len(actions)), np.asarray(actions)] = 1.0
        return cls(probs)

    @classmethod
    def mixture(cls, weight: float, first: "Policy", second: "Policy") -> "Policy":
        return cls(weight * first.probs + (1.0 - weight) * second.probs)

    def row_index(self, states: np.ndarray) -> np.ndarray:
        return np.asarray(states, dtype=int)

    def action_probs(self, states: np.ndarray) -> np.ndarray:
        return self.probs[self.row_index(states)]

    def greedy_actions(self) -> np.ndarray:
        return np.argmax(self.probs, axis=1)


@dataclass(frozen=True, eq=False)
class BinnedPolicy(Policy):
    """Policy over a box state space: uniform grid bins, one action law per bin."""

    low: np.ndarray = field(default_factory=lambda: np.zeros(1))
    high: np.ndarray = field(default_factory=lambda: np.ones(1))
    bins: int = 1

    def __post_init__(self) -> None:
        super().__post_init__()
        low = np.atleast_1d(np.asarray(self.low, dtype=float))
        high = np.atleast_1d(np.asarray(self.high, dtype=float))
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)
        if self.probs.shape[0] != self.bins ** low.shape[0]:
            raise ValueError("policy table needs one row per grid bin")

    def row_index(self, states: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(states, dtype=float))
        if x.shape[-1] != self.low.shape[0]:
            x = x.reshape(-1, self.low.shape[0])
        rel = (x - self.low) / (self.high - self.low)
        cell = np.clip((rel * self.bins).astype(int), 0, self.bins - 1)
        return np.ravel_multi_index(tuple(cell.T), (self.bins,) * self.low.shape[0])


@dataclass(frozen=True, eq=False)
class Episode:
    """One rollout: arrays indexed by step h = 0..H."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    horizon: int
    seed: int

    def __len__(self) -> int:
        return len(self.actions)

    def steps(self) -> list[tuple]:
        """(state, action, reward, next_state) for h = 0..H."""
        return list(zip(self.states, self.actions, self.rewards, self.next_states))


@dataclass(frozen=True, eq=False)
class EpisodeBatch:
    """Rollouts stored column-wise, shape (n, H+1) (plus state dims if continuous)."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    horizon: int
    seed: int

    @property
    def n(self) -> int:
        return self.actions.shape[0]

    def episodes(self) -> list[Episode]:
        return [
            Episode(self.states[i], self.actions[i], self.rewards[i], self.next_states[i],
                    self.horizon, self.seed)
            for i in range(self.n)
        ]

    @classmethod
    def from_episodes(cls, episodes: Sequence[Episode]) -> "EpisodeBatch":
        if not episodes:
            raise ValueError("empty episode list")
        horizons = {ep.horizon for ep in episodes}
        if len(horizons) != 1 or any(len(ep) != episodes[0].horizon + 1 for ep in episodes):
            raise ValueError("episodes must share one horizon and have H+1 steps")
        return cls(
            np.stack([ep.states for ep in episodes]),
            np.stack([ep.actions for ep in episodes]),
            np.stack([ep.rewards for ep in episodes]),
            np.stack([ep.next_states for ep in episodes]),
            episodes[0].horizon,
            episodes[0].seed,
        )


def as_batch(episodes: EpisodeBatch | Sequence[Episode]) -> EpisodeBatch:
    if isinstance(episodes, EpisodeBatch):
        if episodes.n == 0:
            raise ValueError("empty episode list")
        return episodes
    return EpisodeBatch.from_episodes(list(episodes))


def rollout_batch(mdp: TabularMdp, policy: Policy, n: int, horizon: int, seed: int,
                  first_episode: int = 0) -> EpisodeBatch:
    """Simulate episodes ``first_episode .. first_episode+n-1`` of a tabular MDP.

    Episode ``i`` only consumes the uniform stream keyed by ``(seed, i)``,
    so any split of the index range reproduces the same episodes.
    """
    if n < 1 or horizon < 0:
        raise ValueError("need n >= 1 and horizon >= 0")
    if policy.probs.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError("policy shape does not match the MDP")
    idx = np.arange(first_episode, first_episode + n, dtype=np.int64)
    pi_cum = np.cumsum(policy.probs, axis=1)
    t_cum = np.cumsum(mdp.transition, axis=2)
    steps = horizon + 1
    states = np.empty((n, steps), dtype=np.int64)
    actions = np.empty((n, steps), dtype=np.int64)
    rewards = np.empty((n, steps))
    next_states = np.empty((n, steps), dtype=np.int64)

    s = _sample_rows(np.broadcast_to(np.cumsum(mdp.mu0), (n, mdp.n_states)),
                     episode_uniforms(seed, idx, -1, _CH_INIT))
    for h in range(steps):
        a = _sample_rows(pi_cum[s], episode_uniforms(seed, idx, h, _CH_ACTION))
        u_r = episode_uniforms(seed, idx, h, _CH_REWARD)
        p = mdp.reward_param[s, a]
        r = np.where(mdp.reward_bernoulli[s, a], (u_r < p).astype(float), p)
        s_next = _sample_rows(t_cum[s, a], episode_uniforms(seed, idx, h, _CH_NEXT))
        states[:, h], actions[:, h], rewards[:, h], next_states[:, h] = s, a, r, s_next
        s = s_next
    return EpisodeBatch(states, actions, rewards, next_states, horizon, seed)


def rollout_continuous_batch(mdp: ContinuousMdp, policy: Policy, n: int, horizon: int,
                             seed: int, first_episode: int = 0) -> EpisodeBatch:
    """Continuous-state rollouts; episode ``i`` draws from ``default_rng([seed, i])``."""
    if n < 1 or horizon < 0:
        raise ValueError("need n >= 1 and horizon >= 0")
    dim, steps = mdp.state_dim, horizon + 1
    states = np.empty((n, steps, dim))
    next_states = np.empty((n, steps, dim))
    actions = np.empty((n, steps), dtype=np.int64)
    rewards = np.empty((n, steps))
    for j in range(n):
        rng = np.random.default_rng([seed & _MASK64, first_episode + j])
        s = np.atleast_1d(np.asarray(mdp.mu0_sampler(rng), dtype=float))
        for h in range(steps):
            if not mdp.contains(s):
                raise ValueError(f"state {s} left the declared box")
            probs = policy.action_probs(s)[0]
            a = int(rng.choice(mdp.n_actions, p=probs))
            r = float(mdp.reward_fn(s, a))
            if not 0.0 <= r <= 1.0:
                raise ValueError(f"reward {r} outside [0, 1]")
            s_next = np.atleast_1d(np.asarray(mdp.transition_sampler(s, a, rng), dtype=float))
            states[j, h], actions[j, h], rewards[j, h], next_states[j, h] = s, a, r, s_next
            s = s_next
    return EpisodeBatch(states, actions, rewards, next_states, horizon, seed)


def rollout(mdp: TabularMdp | ContinuousMdp, policy: Policy, n: int, horizon: int,
            seed: int) -> list[Episode]:
    """Generate ``n`` episodes with steps h = 0..horizon."""
    if isinstance(mdp, TabularMdp):
        return rollout_batch(mdp, policy, n, horizon, seed).episodes()
    return rollout_continuous_batch(mdp, policy, n, horizon, seed).episodes()


def discounted_return(episode: Episode, gamma: float) -> float:
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    r = np.asarray(episode.rewards, dtype=float)
    return float(np.sum(r * gamma ** np.arange(len(r))))


def horizon_for(gamma: float, tol: float = 1e-3) -> int:
    """Smallest H with gamma**(H+1) / (1 - gamma) <= tol."""
    h = int(np.ceil(np.log(tol * (1.0 - gamma)) / np.log(gamma))) - 1
    h = max(h, 0)
    while gamma ** (h + 1) / (1.0 - gamma) > tol:
        h += 1
    return h


# --- plain-text MDP format -------------------------------------------------

def _floats(tokens: list[str], lineno: int) -> list[float]:
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise MdpFormatError(f"line {lineno}: {exc}") from None


def parse_mdp(text: str) -> TabularMdp:
    header: dict[str, float] = {}
    mu0 = None
    trans: dict[tuple[int, int], list[float]] = {}
    rewards: dict[tuple[int, int], tuple[bool, float]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *rest = line.split()
        if key in ("states", "actions", "gamma"):
            if len(rest) != 1:
                raise MdpFormatError(f"line {lineno}: '{key}' takes one value")
            header[key] = _floats(rest, lineno)[0]
        elif key == "mu0":
            mu0 = _floats(rest, lineno)
        elif key in ("trans", "reward"):
            if len(rest) < 3:
                raise MdpFormatError(f"line {lineno}: '{key}' line too short")
            try:
                cell = (int(rest[0]), int(rest[1]))
            except ValueError:
                raise MdpFormatError(f"line {lineno}: state/action must be integers") from None
            if key == "trans":
                trans[cell] = _floats(rest[2:], lineno)
            else:
                kind = rest[2].lower()
                if kind not in ("bernoulli", "det") or len(rest) != 4:
                    raise MdpFormatError(
                        f"line {lineno}: expected 'reward s a bernoulli p' or 'reward s a det r'")
                rewards[cell] = (kind == "bernoulli", _floats(rest[3:], lineno)[0])
        else:
            raise MdpFormatError(f"line {lineno}: unknown keyword '{key}'")

    for key in ("states", "actions", "gamma"):
        if key not in header:
            raise MdpFormatError(f"missing header line '{key}'")
    n_states, n_actions = int(header["states"]), int(header["actions"])
    if n_states < 1 or n_actions < 1:
        raise MdpFormatError("states and actions must be positive")
    if mu0 is None or len(mu0) != n_states:
        raise MdpFormatError(f"mu0 line must list {n_states} probabilities")
    transition = np.zeros((n_states, n_actions, n_states))
    reward = np.zeros((n_states, n_actions))
    bern = np.zeros((n_states, n_actions), dtype=bool)
    for s in range(n_states):
        for a in range(n_actions):
            if (s, a) not in trans:
                raise MdpFormatError(f"missing trans line for (s={s},a={a})")
            if len(trans[s, a]) != n_states:
                raise MdpFormatError(f"trans (s={s},a={a}) must list {n_states} probabilities")
            if (s, a) not in rewards:
                raise MdpFormatError(f"missing reward line for (s={s},a={a})")
            transition[s, a] = trans[s, a]
            bern[s, a], reward[s, a] = rewards[s, a]
    return TabularMdp(transition, reward, bern, header["gamma"], np.array(mu0))


def load_mdp(path: str | Path) -> TabularMdp:
    return parse_mdp(Path(path).read_text())


def format_mdp(mdp: TabularMdp) -> str:
    lines = [f"states {mdp.n_states}", f"actions {mdp.n_actions}", f"gamma {mdp.gamma!r}",
             "mu0 " + " ".join(repr(float(p)) for p in mdp.mu0)]
    for s in range(mdp.n_states):
        for a in range(mdp.n_actions):
            lines.append(f"trans {s} {a} " + " ".join(repr(float(q)) for q in mdp.transition[s, a]))
    for s in range(mdp.n_states):
        for a in range(mdp.n_actions):
            kind = "bernoulli" if mdp.reward_bernoulli[s, a] else "det"
            lines.append(f"reward {s} {a} {kind} {float(mdp.reward_param[s, a])!r}")
    return "\n".join(lines) + "\n"


def save_mdp(mdp: TabularMdp, path: str | Path) -> None:
    Path(path).write_text(format_mdp(mdp))
