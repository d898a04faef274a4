"""Exact computations on small tabular MDPs: occupancies, values, optimal policies."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mdp import Policy, TabularMdp

FLOW_TOL = 1e-10


class SupportError(ValueError):
    """A distribution puts mass where the reference distribution has none."""


@dataclass(frozen=True, eq=False)
class OccupancyTable:
    """State-action table ``d[s, a]``; normalized tables sum to one."""

    d: np.ndarray
    normalized: bool = True

    def __post_init__(self) -> None:
        d = np.array(self.d, dtype=float)
        if d.ndim != 2 or np.any(d < 0) or not np.all(np.isfinite(d)):
            raise ValueError("occupancy must be a finite nonnegative 2-D table")
        if self.normalized and abs(d.sum() - 1.0) > 1e-10:
            raise ValueError(f"normalized occupancy sums to {d.sum():.12g}")
        d.setflags(write=False)
        object.__setattr__(self, "d", d)

    @property
    def shape(self) -> tuple[int, int]:
        return self.d.shape

    def state_marginal(self) -> np.ndarray:
        return self.d.sum(axis=1)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "OccupancyTable":
        return cls(np.full((n_states, n_actions), 1.0 / (n_states * n_actions)))

    @classmethod
    def from_weights(cls, w: np.ndarray) -> "OccupancyTable":
        w = np.asarray(w, dtype=float)
        return cls(w / w.sum())


@dataclass(frozen=True)
class PerfBoundReport:
    ratio_sup: float
    c: float
    bound: float
    actual_gap: float


def _table(d: OccupancyTable | np.ndarray) -> np.ndarray:
    return d.d if isinstance(d, OccupancyTable) else np.asarray(d, dtype=float)


def state_transition_matrix(mdp: TabularMdp, policy: Policy) -> np.ndarray:
    return np.einsum("sa,sap->sp", policy.probs, mdp.transition)


def flow_residual(mdp: TabularMdp, d: OccupancyTable | np.ndarray) -> float:
    """max_s |sum_a d(s,a) - (1-gamma) mu0(s) - gamma (T_* d)(s)|."""
    table = _table(d)
    inflow = np.einsum("sap,sa->p", mdp.transition, table)
    res = table.sum(axis=1) - (1.0 - mdp.gamma) * mdp.mu0 - mdp.gamma * inflow
    return float(np.max(np.abs(res)))


def exact_occupancy(mdp: TabularMdp, policy: Policy) -> OccupancyTable:
    """Normalized discounted occupancy of ``policy`` from ``mdp.mu0`` by a linear solve."""
    p_pi = state_transition_matrix(mdp, policy)
    lhs = np.eye(mdp.n_states) - mdp.gamma * p_pi.T
    rhs = (1.0 - mdp.gamma) * mdp.mu0
    rho = np.linalg.solve(lhs, rhs)
    # one step of iterative refinement
    rho = rho + np.linalg.solve(lhs, rhs - lhs @ rho)
    rho = np.clip(rho, 0.0, None)
    d = rho[:, None] * policy.probs
    table = d / d.sum()
    resid = flow_residual(mdp, table)
    if resid > FLOW_TOL:
        raise np.linalg.LinAlgError(f"occupancy solve residual {resid:.3g} exceeds {FLOW_TOL}")
    return OccupancyTable(table)


def truncated_occupancy(mdp: TabularMdp, policy: Policy, horizon: int,
                        normalized: bool = True) -> OccupancyTable:
    """Discounted state-action visits over steps h = 0..horizon.

    Unnormalized, entries are E[sum_h gamma^h 1{s_h=s, a_h=a}] and total
    (1 - gamma^(H+1)) / (1 - gamma); normalized, they sum to one.
    """
    p_pi = state_transition_matrix(mdp, policy)
    dist = mdp.mu0.copy()
    visits = np.zeros((mdp.n_states, mdp.n_actions))
    weight = 1.0
    for _ in range(horizon + 1):
        visits += weight * dist[:, None] * policy.probs
        dist = dist @ p_pi
        weight *= mdp.gamma
    if normalized:
        return OccupancyTable(visits / visits.sum())
    return OccupancyTable(visits, normalized=False)


def exact_value(mdp: TabularMdp, policy: Policy) -> float:
    """V^pi(mu0) = E_d[mean reward] / (1 - gamma)."""
    d = exact_occupancy(mdp, policy).d
    return float(np.sum(d * mdp.mean_reward) / (1.0 - mdp.gamma))


def _greedy(q: np.ndarray) -> np.ndarray:
    # lowest action index among (numerical) ties
    scale = max(1.0, float(np.max(np.abs(q))))
    best = q.max(axis=1, keepdims=True)
    return np.argmax(q >= best - 1e-12 * scale, axis=1)


def q_values(mdp: TabularMdp, v: np.ndarray) -> np.ndarray:
    return mdp.mean_reward + mdp.gamma * mdp.transition @ v


def optimal_policy(mdp: TabularMdp, tol: float = 1e-10,
                   max_iters: int = 1_000_000) -> tuple[Policy, float]:
    """Value iteration until the span of the update is below ``tol (1-g)/g``.

    Returns the greedy deterministic policy and its exact value V(mu0).
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    g = mdp.gamma
    v = np.zeros(mdp.n_states)
    for _ in range(max_iters):
        v_new = q_values(mdp, v).max(axis=1)
        diff = v_new - v
        v = v_new
        if diff.max() - diff.min() <= tol * (1.0 - g) / g:
            break
    # span stopping leaves a common offset in v; evaluate the greedy policy exactly
    policy = Policy.deterministic(_greedy(q_values(mdp, v)), mdp.n_actions)
    v_pi = np.linalg.solve(np.eye(mdp.n_states) - g * state_transition_matrix(mdp, policy),
                           np.sum(policy.probs * mdp.mean_reward, axis=1))
    policy = Policy.deterministic(_greedy(q_values(mdp, v_pi)), mdp.n_actions)
    return policy, exact_value(mdp, policy)


def brute_force_optimal_value(mdp: TabularMdp) -> float:
    """Best exact value over all deterministic policies (small MDPs only)."""
    best = -math.inf
    for actions in itertools.product(range(mdp.n_actions), repeat=mdp.n_states):
        best = max(best, exact_value(mdp, Policy.deterministic(actions, mdp.n_actions)))
    return best


def kl_divergence(d1: OccupancyTable | np.ndarray, d2: OccupancyTable | np.ndarray) -> float:
    """D(d1 || d2) in nats with 0 log 0 = 0."""
    p, q = _table(d1).ravel(), _table(d2).ravel()
    if p.shape != q.shape:
        raise ValueError("tables must have the same shape")
    pos = p > 0
    if np.any(q[pos] <= 0):
        cell = int(np.flatnonzero(pos & (q <= 0))[0])
        raise SupportError(f"first table has mass on cell {cell} where the second has none")
    return float(max(np.sum(p[pos] * np.log(p[pos] / q[pos])), 0.0))


def performance_bound(mdp: TabularMdp, d_star: OccupancyTable, d_mem: OccupancyTable,
                      tol: float = 1e-10) -> PerfBoundReport:
    """Suboptimality bound of the KL-regularized solution built on memory ``d_mem``.

    ``bound = sqrt(log(max d*/d_mem) (1-gamma) c |S||A|)`` with
    ``c = 1 / min_s mu0(s)/d_mem(s)`` over the state marginal of ``d_mem``;
    ``actual_gap`` is V* - V of the extracted regularized policy.
    """
    from .dual import extract_occupancy, extract_policy, solve_dual

    ds, dm = _table(d_star), _table(d_mem)
    support = ds > 0
    if np.any(dm[support] <= 0):
        raise SupportError("memory lacks coverage of the optimal occupancy")
    ratio_sup = float(np.max(ds[support] / dm[support]))
    marginal = dm.sum(axis=1)
    if np.any(marginal <= 0):
        raise ZeroDivisionError("memory state marginal has a zero entry")
    min_ratio = float(np.min(np.abs(mdp.mu0 / marginal)))
    c = math.inf if min_ratio == 0 else 1.0 / min_ratio
    log_ratio = max(math.log(ratio_sup), 0.0)
    if log_ratio == 0.0:
        bound = 0.0
    else:
        bound = math.sqrt(log_ratio * (1.0 - mdp.gamma) * c * mdp.n_cells)

    _, v_star = optimal_policy(mdp, tol)
    report = solve_dual(d_mem, mdp, eta=1.0)
    pi_tilde = extract_policy(extract_occupancy(report.v_star, d_mem, mdp, 1.0))
    gap = max(v_star - exact_value(mdp, pi_tilde), 0.0)
    return PerfBoundReport(ratio_sup, c, bound, gap)


def write_occupancy_csv(table: OccupancyTable, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["s", "a", "d"])
        for (s, a), val in np.ndenumerate(table.d):
            writer.writerow([s, a, repr(float(val))])


def read_occupancy_csv(path: str | Path) -> OccupancyTable:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["s", "a", "d"]:
            raise ValueError(f"{path}: expected header s,a,d")
        for row in reader:
            rows.append((int(row["s"]), int(row["a"]), float(row["d"])))
    if not rows:
        raise ValueError(f"{path}: no rows")
    n_states = max(r[0] for r in rows) + 1
    n_actions = max(r[1] for r in rows) + 1
    d = np.zeros((n_states, n_actions))
    for s, a, val in rows:
        d[s, a] = val
    return OccupancyTable(d / d.sum())
