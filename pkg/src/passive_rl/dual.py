"""KL-regularized LP dual: objective, gradient, solver and primal recovery."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mdp import Policy, TabularMdp
from .oracle import OccupancyTable

ARMIJO_C = 1e-4


@dataclass(frozen=True)
class SolveReport:
    v_star: np.ndarray
    objective: float
    grad_inf_norm: float
    iterations: int
    converged: bool

    def csv_row(self) -> dict:
        return {
            "objective": repr(self.objective),
            "grad_inf_norm": repr(self.grad_inf_norm),
            "iterations": self.iterations,
            "converged": int(self.converged),
        }


def _ref(ref_dist: OccupancyTable | np.ndarray) -> np.ndarray:
    return ref_dist.d if isinstance(ref_dist, OccupancyTable) else np.asarray(ref_dist, float)


def _exponent(v: np.ndarray, mdp: TabularMdp, eta: float) -> np.ndarray:
    """eta * R(s,a) + gamma * (T v)(s,a) - v(s)."""
    return eta * mdp.mean_reward + mdp.gamma * (mdp.transition @ v) - v[:, None]


def _log_terms(v, ref_dist, mdp, eta):
    ref = _ref(ref_dist)
    x = np.full(ref.shape, -np.inf)
    pos = ref > 0
    x[pos] = np.log(ref[pos]) + _exponent(v, mdp, eta)[pos]
    m = x.max()
    lse = m + np.log(np.sum(np.exp(x - m)))
    return x, lse


def dual_objective(v: np.ndarray, ref_dist: OccupancyTable | np.ndarray, mdp: TabularMdp,
                   eta: float = 1.0) -> float:
    """(1-g) E_mu0[v] + log E_ref[exp(eta R + g T v - v)], evaluated with a max shift."""
    v = np.asarray(v, dtype=float)
    _, lse = _log_terms(v, ref_dist, mdp, eta)
    return float((1.0 - mdp.gamma) * mdp.mu0 @ v + lse)


def softmax_weights(v: np.ndarray, ref_dist, mdp: TabularMdp, eta: float = 1.0) -> np.ndarray:
    """Tilted reference ref * exp(eta R + g T v - v), normalized over all cells."""
    x, lse = _log_terms(np.asarray(v, dtype=float), ref_dist, mdp, eta)
    return np.exp(x - lse)


def _grad_from_weights(w: np.ndarray, mdp: TabularMdp) -> np.ndarray:
    inflow = np.einsum("sap,sa->p", mdp.transition, w)
    return (1.0 - mdp.gamma) * mdp.mu0 - w.sum(axis=1) + mdp.gamma * inflow


def dual_gradient(v: np.ndarray, ref_dist, mdp: TabularMdp, eta: float = 1.0) -> np.ndarray:
    return _grad_from_weights(softmax_weights(v, ref_dist, mdp, eta), mdp)


def solve_dual(ref_dist: OccupancyTable | np.ndarray, mdp: TabularMdp, eta: float = 1.0,
               tol: float = 1e-8, max_iters: int = 100_000,
               v0: np.ndarray | None = None) -> SolveReport:
    """Gradient descent with Armijo backtracking (step halving) on the dual.

    Each line search starts from twice the previously accepted step. Stops
    once the sup-norm of the gradient is at most ``tol``; hitting
    ``max_iters`` returns ``converged=False`` rather than raising.
    """
    if tol <= 0 or eta <= 0:
        raise ValueError("tol and eta must be positive")
    v = np.zeros(mdp.n_states) if v0 is None else np.array(v0, dtype=float)
    f = dual_objective(v, ref_dist, mdp, eta)
    g = dual_gradient(v, ref_dist, mdp, eta)
    step = 1.0
    it = 0
    while it < max_iters:
        gnorm = float(np.max(np.abs(g)))
        if gnorm <= tol:
            return SolveReport(v, f, gnorm, it, True)
        it += 1
        sq = float(g @ g)
        step = min(2.0 * step, 1e6)
        while True:
            cand = v - step * g
            f_cand = dual_objective(cand, ref_dist, mdp, eta)
            g_cand = dual_gradient(cand, ref_dist, mdp, eta)
            if f_cand <= f - ARMIJO_C * step * sq:
                break
            # Near the optimum the decrease drops below float resolution of f.
            # By convexity phi(t) <= phi(0) + t phi'(t), so this certifies the
            # same Armijo decrease from the (accurate) gradient instead.
            if float(g_cand @ g) >= ARMIJO_C * sq:
                break
            step *= 0.5
            if step < 1e-30:
                return SolveReport(v, f, gnorm, it, False)
        v, f, g = cand, f_cand, g_cand
    gnorm = float(np.max(np.abs(g)))
    return SolveReport(v, f, gnorm, it, gnorm <= tol)


def extract_occupancy(v_star: np.ndarray, ref_dist, mdp: TabularMdp,
                      eta: float = 1.0) -> OccupancyTable:
    w = softmax_weights(v_star, ref_dist, mdp, eta)
    return OccupancyTable(w / w.sum())


def extract_policy(d_tilde: OccupancyTable | np.ndarray) -> Policy:
    """Row-normalize over actions; rows with mass below 1e-12 become uniform."""
    d = _ref(d_tilde)
    mass = d.sum(axis=1, keepdims=True)
    uniform = np.full_like(d, 1.0 / d.shape[1])
    with np.errstate(invalid="ignore", divide="ignore"):
        probs = np.where(mass >= 1e-12, d / np.where(mass > 0, mass, 1.0), uniform)
    probs = probs / probs.sum(axis=1, keepdims=True)
    return Policy(probs)


def regularized_policy(ref_dist, mdp: TabularMdp, eta: float = 1.0, tol: float = 1e-8,
                       max_iters: int = 100_000) -> tuple[Policy, SolveReport]:
    report = solve_dual(ref_dist, mdp, eta, tol, max_iters)
    return extract_policy(extract_occupancy(report.v_star, ref_dist, mdp, eta)), report
