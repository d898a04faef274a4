"""Occupancy estimators (discounted visit counts and kernel smoothing) and their error bounds."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

from .mdp import Episode, EpisodeBatch, as_batch
from .oracle import OccupancyTable

MOMENT_TOL = 1e-8


class KernelError(ValueError):
    pass


def _discount_weights(gamma: float, horizon: int) -> np.ndarray:
    return gamma ** np.arange(horizon + 1)


def _normalizer(gamma: float, horizon: int, n: int) -> float:
    # sum_{h=0}^{H} gamma^h = (1 - gamma^(H+1)) / (1 - gamma)
    return (1.0 - gamma) / (n * (1.0 - gamma ** (horizon + 1)))


def plugin_estimate(episodes: EpisodeBatch | Sequence[Episode], gamma: float, horizon: int,
                    shape: tuple[int, int] | None = None) -> OccupancyTable:
    """Discount-weighted visit frequencies over steps h = 0..H, summing to one.

    ``shape`` is (n_states, n_actions); inferred from the largest visited
    indices when omitted.
    """
    batch = as_batch(episodes)
    if batch.horizon != horizon:
        raise ValueError(f"episodes have horizon {batch.horizon}, expected {horizon}")
    s, a = batch.states, batch.actions
    if shape is None:
        shape = (int(s.max()) + 1, int(a.max()) + 1)
    w = np.broadcast_to(_discount_weights(gamma, horizon), s.shape)
    flat = np.bincount((s * shape[1] + a).ravel(), weights=w.ravel(),
                       minlength=shape[0] * shape[1])
    d = flat.reshape(shape) * _normalizer(gamma, horizon, batch.n)
    # absorb float round-off so the table is exactly normalized
    return OccupancyTable(d / d.sum())


def plugin_error_bound(n: int, cells: int, delta: float) -> float:
    """Sup-norm deviation bound for the plug-in table at confidence 1 - delta.

    (log(db)/3 + sqrt(log(db)^2/9 + 8 log(db))) / (2n) with db = 2 cells / delta.
    """
    if n < 1 or cells < 1 or not 0.0 < delta <= 1.0:
        raise ValueError("need n >= 1, cells >= 1 and delta in (0, 1]")
    lg = math.log(2.0 * cells / delta)
    return (lg / 3.0 + math.sqrt(lg * lg / 9.0 + 8.0 * lg)) / (2.0 * n)


def bernstein_sup_bound(n: int, cells: int, delta: float) -> float:
    """Positive root of n e^2 = 2 log(db) (1 + e/3): (log(db)/3 + sqrt(log(db)^2/9 + 2 n log(db))) / n.

    This solves the same Bernstein-plus-union-bound inequality as
    ``plugin_error_bound`` without dropping n under the square root, so it
    shrinks like 1/sqrt(n).
    """
    if n < 1 or cells < 1 or not 0.0 < delta <= 1.0:
        raise ValueError("need n >= 1, cells >= 1 and delta in (0, 1]")
    lg = math.log(2.0 * cells / delta)
    return (lg / 3.0 + math.sqrt(lg * lg / 9.0 + 2.0 * n * lg)) / n


def epanechnikov(x):
    x = np.asarray(x, dtype=float)
    return np.where(np.abs(x) <= 1.0, 0.75 * (1.0 - x * x), 0.0)


@dataclass(frozen=True, eq=False)
class KernelSpec:
    """Product kernel K(x) = G(x_1)...G(x_d) with validated moments."""

    g: Callable[[np.ndarray], np.ndarray]
    beta: int
    bandwidth: float
    dim: int
    c_k: float
    holder_const: float = 1.0

    def __call__(self, u: np.ndarray) -> np.ndarray:
        """Evaluate K on points of shape (..., dim); zero outside [-1, 1]^dim."""
        u = np.asarray(u, dtype=float)
        inside = np.all(np.abs(u) <= 1.0, axis=-1)
        vals = np.prod(self.g(np.clip(u, -1.0, 1.0)), axis=-1)
        return np.where(inside, vals, 0.0)

    def with_bandwidth(self, bandwidth: float) -> "KernelSpec":
        if bandwidth <= 0:
            raise KernelError("bandwidth must be positive")
        return KernelSpec(self.g, self.beta, bandwidth, self.dim, self.c_k, self.holder_const)


def _quad(f, lo=-1.0, hi=1.0) -> float:
    val, _ = integrate.quad(f, lo, hi, limit=200, epsabs=1e-13, epsrel=1e-13)
    return val


def kernel_validate(g: Callable, beta: int, dim: int = 1, bandwidth: float = 0.1,
                    holder_const: float = 1.0) -> KernelSpec:
    """Check the univariate factor ``g`` numerically and compute C_K.

    Requires int g = 1 and vanishing moments of orders 1..beta-1 (odd or
    even); C_K = int ||t||^beta |K(t)| dt over [-1, 1]^dim.
    """
    if beta < 1 or dim < 1:
        raise KernelError("beta and dim must be positive")
    if bandwidth <= 0:
        raise KernelError("bandwidth must be positive")
    g1 = lambda t: float(np.asarray(g(t)))  # noqa: E731
    total = _quad(g1)
    if abs(total - 1.0) > MOMENT_TOL:
        raise KernelError(f"∫G ≠ 1 (got {total:.10g})")
    for s in range(1, beta):
        m = _quad(lambda t, s=s: t ** s * g1(t))
        if abs(m) > MOMENT_TOL:
            raise KernelError(f"moment of order s={s} does not vanish ({m:.3g})")
    if dim == 1:
        c_k = _quad(lambda t: abs(t) ** beta * abs(g1(t)))
    else:
        def integrand(*t):
            return math.hypot(*t) ** beta * abs(math.prod(g1(ti) for ti in t))
        c_k, _ = integrate.nquad(integrand, [(-1.0, 1.0)] * dim,
                                 opts={"epsabs": 1e-10, "epsrel": 1e-10, "limit": 100})
    return KernelSpec(g, beta, float(bandwidth), dim, float(c_k), float(holder_const))


@dataclass(frozen=True, eq=False)
class KdeModel:
    """Kernel occupancy estimate: one weighted sample cloud per action.

    ``evaluate(x, a)`` is norm * sum_j w_j K((x - x_j) / b) over the samples
    of action ``a``, with norm = (1-g) / (n (1 - g^(H+1)) b^d).
    """

    samples: tuple[np.ndarray, ...]
    weights: tuple[np.ndarray, ...]
    kernel: KernelSpec
    norm: float
    low: np.ndarray
    high: np.ndarray

    @property
    def n_actions(self) -> int:
        return len(self.samples)

    @property
    def near_boundary(self) -> bool:
        """True when some sample sits within one bandwidth of the box edge."""
        b = self.kernel.bandwidth
        for x in self.samples:
            if len(x) and (np.any(x - self.low < b) or np.any(self.high - x < b)):
                return True
        return False

    def evaluate(self, x: np.ndarray, action: int) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, self.kernel.dim)
        pts, w = self.samples[action], self.weights[action]
        out = np.zeros(len(x))
        if len(pts) == 0:
            return out
        b = self.kernel.bandwidth
        order = np.argsort(pts[:, 0], kind="stable")
        pts, w = pts[order], w[order]
        lo = np.searchsorted(pts[:, 0], x[:, 0] - b, side="left")
        hi = np.searchsorted(pts[:, 0], x[:, 0] + b, side="right")
        counts = hi - lo
        chunk = 2_000_000
        start = 0
        # process query points in blocks whose candidate-pair count stays bounded
        while start < len(x):
            stop = start
            acc = 0
            while stop < len(x) and (acc + counts[stop] <= chunk or stop == start):
                acc += counts[stop]
                stop += 1
            c = counts[start:stop]
            if c.sum():
                q = np.repeat(np.arange(start, stop), c)
                offs = np.arange(c.sum()) - np.repeat(np.cumsum(c) - c, c)
                j = np.repeat(lo[start:stop], c) + offs
                k = self.kernel((x[q] - pts[j]) / b) * w[j]
                out[start:stop] = np.bincount(q - start, weights=k, minlength=stop - start)
            start = stop
        return self.norm * out

    def grid(self, points_per_dim: int) -> list[np.ndarray]:
        return [np.linspace(lo, hi, points_per_dim) for lo, hi in zip(self.low, self.high)]

    def grid_values(self, points_per_dim: int) -> np.ndarray:
        """Densities on the tensor grid, shape (n_actions, p, ..., p)."""
        axes = self.grid(points_per_dim)
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.kernel.dim)
        shape = (points_per_dim,) * self.kernel.dim
        return np.stack([self.evaluate(mesh, a).reshape(shape) for a in range(self.n_actions)])

    def integral(self, max_level: int | None = None, tol: float = 1e-9) -> float:
        """Total mass over box x actions by composite Simpson on 2^k + 1 points per dim.

        k grows until doubling changes the result by less than ``tol`` or
        ``max_level`` is reached.
        """
        dim = self.kernel.dim
        if max_level is None:
            max_level = {1: 16, 2: 9}.get(dim, 6)
        prev = None
        val = 0.0
        for k in range(4, max_level + 1):
            p = 2 ** k + 1
            vals = self.grid_values(p)
            axes = self.grid(p)
            val = 0.0
            for a in range(self.n_actions):
                f = vals[a]
                for ax in reversed(axes):
                    f = integrate.simpson(f, x=ax, axis=-1)
                val += float(f)
            if prev is not None and abs(val - prev) < tol:
                break
            prev = val
        return val


def kde_estimate(episodes: EpisodeBatch | Sequence[Episode], kernel: KernelSpec, gamma: float,
                 horizon: int, n_actions: int, low, high) -> KdeModel:
    """Per-action kernel occupancy estimate over the state coordinates."""
    if kernel.bandwidth <= 0:
        raise KernelError("bandwidth must be positive")
    batch = as_batch(episodes)
    if batch.horizon != horizon:
        raise ValueError(f"episodes have horizon {batch.horizon}, expected {horizon}")
    states = batch.states.reshape(batch.n, horizon + 1, -1)
    if states.shape[-1] != kernel.dim:
        raise KernelError(f"kernel dim {kernel.dim} does not match state dim {states.shape[-1]}")
    w = np.broadcast_to(_discount_weights(gamma, horizon), batch.actions.shape)
    samples, weights = [], []
    for a in range(n_actions):
        mask = batch.actions == a
        samples.append(states[mask])
        weights.append(w[mask])
    norm = _normalizer(gamma, horizon, batch.n) / kernel.bandwidth ** kernel.dim
    return KdeModel(tuple(samples), tuple(weights), kernel, norm,
                    np.atleast_1d(np.asarray(low, float)), np.atleast_1d(np.asarray(high, float)))


def kde_bias_bound(kernel: KernelSpec) -> float:
    return kernel.holder_const * kernel.c_k * kernel.bandwidth ** kernel.beta


def kde_l1_bound(kernel: KernelSpec, state_measure: float, action_measure: float, n: int,
                 delta: float) -> float:
    """L C_K b^beta S A + sqrt(ln(1/delta) / (2 n b^(2d)))."""
    if n < 1 or not 0.0 < delta <= 1.0:
        raise ValueError("need n >= 1 and delta in (0, 1]")
    b, d = kernel.bandwidth, kernel.dim
    return (kde_bias_bound(kernel) * state_measure * action_measure
            + math.sqrt(math.log(1.0 / delta) / (2.0 * n * b ** (2 * d))))


def kde_l1_deviation_bound(kernel: KernelSpec, n: int, delta: float) -> float:
    """Concentration part alone: sqrt(ln(1/delta) / (2 n b^(2d)))."""
    b, d = kernel.bandwidth, kernel.dim
    return math.sqrt(math.log(1.0 / delta) / (2.0 * n * b ** (2 * d)))


def write_kde_grid_csv(model: KdeModel, points_per_dim: int, path: str | Path) -> None:
    axes = model.grid(points_per_dim)
    vals = model.grid_values(points_per_dim)
    dim = model.kernel.dim
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"x{i + 1}" for i in range(dim)] + ["action", "density"])
        for a in range(model.n_actions):
            for idx in itertools.product(range(points_per_dim), repeat=dim):
                coords = [repr(float(axes[i][idx[i]])) for i in range(dim)]
                writer.writerow(coords + [a, repr(float(vals[(a,) + idx]))])
