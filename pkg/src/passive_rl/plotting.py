"""PNG figures written next to the CSV outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 120,
}


def _save(fig, path: Path) -> None:
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def regret_curves(records: Sequence, labels: Sequence[str], path: str | Path) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for rec, label in zip(records, labels):
            t = np.arange(1, len(rec.cumulative) + 1)
            ax.plot(t, rec.cumulative, lw=1.2, label=label)
        ax.set_xlabel("round")
        ax.set_ylabel("cumulative regret")
        if len(records) <= 8:
            ax.legend(frameon=False)
        _save(fig, Path(path))


def sweep_summary(axis: str, values, means, halfwidths, metric: str, path: str | Path,
                  loglog: bool = False) -> None:
    values, means = np.asarray(values, float), np.asarray(means, float)
    halfwidths = np.nan_to_num(np.asarray(halfwidths, float))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.errorbar(values, means, yerr=halfwidths, marker="o", ms=4, capsize=3, lw=1.2)
        if loglog:
            ax.set_xscale("log")
            ax.set_yscale("log")
            ref = means[0] * np.sqrt(values / values[0])
            ax.plot(values, ref, "k--", lw=0.8, label=r"$\propto\sqrt{T}$" if axis == "T" else "slope 1/2")
            ax.legend(frameon=False)
        ax.set_xlabel(axis)
        ax.set_ylabel(metric.replace("_", " "))
        _save(fig, Path(path))


def pair_audit(pair_sums, bound: float, path: str | Path) -> None:
    pair_sums = np.asarray(pair_sums, float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(np.arange(len(pair_sums)), pair_sums, ".", ms=4, label="pair sum")
        ax.axhline(bound, color="k", ls="--", lw=0.8, label="lower bound")
        ax.set_xlabel("seed index")
        ax.set_ylabel("regret on M + regret on M'")
        ax.legend(frameon=False)
        _save(fig, Path(path))


def density_curves(x, densities, path: str | Path) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for a, d in enumerate(densities):
            ax.plot(x, d, lw=1.2, label=f"action {a}")
        ax.set_xlabel("state")
        ax.set_ylabel("occupancy density")
        ax.legend(frameon=False)
        _save(fig, Path(path))
