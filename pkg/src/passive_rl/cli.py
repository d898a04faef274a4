"""passive-rl command line: solve, online, sweep, lowerbound, validate-kernel, estimate."""

from __future__ import annotations

import argparse
import csv
import os
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiments as ex
from .benchmarks import BENCHMARKS, iid_resample_mdp, random_policy, reflected_walk_mdp
from .config import ConfigError, load_section
from .density import (KernelError, epanechnikov, kde_bias_bound, kde_estimate, kde_l1_bound,
                      kernel_validate, plugin_error_bound, plugin_estimate, write_kde_grid_csv)
from .dual import extract_occupancy, extract_policy, solve_dual
from .lowerbound import (EnumerationError, ENUMERATION_LIMIT, adaptive_pair, enumerate_history_kl,
                         evaluate_learner_on_pair, make_hard_pair, occupancy_weighted_kl,
                         optimal_delta, oracle_learner, passive_memory_learner, uniform_learner)
from .mdp import (MdpFormatError, Policy, TabularMdp, derive_seed, horizon_for, load_mdp,
                  rollout_batch, rollout_continuous_batch)
from .online import OnlineConfig, PassiveMemory, SolverError, run_online, smooth
from .oracle import OccupancyTable, exact_occupancy, optimal_policy, read_occupancy_csv, write_occupancy_csv

EXIT_OK, EXIT_INVALID, EXIT_NONCONVERGED = 0, 1, 2
THREADS_ENV = "PASSIVE_RL_THREADS"

KERNELS = {
    "epanechnikov": epanechnikov,
    "uniform": lambda x: np.where(np.abs(x) <= 1.0, 0.5, 0.0),
    "triangular": lambda x: np.clip(1.0 - np.abs(x), 0.0, None),
    "biweight": lambda x: np.where(np.abs(x) <= 1.0, 15.0 / 16.0 * (1.0 - x * x) ** 2, 0.0),
    "triweight": lambda x: np.where(np.abs(x) <= 1.0, 35.0 / 32.0 * (1.0 - x * x) ** 3, 0.0),
}
CONTINUOUS_SOURCES = {"iid_beta33": iid_resample_mdp, "reflected_walk": reflected_walk_mdp}


# --- output helpers -----------------------------------------------------------

@contextmanager
def atomic_path(path: Path):
    """Yield a temp path in the same directory; rename onto ``path`` on success."""
    tmp = path.with_name(f".{path.name}.{os.getpid()}.{threading.get_ident()}.tmp")
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def write_rows(path: Path, header, rows) -> None:
    with atomic_path(path) as tmp, open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (list, tuple)):
        return ";".join(_fmt(v) for v in x)
    return str(x)


def write_metadata(out: Path, command: str, params: dict, seeds=()) -> None:
    rows = [("command", command)] + [(k, _fmt(v)) for k, v in sorted(params.items())]
    rows.append(("run_seeds", _fmt(list(seeds))))
    write_rows(out / "run_metadata.csv", ["key", "value"], rows)


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV)
    cap = os.cpu_count() or 1
    if raw is None:
        return cap
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer")
    return min(n, cap)


def fan_out(fn, items):
    items = list(items)
    workers = min(worker_count(), max(len(items), 1))
    if workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def resolve_mdp(name: str) -> TabularMdp:
    if name in BENCHMARKS:
        return BENCHMARKS[name]()
    return load_mdp(name)


def _memory_table(mdp: TabularMdp, spec: str) -> OccupancyTable:
    if spec == "uniform":
        return OccupancyTable.uniform(mdp.n_states, mdp.n_actions)
    if spec == "optimal":
        return exact_occupancy(mdp, optimal_policy(mdp)[0])
    table = read_occupancy_csv(spec)
    if table.shape != (mdp.n_states, mdp.n_actions):
        raise ConfigError(f"memory table shape {table.shape} does not match the MDP "
                          f"({mdp.n_states}, {mdp.n_actions})")
    return table


def _online_config(p: dict) -> OnlineConfig:
    keys = ("rounds", "episodes_per_round", "horizon", "eta", "delta", "seed", "smoothing_floor",
            "solver_tol", "solver_max_iters")
    return OnlineConfig(**{k: p[k] for k in keys})


# --- commands -------------------------------------------------------------------

def cmd_solve(p: dict, out: Path, plots: bool) -> int:
    mdp = resolve_mdp(p["mdp"])
    memory = _memory_table(mdp, p["memory"])
    if p["eta"] <= 0 or p["tol"] <= 0 or p["max_iters"] < 1:
        raise ConfigError("eta and tol must be positive and max_iters >= 1")
    report = solve_dual(memory, mdp, p["eta"], p["tol"], p["max_iters"])
    row = report.csv_row()
    write_rows(out / "solve_report.csv", list(row), [list(row.values())])
    d_tilde = extract_occupancy(report.v_star, memory, mdp, p["eta"])
    policy = extract_policy(d_tilde)
    write_rows(out / "policy.csv", ["s", "a", "prob"],
               [[s, a, repr(float(v))] for (s, a), v in np.ndenumerate(policy.probs)])
    with atomic_path(out / "occupancy.csv") as tmp:
        write_occupancy_csv(d_tilde, tmp)
    write_metadata(out, "solve", p, [p["seed"]])
    if not report.converged:
        print(f"solve: no convergence after {report.iterations} iterations "
              f"(grad {report.grad_inf_norm:.3g})", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_online(p: dict, out: Path, plots: bool) -> int:
    mdp = resolve_mdp(p["mdp"])
    config = _online_config(p)
    if p["seeds"] < 1 or p["memory_episodes"] < 1:
        raise ConfigError("seeds and memory_episodes must be >= 1")
    table = None
    if p["memory"] not in ("uniform", "optimal") and not p["memory"].startswith("mixture:"):
        table = smooth(_memory_table(mdp, p["memory"]).d, config.smoothing_floor)
        behaviour = None
    else:
        behaviour = ex.memory_behaviour(mdp, p["memory"])
    seeds = ex.seed_list(p["seed"], p["seeds"])

    def one(seed):
        if table is not None:
            return run_online(mdp, PassiveMemory([], table, True, table), replace(config, seed=seed))
        return ex.memory_run(mdp, behaviour, config, p["memory_episodes"], seed)

    records = fan_out(one, seeds)
    for i, rec in enumerate(records):
        with atomic_path(out / f"regret_seed{i}.csv") as tmp:
            rec.write_csv(tmp)
    cum = np.array([r.cumulative for r in records])
    gaps = np.array([r.per_round_gap for r in records])
    rows = []
    for t in range(config.rounds):
        mean, half = ex.mean_ci(cum[:, t])
        rows.append([t + 1, repr(float(gaps[:, t].mean())), repr(mean), repr(half)])
    write_rows(out / "summary.csv", ["round", "mean_gap", "mean_cumulative", "cumulative_halfwidth"],
               rows)
    write_metadata(out, "online", p, seeds)
    if plots:
        from . import plotting
        plotting.regret_curves(records, [f"seed {i}" for i in range(len(records))],
                               out / "regret.png")
    return EXIT_OK


def cmd_sweep(p: dict, out: Path, plots: bool) -> int:
    axis, values = p["axis"], p["values"]
    if axis not in ex.AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {', '.join(ex.AXES)}")
    if not values:
        raise ConfigError("sweep axis has no values")
    if p["seeds"] < 1:
        raise ConfigError("seeds must be >= 1")
    if axis in ("T", "n") and any(v < 1 or v != int(v) for v in values):
        raise ConfigError(f"{axis} values must be positive integers")
    if axis == "H" and any(v < 0 or v != int(v) for v in values):
        raise ConfigError("H values must be nonnegative integers")
    if axis == "memory_alpha" and any(not 0 <= v <= 1 for v in values):
        raise ConfigError("memory_alpha values must lie in [0, 1]")
    if axis == "bandwidth" and any(v <= 0 for v in values):
        raise ConfigError("bandwidth values must be positive")
    seeds = ex.seed_list(p["seed"], p["seeds"])
    if axis == "bandwidth":
        def point(v):
            return ex.bandwidth_point(v, p["kde_episodes"], p["delta"], seeds)
    else:
        mdp = resolve_mdp(p["mdp"])
        base = _online_config(p)

        def point(v):
            return ex.regret_point(mdp, axis, v, base, p["memory"], p["memory_episodes"], seeds)

    points = fan_out(point, values)
    summary = []
    for i, pt in enumerate(points):
        header = ["seed", pt.metric] + list(pt.extra)
        rows = [[s, repr(v)] + [repr(float(pt.extra[k][j])) for k in pt.extra]
                for j, (s, v) in enumerate(zip(pt.seeds, pt.values))]
        write_rows(out / f"point_{axis}_{i:02d}.csv", header, rows)
        summary.append((pt.value, *pt.summary()))
    slope = lo = hi = ""
    loglog = axis in ("T", "n") and len(values) >= 2 and all(m > 0 for _, m, _ in summary)
    if loglog:
        xs = [v for v, _, _ in summary]
        slope = repr(ex.loglog_slope(xs, [m for _, m, _ in summary]))
        per_seed = np.array([pt.values for pt in points]).T
        lo, hi = (repr(x) for x in ex.bootstrap_slope_ci(xs, per_seed, seed=p["seed"]))
    write_rows(out / "summary.csv",
               ["axis", "value", "metric", "mean", "halfwidth", "n_seeds", "loglog_slope",
                "slope_ci_low", "slope_ci_high"],
               [[axis, repr(float(v)), points[0].metric, repr(m), repr(h), len(seeds), slope, lo, hi]
                for v, m, h in summary])
    write_metadata(out, "sweep", p, seeds)
    if plots:
        from . import plotting
        plotting.sweep_summary(axis, [s[0] for s in summary], [s[1] for s in summary],
                               [s[2] for s in summary], points[0].metric, out / "summary.png",
                               loglog=loglog)
    return EXIT_OK


LEARNERS = {"uniform": lambda p: uniform_learner, "oracle": lambda p: oracle_learner,
            "passive": lambda p: passive_memory_learner(p["memory_episodes"])}


def cmd_lowerbound(p: dict, out: Path, plots: bool) -> int:
    n_s, n_a, gamma = p["n_states"], p["n_actions"], p["gamma"]
    if p["learner"] not in LEARNERS:
        raise ConfigError(f"unknown learner {p['learner']!r}")
    if p["mode"] not in ("adaptive", "static"):
        raise ConfigError("mode must be 'adaptive' or 'static'")
    if not 0 < gamma < 1 or p["seeds"] < 1 or p["audit_policies"] < 0:
        raise ConfigError("need gamma in (0, 1), seeds >= 1 and audit_policies >= 0")
    for h in p["audit_horizons"]:
        if h < 0:
            raise ConfigError("audit horizons must be nonnegative")
        if (2 * n_s * n_a) ** (h + 1) > ENUMERATION_LIMIT:
            raise EnumerationError(f"audit horizon H={h}: (2*{n_s}*{n_a})^{h + 1} histories exceed "
                                   f"the enumeration limit {ENUMERATION_LIMIT}")
    n, rounds = p["episodes_per_round"], p["rounds"]
    if p["delta"] == "optimal":
        delta = optimal_delta(n_s, n_a, gamma, p["c"], n, rounds)
    else:
        delta = float(p["delta"])
    config = OnlineConfig(rounds=rounds, episodes_per_round=n, horizon=p["horizon"], seed=p["seed"])
    learner = LEARNERS[p["learner"]](p)
    static = make_hard_pair(n_s, n_a, gamma, delta, p["adversarial_cell"])
    seeds = ex.seed_list(p["seed"], p["seeds"])

    def one(seed):
        pair = static
        if p["mode"] == "adaptive":
            pair = adaptive_pair(learner, n_s, n_a, gamma, delta, config, derive_seed(seed, 0))
        r_m, r_mp, bound = evaluate_learner_on_pair(learner, pair, config, seed, p["c"])
        return r_m, r_mp, bound, pair.adversarial_cell

    results = fan_out(one, seeds)
    rows = [[s, repr(r_m), repr(r_mp), repr(r_m + r_mp), repr(bound), repr(delta),
             int(r_m + r_mp >= bound), f"{cell[0]};{cell[1]}"]
            for s, (r_m, r_mp, bound, cell) in zip(seeds, results)]
    write_rows(out / "pair_audit.csv", ["seed", "R_m", "R_m_prime", "pair_sum", "lower_bound_value",
                                        "delta", "holds", "adversarial_cell"], rows)

    rng = np.random.default_rng(derive_seed(p["seed"], 0xA0D17))
    policies = [random_policy(rng, n_s, n_a) for _ in range(p["audit_policies"])]
    kl_rows = []
    for h in p["audit_horizons"]:
        for i, pol in enumerate(policies):
            enum = enumerate_history_kl(static, pol, h)
            weighted = occupancy_weighted_kl(static, pol, h)
            kl_rows.append([h, i, repr(enum), repr(weighted), repr(abs(enum - weighted))])
    write_rows(out / "kl_audit.csv", ["horizon", "policy", "enumerated_kl", "weighted_kl", "abs_diff"],
               kl_rows)
    write_metadata(out, "lowerbound", {**p, "delta_used": delta}, seeds)
    if plots:
        from . import plotting
        plotting.pair_audit([r[0] + r[1] for r in results], results[0][2], out / "pair_audit.png")
    return EXIT_OK


def cmd_validate_kernel(p: dict, out: Path, plots: bool) -> int:
    if p["kernel"] not in KERNELS:
        raise ConfigError(f"unknown kernel {p['kernel']!r}; choose from {', '.join(KERNELS)}")
    base, scale = KERNELS[p["kernel"]], p["scale"]
    spec = kernel_validate(lambda x: scale * base(x), p["beta"], p["dim"], p["bandwidth"],
                           p["holder_const"])
    write_rows(out / "kernel.csv", ["kernel", "scale", "beta", "dim", "bandwidth", "c_k", "bias_bound"],
               [[p["kernel"], repr(scale), spec.beta, spec.dim, repr(spec.bandwidth),
                 repr(spec.c_k), repr(kde_bias_bound(spec))]])
    t = np.linspace(-1.0, 1.0, p["grid_points"])
    write_rows(out / "kernel_grid.csv", ["t", "g"],
               [[repr(float(a)), repr(float(b))] for a, b in zip(t, spec.g(t))])
    write_metadata(out, "validate-kernel", p, [p["seed"]])
    print(f"C_K = {spec.c_k:.10g}")
    return EXIT_OK


def cmd_estimate(p: dict, out: Path, plots: bool) -> int:
    if p["episodes"] < 1:
        raise ConfigError("episodes must be >= 1")
    seed = derive_seed(p["seed"], 1)
    if p["source"] in CONTINUOUS_SOURCES:
        if p["estimator"] != "kde":
            raise ConfigError("continuous sources use estimator = kde")
        mdp = CONTINUOUS_SOURCES[p["source"]]()
        h = horizon_for(mdp.gamma) if p["horizon"] is None else p["horizon"]
        kernel = kernel_validate(epanechnikov, 2, mdp.state_dim, p["bandwidth"], mdp.holder_const)
        policy = Policy.uniform(1, mdp.n_actions)
        batch = rollout_continuous_batch(mdp, policy, p["episodes"], h, seed)
        model = kde_estimate(batch, kernel, mdp.gamma, h, mdp.n_actions, mdp.state_low, mdp.state_high)
        with atomic_path(out / "kde_grid.csv") as tmp:
            write_kde_grid_csv(model, p["grid_points"], tmp)
        bound = kde_l1_bound(kernel, mdp.state_volume, mdp.action_measure, p["episodes"], p["delta"])
        write_metadata(out, "estimate", {**p, "horizon_used": h, "l1_bound": bound,
                                         "near_boundary": int(model.near_boundary)}, [seed])
        if plots and mdp.state_dim == 1:
            from . import plotting
            plotting.density_curves(model.grid(p["grid_points"])[0],
                                    model.grid_values(p["grid_points"]), out / "density.png")
        return EXIT_OK
    if p["estimator"] != "plugin":
        raise ConfigError("tabular sources use estimator = plugin")
    mdp = resolve_mdp(p["source"])
    if p["policy"] == "uniform":
        policy = Policy.uniform(mdp.n_states, mdp.n_actions)
    elif p["policy"] == "optimal":
        policy = optimal_policy(mdp)[0]
    else:
        raise ConfigError("policy must be 'uniform' or 'optimal'")
    h = horizon_for(mdp.gamma) if p["horizon"] is None else p["horizon"]
    batch = rollout_batch(mdp, policy, p["episodes"], h, seed)
    table = plugin_estimate(batch, mdp.gamma, h, (mdp.n_states, mdp.n_actions))
    with atomic_path(out / "occupancy.csv") as tmp:
        write_occupancy_csv(table, tmp)
    bound = plugin_error_bound(p["episodes"], mdp.n_cells, p["delta"])
    write_metadata(out, "estimate", {**p, "horizon_used": h, "sup_bound": bound}, [seed])
    return EXIT_OK


COMMANDS = {
    "solve": cmd_solve,
    "online": cmd_online,
    "sweep": cmd_sweep,
    "lowerbound": cmd_lowerbound,
    "validate-kernel": cmd_validate_kernel,
    "estimate": cmd_estimate,
}

# command-line overrides per command: flag -> config key
OVERRIDES = {
    "solve": ["mdp", "memory", "eta", "tol", "max_iters"],
    "online": ["mdp", "memory", "rounds", "episodes_per_round", "eta", "seeds"],
    "sweep": ["mdp", "axis", "values", "seeds"],
    "lowerbound": ["learner", "mode", "delta", "seeds", "rounds", "episodes_per_round"],
    "validate-kernel": ["kernel", "scale", "beta", "dim", "bandwidth"],
    "estimate": ["source", "policy", "estimator", "episodes", "bandwidth"],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="passive-rl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="key=value config file; the [%s] section is read" % name)
        sp.add_argument("--out", default="out", help="output directory (default: ./out)")
        sp.add_argument("--seed", type=int, help="master seed, overrides the config")
        sp.add_argument("--no-plots", action="store_true", help="skip PNG figures")
        for key in OVERRIDES[name]:
            sp.add_argument("--" + key.replace("_", "-"), dest=key)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {k: getattr(args, k) for k in OVERRIDES[args.command]}
    overrides["seed"] = args.seed
    try:
        params = load_section(args.command, args.config, overrides)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](params, out, not args.no_plots)
    except SolverError as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except (ConfigError, MdpFormatError, KernelError, EnumerationError, ValueError, OSError) as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
