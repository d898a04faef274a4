"""Flat key=value experiment configs with one section per command."""

from __future__ import annotations

import configparser
from pathlib import Path

U64_MAX = 2 ** 64 - 1


class ConfigError(ValueError):
    pass


def _int(raw: str) -> int:
    return int(raw)


def _opt_int(raw: str):
    return None if raw.strip().lower() in ("", "none", "auto") else int(raw)


def _eta(raw: str):
    return "auto" if raw.strip().lower() == "auto" else float(raw)


def _float_list(raw: str) -> list[float]:
    return [float(t) for t in raw.replace(";", ",").split(",") if t.strip()]


def _int_list(raw: str) -> list[int]:
    return [int(t) for t in raw.replace(";", ",").split(",") if t.strip()]


def _cell(raw: str) -> tuple[int, int]:
    parts = _int_list(raw)
    if len(parts) != 2:
        raise ValueError("expected 's,a'")
    return parts[0], parts[1]


def _bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


_ONLINE = {
    "mdp": (str, "bench_2x2"),
    "rounds": (_int, "16"),
    "episodes_per_round": (_int, "100"),
    "horizon": (_opt_int, "auto"),
    "eta": (_eta, "auto"),
    "delta": (float, "0.05"),
    "smoothing_floor": (float, "1e-6"),
    "solver_tol": (float, "1e-8"),
    "solver_max_iters": (_int, "100000"),
    "memory": (str, "uniform"),
    "memory_episodes": (_int, "100"),
    "seeds": (_int, "1"),
    "seed": (_int, "0"),
}

SCHEMAS = {
    "solve": {
        "mdp": (str, "two_state_cycle"),
        "memory": (str, "uniform"),
        "eta": (float, "1.0"),
        "tol": (float, "1e-8"),
        "max_iters": (_int, "100000"),
        "seed": (_int, "0"),
    },
    "online": _ONLINE,
    "sweep": {
        **_ONLINE,
        "mdp": (str, "bench_3x2"),
        "axis": (str, "memory_alpha"),
        "values": (_float_list, "0,0.5,1"),
        "seeds": (_int, "20"),
        "kde_episodes": (_int, "200"),
    },
    "lowerbound": {
        "n_states": (_int, "2"),
        "n_actions": (_int, "2"),
        "gamma": (float, "0.9"),
        "delta": (str, "optimal"),
        "c": (float, "8"),
        "episodes_per_round": (_int, "10"),
        "rounds": (_int, "100"),
        "horizon": (_opt_int, "auto"),
        "seeds": (_int, "100"),
        "learner": (str, "uniform"),
        "memory_episodes": (_int, "100"),
        "mode": (str, "adaptive"),
        "adversarial_cell": (_cell, "0,1"),
        "audit_horizons": (_int_list, "0,1,2,3"),
        "audit_policies": (_int, "10"),
        "seed": (_int, "0"),
    },
    "validate-kernel": {
        "kernel": (str, "epanechnikov"),
        "scale": (float, "1.0"),
        "beta": (_int, "2"),
        "dim": (_int, "1"),
        "bandwidth": (float, "0.1"),
        "holder_const": (float, "1.0"),
        "grid_points": (_int, "201"),
        "seed": (_int, "0"),
    },
    "estimate": {
        "source": (str, "bench_2x2"),
        "policy": (str, "uniform"),
        "estimator": (str, "plugin"),
        "episodes": (_int, "1000"),
        "horizon": (_opt_int, "auto"),
        "bandwidth": (float, "0.1"),
        "delta": (float, "0.05"),
        "grid_points": (_int, "201"),
        "seed": (_int, "0"),
    },
}


def load_section(command: str, path: str | Path | None = None,
                 overrides: dict | None = None) -> dict:
    """Typed parameters for ``command``: schema defaults, then the file's section, then overrides.

    Unknown keys and unparsable values raise ConfigError.
    """
    schema = SCHEMAS[command]
    raw = {k: default for k, (_, default) in schema.items()}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if parser.has_section(command):
            for key, value in parser.items(command):
                if key not in schema:
                    raise ConfigError(f"[{command}] unknown key '{key}'")
                raw[key] = value
    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key] = str(value)
    out = {}
    for key, (conv, _) in schema.items():
        try:
            out[key] = conv(raw[key])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{command}] bad value for '{key}': {raw[key]!r} ({exc})") from None
    if "seed" in out and not 0 <= out["seed"] <= U64_MAX:
        raise ConfigError("seed must fit in an unsigned 64-bit integer")
    return out
