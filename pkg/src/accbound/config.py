"""Flat key = value run configuration (INI sections) and its content hash."""

from __future__ import annotations

import configparser
import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .expr import parse_field
from .geometry import System
from .operators import CoefficientField, coefficients_from_table
from .presets import Preset, get_preset


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Everything a command needs: the system, horizons, grids, tolerances."""

    system: System
    x0: list
    T: float
    eta: float = 0.1
    sr_alpha: float = 0.3
    preset: Preset | None = None
    coeffs: CoefficientField | None = None
    traj_grid: int = 1600
    control_grid: int = 200
    operator_grid: int = 2000
    scan_T_max: float = 10.0
    rank_tol: float = 1e-7
    assumption_tol: float = 1e-6
    tol_T: float = 1e-3
    seed: int = 42
    n_samples: int = 20000
    neighborhood: float = 0.1
    bins: int = 10
    eps_list: list = field(default_factory=lambda: [0.05, 0.1, 0.15, 0.2, 0.3, 0.4])
    steps: int = 1200
    threads: int = 1
    hash: str = ""

    @property
    def n(self):
        return self.system.n


def _config_hash(parser: configparser.ConfigParser) -> str:
    items = []
    for section in sorted(parser.sections()):
        for key in sorted(parser[section]):
            items.append(f"{section}.{key}={parser[section][key]}")
    return hashlib.sha256("\n".join(items).encode()).hexdigest()[:16]


def load_coefficient_csv(path: str, n: int) -> CoefficientField:
    """CSV with columns t, b_1_1, b_1_2, ... -> interpolated coefficient table."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = [h.strip() for h in rows[0]]
    if header[0] != "t":
        raise ConfigError("coefficient table must start with a 't' column")
    data = np.array([[float(v) for v in r] for r in rows[1:]])
    cols = {}
    for k, name in enumerate(header[1:], start=1):
        parts = name.split("_")
        if len(parts) != 3 or parts[0] != "b":
            raise ConfigError(f"bad coefficient column {name!r}; expected b_i_j")
        cols[(int(parts[1]), int(parts[2]))] = data[:, k]
    return coefficients_from_table(n, data[:, 0], cols)


def load_config(path: str) -> RunConfig:
    """Parse a run configuration file; see the README for the key reference."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    if "system" not in parser:
        raise ConfigError("missing [system] section")
    sysec = parser["system"]

    preset = None
    coeffs = None
    if "preset" in sysec and ("x" in sysec or "y" in sysec):
        raise ConfigError("give exactly one of: preset, explicit X/Y expressions")
    if "preset" in sysec:
        name = sysec["preset"].strip()
        params = {}
        for key in ("alpha", "beta", "gamma", "b", "b11", "b22"):
            if key in sysec:
                params[key] = float(sysec[key])
        try:
            preset = get_preset(name, **params)
        except (KeyError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        system = preset.system
        x0 = list(preset.x0)
        coeffs = preset.coeffs
    elif "x" in sysec and "y" in sysec:
        if "n" not in sysec:
            raise ConfigError("explicit systems need the dimension n")
        n = int(sysec["n"])
        try:
            X = parse_field([s.strip() for s in sysec["x"].split(";")], n, "X")
            Y = parse_field([s.strip() for s in sysec["y"].split(";")], n, "Y")
        except ValueError as exc:
            raise ConfigError(f"bad field expression: {exc}") from exc
        system = System(X, Y)
        x0 = [float(v) for v in sysec.get("x0", " ".join(["0"] * n)).split()]
        if len(x0) != n:
            raise ConfigError("x0 length must match the dimension")
    else:
        raise ConfigError("give exactly one of: preset, explicit X/Y expressions")

    if "coeff_table" in sysec:
        coeffs = load_coefficient_csv(sysec["coeff_table"], system.n)

    cfg = RunConfig(system=system, x0=x0, T=float(sysec.get("t", "1.0")),
                    preset=preset, coeffs=coeffs, hash=_config_hash(parser))
    if "eta" in sysec:
        cfg.eta = float(sysec["eta"])
    if "sr_alpha" in sysec:
        cfg.sr_alpha = float(sysec["sr_alpha"])

    if "grids" in parser:
        g = parser["grids"]
        cfg.traj_grid = int(g.get("trajectory", cfg.traj_grid))
        cfg.control_grid = int(g.get("control", cfg.control_grid))
        cfg.operator_grid = int(g.get("operator", cfg.operator_grid))
        cfg.scan_T_max = float(g.get("scan_t_max", cfg.scan_T_max))
        cfg.steps = int(g.get("sampling_steps", cfg.steps))
    if "tolerances" in parser:
        tl = parser["tolerances"]
        cfg.rank_tol = float(tl.get("rank", cfg.rank_tol))
        cfg.assumption_tol = float(tl.get("assumption", cfg.assumption_tol))
        cfg.tol_T = float(tl.get("conjugate_time", cfg.tol_T))
        for v, what in ((cfg.rank_tol, "rank"), (cfg.assumption_tol, "assumption"),
                        (cfg.tol_T, "conjugate_time")):
            if v <= 0:
                raise ConfigError(f"tolerance {what} must be positive")
    if "sampling" in parser:
        s = parser["sampling"]
        cfg.n_samples = int(s.get("n", cfg.n_samples))
        cfg.seed = int(s.get("seed", cfg.seed))
        cfg.neighborhood = float(s.get("neighborhood", cfg.neighborhood))
        cfg.bins = int(s.get("bins", cfg.bins))
        if "eps_list" in s:
            cfg.eps_list = [float(v) for v in s["eps_list"].split()]
    if cfg.T <= 0:
        raise ConfigError("horizon T must be positive")
    return cfg
