"""Scenario configuration: embedded defaults, TOML/JSON loading and validation."""

from __future__ import annotations

import copy
import json
import sys
from dataclasses import dataclass
from pathlib import Path

from . import measures
from .coupling import FourierKernel, ModelParams
from .errors import ConfigError, KernelError
from .flow import SCHEMES, PicardOptions, TimeMesh
from .grid import TorusGrid
from .stationary import StationaryConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DEFAULTS = {
    "kernel": {"preset": "kuramoto", "kappa": 2.0, "c0": 0.0, "modes": []},
    "params": {"rho": 1.0, "nu": 1.0},
    "grid": {"dim": 1, "n": 128},
    "initial": {"kind": "von_mises", "beta": 2.0, "eps": 0.2, "k": 1, "path": ""},
    "mesh": {"horizon": 20.0, "steps": 20000},
    "solver": {
        "damping": 0.5,
        "picard_tol": 1e-12,
        "picard_max_iter": 300,
        "terminal_mode": "stationary",
        "scheme": "bdf2",
        "stationary_tol_fixed_point": 1e-10,
        "stationary_tol_pde": 1e-9,
        "stationary_max_outer": 5000,
        "lyapunov_band_margin": 0.5,
        "lyapunov_tol": 5e-2,
    },
    "sweep": {"kappas": [2.0, 3.0, 3.9, 4.5, 6.0]},
    "criteria": {"densities": []},
    "outputs": {"directory": "out", "trajectory": True, "max_frames": 201},
}

KERNEL_PRESETS = ("kuramoto", "zero", "inline")
INITIAL_KINDS = ("uniform", "m_eps", "von_mises", "file")


def default_config():
    return copy.deepcopy(DEFAULTS)


def _merge(base, override, path=""):
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown configuration key '{where}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"'{where}' must be a table")
            _merge(base[key], value, where + ".")
        else:
            base[key] = value
    return base


def load_config(path=None, overrides=None):
    """Defaults, updated from a TOML or JSON file and then from ``overrides``."""
    cfg = default_config()
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            data = json.loads(text) if path.suffix.lower() == ".json" else tomllib.loads(text)
        except (ValueError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from None
        _merge(cfg, data)
    if overrides:
        _merge(cfg, overrides)
    Scenario.from_dict(cfg)  # validate eagerly
    return cfg


def dump_config(cfg) -> str:
    return json.dumps(cfg, indent=2, sort_keys=False) + "\n"


def _number(section, key, kind=float, positive=False):
    value = section[key]
    if isinstance(value, bool):
        raise ConfigError(f"'{key}' must be numeric")
    try:
        value = kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"'{key}' must be {kind.__name__}, got {section[key]!r}") from None
    if kind is int and value != section[key]:
        raise ConfigError(f"'{key}' must be an integer, got {section[key]!r}")
    if positive and not value > 0:
        raise ConfigError(f"'{key}' must be > 0, got {value}")
    return value


def build_kernel(section, dim) -> FourierKernel:
    preset = section["preset"]
    if preset not in KERNEL_PRESETS:
        raise ConfigError(f"kernel preset must be one of {KERNEL_PRESETS}, got {preset!r}")
    try:
        if preset == "kuramoto":
            return FourierKernel.kuramoto(_number(section, "kappa", positive=True), dim=dim)
        if preset == "zero":
            return FourierKernel()
        return FourierKernel.from_dict({"c0": section["c0"], "modes": section["modes"]})
    except KernelError as exc:
        raise ConfigError(str(exc)) from None


def check_initial(section):
    kind = section["kind"]
    if kind not in INITIAL_KINDS:
        raise ConfigError(f"initial kind must be one of {INITIAL_KINDS}, got {kind!r}")
    if kind == "file" and not section["path"]:
        raise ConfigError("initial kind 'file' needs a path")
    return kind


def build_initial(section, grid):
    kind = check_initial(section)
    if kind == "uniform":
        return measures.uniform_density(grid)
    if kind == "m_eps":
        k = section["k"]
        k = tuple(k) if isinstance(k, list) else (int(k),) + (0,) * (grid.dim - 1)
        return measures.m_eps_family(grid, _number(section, "eps"), k)
    if kind == "von_mises":
        return measures.von_mises(grid, _number(section, "beta"))
    file_grid, m = measures.read_density_csv(section["path"])
    if file_grid != grid:
        raise ConfigError(f"initial density file is on {file_grid}, scenario uses {grid}")
    return m


@dataclass
class Scenario:
    """Validated, typed view of a configuration dictionary."""

    raw: dict
    grid: TorusGrid
    params: ModelParams
    kernel: FourierKernel
    mesh: TimeMesh
    picard: PicardOptions
    stationary: StationaryConfig
    terminal_mode: str
    scheme: str
    kappas: list
    out_dir: Path

    @classmethod
    def from_dict(cls, cfg):
        try:
            grid = TorusGrid(_number(cfg["grid"], "dim", int), _number(cfg["grid"], "n", int))
            params = ModelParams(_number(cfg["params"], "rho"), _number(cfg["params"], "nu"))
            kernel = build_kernel(cfg["kernel"], grid.dim)
            mesh = TimeMesh(_number(cfg["mesh"], "horizon", positive=True), _number(cfg["mesh"], "steps", int))
            s = cfg["solver"]
            picard = PicardOptions(_number(s, "damping"), _number(s, "picard_tol"), _number(s, "picard_max_iter", int))
            stationary = StationaryConfig(
                damping=_number(s, "damping"),
                tol_fixed_point=_number(s, "stationary_tol_fixed_point"),
                tol_pde=_number(s, "stationary_tol_pde"),
                max_outer=_number(s, "stationary_max_outer", int),
            )
            if s["terminal_mode"] not in ("stationary", "zero"):
                raise ConfigError(f"terminal_mode must be 'stationary' or 'zero', got {s['terminal_mode']!r}")
            if s["scheme"] not in SCHEMES:
                raise ConfigError(f"scheme must be one of {SCHEMES}, got {s['scheme']!r}")
            check_initial(cfg["initial"])
            kappas = [float(k) for k in cfg["sweep"]["kappas"]]
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
        return cls(cfg, grid, params, kernel, mesh, picard, stationary, s["terminal_mode"], s["scheme"], kappas,
                   Path(cfg["outputs"]["directory"]))

    def initial_density(self):
        return build_initial(self.raw["initial"], self.grid)

    def kernel_for(self, kappa):
        return FourierKernel.kuramoto(kappa, dim=self.grid.dim)

