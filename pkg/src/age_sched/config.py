"""YAML run configuration: schema validation and construction of model objects.

Layout (unknown keys are rejected everywhere):

    mode: pts | uts
    task:
      b: 2                 # optional, must equal len(pmf) when present
      pmf: [0.7, 0.3]
    power:
      alpha: 2.0
      p_bar: 8.0           # scalar, or a non-empty list for sweeps
      tau_min: 0.0         # optional
      tau_max: .inf        # optional
    grid:
      y_max: 1.0
      q_max: 25
    solver:                # optional, any SolverConfig field
      eps_r: 1.0e-6
    sim:                   # optional
      n_epochs: 1000000
      seed: 1
    out_dir: runs/demo     # optional, overridable by --out
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import yaml

from .errors import ConfigError
from .model import Mode, PowerModel, TaskSizeDistribution
from .solver import Problem, QuantizedStateSpace, SolverConfig

DEFAULT_N_EPOCHS = 1_000_000
DEFAULT_SEED = 0


@dataclass
class RunConfig:
    mode: Mode
    dist: TaskSizeDistribution
    alpha: float
    p_bars: tuple[float, ...]
    tau_min: float
    tau_max: float
    y_max: float
    q_max: int
    solver: SolverConfig
    n_epochs: int
    seed: int
    out_dir: str | None

    def power(self, p_bar: float | None = None) -> PowerModel:
        return PowerModel(
            alpha=self.alpha,
            p_bar=self.p_bars[0] if p_bar is None else p_bar,
            tau_min=self.tau_min,
            tau_max=self.tau_max,
        )

    def problem(self, p_bar: float | None = None) -> Problem:
        return Problem(mode=self.mode, dist=self.dist, power=self.power(p_bar))

    def grid(self) -> QuantizedStateSpace:
        return QuantizedStateSpace(y_max=self.y_max, q_max=self.q_max)


def _section(raw: dict, name: str, allowed: set[str], required: bool = True) -> dict:
    sec = raw.get(name)
    if sec is None:
        if required:
            raise ConfigError(f"missing config section {name!r}")
        return {}
    if not isinstance(sec, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    unknown = set(sec) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    return sec

def _number(sec: dict, section: str, key: str, default=None):
    val = sec.get(key, default)
    if val is None:
        raise ConfigError(f"missing {section}.{key}")
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(f"{section}.{key} must be a number, got {val!r}")
    return float(val)


def _integer(sec: dict, section: str, key: str, default=None) -> int:
    val = sec.get(key, default)
    if val is None:
        raise ConfigError(f"missing {section}.{key}")
    if isinstance(val, bool) or not isinstance(val, int):
        raise ConfigError(f"{section}.{key} must be an integer, got {val!r}")
    return int(val)


def _solver_config(sec: dict) -> SolverConfig:
    kwargs = {}
    by_name = {f.name: f for f in dataclasses.fields(SolverConfig)}
    for key, val in sec.items():
        ann = by_name[key].type
        if isinstance(val, bool):
            if ann not in ("bool", bool):
                raise ConfigError(f"solver.{key} must be a number, got {val!r}")
            kwargs[key] = val
        elif ann in ("int", int):
            if not isinstance(val, int):
                raise ConfigError(f"solver.{key} must be an integer, got {val!r}")
            kwargs[key] = val
        elif isinstance(val, (int, float)):
            kwargs[key] = float(val)
        else:
            raise ConfigError(f"solver.{key} must be a number, got {val!r}")
    return SolverConfig(**kwargs)


def from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    top_allowed = {"mode", "task", "power", "grid", "solver", "sim", "out_dir"}
    unknown = set(raw) - top_allowed
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")

    mode_raw = raw.get("mode")
    if mode_raw is None:
        raise ConfigError("missing config key 'mode'")
    try:
        mode = Mode.parse(str(mode_raw))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    task = _section(raw, "task", {"b", "pmf"})
    pmf = task.get("pmf")
    if not isinstance(pmf, list) or not pmf:
        raise ConfigError("task.pmf must be a non-empty list")
    try:
        dist = TaskSizeDistribution.from_pmf(pmf)
    except ValueError as exc:
        raise ConfigError(f"task.pmf invalid: {exc}") from None
    if "b" in task and _integer(task, "task", "b") != dist.b:
        raise ConfigError(f"task.b = {task['b']} does not match len(pmf) = {dist.b}")

    power = _section(raw, "power", {"alpha", "p_bar", "tau_min", "tau_max"})
    alpha = _number(power, "power", "alpha")
    p_raw = power.get("p_bar")
    if isinstance(p_raw, (int, float)) and not isinstance(p_raw, bool):
        p_bars = (float(p_raw),)
    elif isinstance(p_raw, list) and p_raw:
        if any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in p_raw):
            raise ConfigError("power.p_bar sweep entries must be numbers")
        p_bars = tuple(float(v) for v in p_raw)
    else:
        raise ConfigError("power.p_bar must be a number or a non-empty list")
    tau_min = _number(power, "power", "tau_min", default=0.0)
    tau_max = _number(power, "power", "tau_max", default=np.inf)

    grid = _section(raw, "grid", {"y_max", "q_max"})
    y_max = _number(grid, "grid", "y_max")
    q_max = _integer(grid, "grid", "q_max")

    solver_sec = _section(
        raw, "solver", {f.name for f in dataclasses.fields(SolverConfig)}, required=False
    )
    solver = _solver_config(solver_sec)

    sim = _section(raw, "sim", {"n_epochs", "seed"}, required=False)
    n_epochs = _integer(sim, "sim", "n_epochs", default=DEFAULT_N_EPOCHS)
    seed = _integer(sim, "sim", "seed", default=DEFAULT_SEED)
    if n_epochs <= 0:
        raise ConfigError("sim.n_epochs must be positive")

    out_dir = raw.get("out_dir")
    if out_dir is not None and not isinstance(out_dir, str):
        raise ConfigError("out_dir must be a string")

    cfg = RunConfig(
        mode=mode,
        dist=dist,
        alpha=alpha,
        p_bars=p_bars,
        tau_min=tau_min,
        tau_max=tau_max,
        y_max=y_max,
        q_max=q_max,
        solver=solver,
        n_epochs=n_epochs,
        seed=seed,
        out_dir=out_dir,
    )
    # build the model objects once so invalid numbers fail at load time
    try:
        for pb in cfg.p_bars:
            cfg.problem(pb)
        cfg.grid()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from None
    if raw is None:
        raise ConfigError(f"config file {path} is empty")
    return from_dict(raw)
