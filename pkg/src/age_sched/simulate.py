"""Seeded simulation of the generate-serve update loop under any policy.

One epoch: at age y the policy picks (z, tau); after waiting z a task of
random size x is generated and served, the realized service time becomes the
next age, and the epoch contributes its age-curve area, its duration y + z,
and the energy actually spent. Long-run averages are ratios of sums over a
post-warm-up window. Randomness comes from a counter-based 64-bit Philox
generator, so a (policy, distribution, mode, n_epochs, seed) tuple fully
determines the report, bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .errors import ConfigError
from .model import Action, Mode, TaskSizeDistribution
from .solver import QuantizedPolicy

GENERATOR = "philox"

PolicyFunction = Callable[[float], Action]
PolicyLike = Union[QuantizedPolicy, PolicyFunction]


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def sample_task_size(dist: TaskSizeDistribution, rng: np.random.Generator, size=None):
    """Inverse-CDF draw(s); returns 1-based sizes, scalar when size is None."""
    u = rng.random(size)
    x = np.searchsorted(dist.cdf, u, side="right") + 1
    x = np.minimum(x, dist.b)
    return int(x) if size is None else x.astype(np.int64)


def as_policy_function(policy: QuantizedPolicy) -> PolicyFunction:
    """Interval-lookup wrapper so a table can be used where a callable is."""
    return policy.action_at


@dataclass
class SimulationReport:
    n_epochs: int
    n_warmup: int
    seed: int
    generator: str
    avg_aoi: float
    avg_power: float
    y_support: tuple[float, float]
    trace: dict | None = None

    def to_dict(self) -> dict:
        return {
            "n_epochs": self.n_epochs,
            "n_warmup": self.n_warmup,
            "seed": self.seed,
            "generator": self.generator,
            "avg_aoi": self.avg_aoi,
            "avg_power": self.avg_power,
            "y_support": list(self.y_support),
        }


def _warmup_count(n_epochs: int) -> int:
    # the larger of 100 epochs or 1%, but always leave at least one epoch
    return min(max(100, n_epochs // 100), n_epochs - 1)


def _size_tables(tau: np.ndarray, mode: Mode, alpha: float):
    """Per-size service time and energy for one speed vector (or rows of them)."""
    sizes = np.arange(1, tau.shape[-1] + 1, dtype=float)
    energy_b = tau ** (-2.0 / (alpha - 1.0))
    if mode is Mode.PTS:
        return tau * sizes, energy_b * sizes
    return np.cumsum(tau, axis=-1), np.cumsum(energy_b, axis=-1)


def _check_action(act: Action, b: int, epoch: int) -> None:
    tau = np.asarray(act.tau, dtype=float)
    if not np.isfinite(act.z) or act.z < 0.0:
        raise ConfigError(f"policy returned invalid wait {act.z} at epoch {epoch}")
    if tau.shape != (b,) or not np.all(np.isfinite(tau)) or np.any(tau <= 0.0):
        raise ConfigError(f"policy returned invalid speeds at epoch {epoch}")


def _run_tabular(policy: QuantizedPolicy, x_idx, mode, alpha):
    grid = policy.grid
    service, energy = _size_tables(policy.tau, mode, alpha)
    next_q = np.minimum(
        (service / grid.delta).astype(np.int64), grid.q_max - 1
    )
    n = x_idx.size - 1
    qs = np.empty(n, dtype=np.int64)
    y1 = service[0, x_idx[0]]
    q = min(int(y1 / grid.delta), grid.q_max - 1)
    for t in range(n):
        qs[t] = q
        q = next_q[q, x_idx[t + 1]]
    ys = np.empty(n)
    ys[0] = y1
    if n > 1:
        ys[1:] = service[qs[:-1], x_idx[1:-1]]
    zs = policy.z[qs]
    ls = service[qs, x_idx[1:]]
    ws = energy[qs, x_idx[1:]]
    return ys, zs, ls, ws


def _run_callable(policy: PolicyFunction, x_idx, mode, alpha, b):
    n = x_idx.size - 1
    ys = np.empty(n)
    zs = np.empty(n)
    ls = np.empty(n)
    ws = np.empty(n)
    cache_key = None
    service = energy = None

    def tables_for(act: Action, epoch: int):
        nonlocal cache_key, service, energy
        tau = np.asarray(act.tau, dtype=float)
        key = tau.tobytes()
        if key != cache_key:
            _check_action(act, b, epoch)
            service, energy = _size_tables(tau, mode, alpha)
            cache_key = key
        return service, energy

    act = policy(0.0)
    sv, _ = tables_for(act, 0)
    y = float(sv[x_idx[0]])
    for t in range(n):
        act = policy(y)
        sv, en = tables_for(act, t + 1)
        z = float(act.z)
        if not z >= 0.0:
            raise ConfigError(f"policy returned invalid wait {z} at epoch {t + 1}")
        k = x_idx[t + 1]
        ys[t] = y
        zs[t] = z
        ls[t] = sv[k]
        ws[t] = en[k]
        y = float(sv[k])
    return ys, zs, ls, ws


def simulate(
    policy: PolicyLike,
    dist: TaskSizeDistribution,
    mode: Mode,
    alpha: float,
    n_epochs: int,
    seed: int,
    include_trace: bool = False,
) -> SimulationReport:
    """Run n_epochs epochs and report ratio-of-sums long-run averages.

    The initial age is the service time of one draw under the action at
    y = 0. Warm-up epochs (the larger of 100 or 1%, capped to leave one) are
    excluded from the averages and the support but kept in the trace.
    """
    if n_epochs < 1:
        raise ConfigError(f"n_epochs must be >= 1, got {n_epochs}")
    if not 1.0 < alpha <= 2.0:
        raise ConfigError(f"alpha must lie in (1, 2], got {alpha}")
    rng = make_rng(seed)
    x_all = sample_task_size(dist, rng, size=n_epochs + 1)
    x_idx = x_all - 1
    if isinstance(policy, QuantizedPolicy):
        ys, zs, ls, ws = _run_tabular(policy, x_idx, mode, alpha)
    else:
        ys, zs, ls, ws = _run_callable(policy, x_idx, mode, alpha, dist.b)
    durations = ys + zs
    areas = durations * ls + 0.5 * durations * durations
    warm = _warmup_count(n_epochs)
    total_time = durations[warm:].sum()
    report = SimulationReport(
        n_epochs=n_epochs,
        n_warmup=warm,
        seed=seed,
        generator=GENERATOR,
        avg_aoi=float(areas[warm:].sum() / total_time),
        avg_power=float(ws[warm:].sum() / total_time),
        y_support=(float(ys[warm:].min()), float(ys[warm:].max())),
    )
    if include_trace:
        report.trace = {
            "n": np.arange(1, n_epochs + 1),
            "y": ys,
            "z": zs,
            "x": x_all[1:],
            "L": ls,
            "area": areas,
            "W": ws,
        }
    return report
