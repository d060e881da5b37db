"""Primitives of the scheduling model.

A source samples a fresh update, the CPU processes its X batches (X ~ pmf on
1..b), and the controller picks a waiting time z and a per-batch speed vector
tau before each sample. Service time and energy depend on whether X is known
at dispatch (PTS: only batch X's speed is used, run X times) or revealed batch
by batch (UTS: speeds tau_1..tau_X are used in order).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

TAU_MIN_FLOOR = 1e-6   # stand-in for "no lower speed bound": keeps energy finite
TAU_MAX_CAP = 1e3      # stand-in for "no upper bound": keeps the state space finite
PMF_TOL = 1e-12


class Mode(Enum):
    PTS = "pts"
    UTS = "uts"

    @classmethod
    def parse(cls, s: str) -> "Mode":
        try:
            return cls(s.strip().lower())
        except ValueError:
            raise ValueError(f"mode must be 'pts' or 'uts', got {s!r}") from None


class TaskSizeDistribution:
    """Pmf of the number of batches per update, support {1..b}.

    The pmf must sum to 1 within 1e-12; it is then renormalized so downstream
    cumulative sums are exact. Suffix sums (survival) are cached because UTS
    expectations weight each batch by Pr[X >= x].
    """

    def __init__(self, pmf: np.ndarray):
        pmf = np.asarray(pmf, dtype=float)
        if pmf.ndim != 1 or pmf.size == 0:
            raise ValueError("pmf must be a non-empty 1-d array")
        if np.any(pmf < 0):
            raise ValueError("pmf entries must be non-negative")
        s = pmf.sum()
        if abs(s - 1.0) > PMF_TOL:
            raise ValueError(f"pmf must sum to 1 (got {s!r})")
        pmf = pmf / s
        self.pmf = pmf
        self.pmf.flags.writeable = False
        self.b = int(pmf.size)
        # survival[x-1] = Pr[X >= x]; computed as suffix sums, first entry snapped to 1
        surv = np.cumsum(pmf[::-1])[::-1].copy()
        surv[0] = 1.0
        self.survival = surv
        self.survival.flags.writeable = False
        cdf = np.cumsum(pmf)
        cdf[-1] = 1.0
        self.cdf = cdf
        self.cdf.flags.writeable = False
        sizes = np.arange(1, self.b + 1, dtype=float)
        self.mean = float(pmf @ sizes)
        self.second_moment = float(pmf @ sizes**2)
        self.variance = self.second_moment - self.mean**2

    @classmethod
    def from_pmf(cls, pmf) -> "TaskSizeDistribution":
        return cls(np.asarray(pmf, dtype=float))

    def moment(self, r: float) -> float:
        sizes = np.arange(1, self.b + 1, dtype=float)
        return float(self.pmf @ sizes**r)

    def weights(self, mode: Mode) -> np.ndarray:
        """Per-batch weights w with E[L] = w . tau and E[W] = w . energy(tau)."""
        if mode is Mode.PTS:
            return self.pmf * np.arange(1, self.b + 1)
        return self.survival

    def __repr__(self):
        return f"TaskSizeDistribution(pmf={self.pmf.tolist()})"


@dataclass(frozen=True)
class PowerModel:
    """Speed box, energy exponent and average power budget.

    tau_min=0 / tau_max=inf mean "unbounded" and are replaced by finite
    stand-ins so energies and the state space stay finite.
    """

    alpha: float
    p_bar: float
    tau_min: float = 0.0
    tau_max: float = np.inf

    def __post_init__(self):
        if not (1.0 < self.alpha <= 2.0):
            raise ValueError(f"alpha must lie in (1, 2], got {self.alpha}")
        if self.p_bar <= 0:
            raise ValueError("p_bar must be positive")
        if self.tau_min < 0:
            raise ValueError("tau_min must be non-negative")
        tmin = self.tau_min if self.tau_min > 0 else TAU_MIN_FLOOR
        tmax = self.tau_max if np.isfinite(self.tau_max) else TAU_MAX_CAP
        if tmax < tmin:
            raise ValueError(f"tau_max {tmax} below tau_min {tmin}")
        object.__setattr__(self, "tau_min", float(tmin))
        object.__setattr__(self, "tau_max", float(tmax))


@dataclass
class Action:
    """One decision: wait z after the previous delivery, then use speeds tau."""

    z: float
    tau: np.ndarray = field(repr=False)

    def validate(self, b: int, power: PowerModel) -> None:
        tau = np.asarray(self.tau, dtype=float)
        if self.z < 0 or not np.isfinite(self.z):
            raise ValueError(f"waiting time must be finite and >= 0, got {self.z}")
        if tau.shape != (b,):
            raise ValueError(f"tau must have shape ({b},), got {tau.shape}")
        eps = 1e-12
        if np.any(tau < power.tau_min - eps) or np.any(tau > power.tau_max + eps):
            raise ValueError("tau outside the speed box")


def batch_energy(tau, alpha: float):
    """Energy of one batch run at per-batch time tau: (1/tau)^(2/(alpha-1))."""
    if not (1.0 < alpha <= 2.0):
        raise ValueError(f"alpha must lie in (1, 2], got {alpha}")
    tau_arr = np.asarray(tau, dtype=float)
    if np.any(tau_arr <= 0):
        raise ValueError("tau must be positive")
    out = tau_arr ** (-2.0 / (alpha - 1.0))
    return float(out) if np.isscalar(tau) or tau_arr.ndim == 0 else out


def service_time(x: int, tau: np.ndarray, mode: Mode) -> float:
    """Realized service time of an update with x batches under speeds tau."""
    b = len(tau)
    if not 1 <= x <= b:
        raise ValueError(f"x must lie in 1..{b}, got {x}")
    if mode is Mode.PTS:
        return float(x * tau[x - 1])
    return float(np.sum(tau[:x]))


def realized_energy(x: int, tau: np.ndarray, mode: Mode, alpha: float) -> float:
    """Energy actually spent on an update with x batches."""
    b = len(tau)
    if not 1 <= x <= b:
        raise ValueError(f"x must lie in 1..{b}, got {x}")
    if mode is Mode.PTS:
        return float(x * batch_energy(tau[x - 1], alpha))
    return float(np.sum(batch_energy(tau[:x], alpha)))


def expected_service_time(tau: np.ndarray, dist: TaskSizeDistribution, mode: Mode) -> float:
    return float(dist.weights(mode) @ np.asarray(tau, dtype=float))


def expected_energy(
    tau: np.ndarray, dist: TaskSizeDistribution, mode: Mode, alpha: float
) -> float:
    return float(dist.weights(mode) @ batch_energy(np.asarray(tau, dtype=float), alpha))


def epoch_area(y: float, z: float, l_expected: float) -> float:
    """Expected area under the age curve over one epoch started at age y."""
    d = y + z
    return d * l_expected + 0.5 * d * d


def lagrangian_cost(
    y: float,
    action: Action,
    gamma: float,
    lam: float,
    dist: TaskSizeDistribution,
    mode: Mode,
    power: PowerModel,
) -> float:
    """Per-epoch cost g1 - gamma*g2 + lam*g3 at state y.

    g1 = expected age area, g2 = epoch length y+z,
    g3 = expected energy - p_bar * (y+z)  (the power-budget slack).
    """
    lbar = expected_service_time(action.tau, dist, mode)
    wbar = expected_energy(action.tau, dist, mode, power.alpha)
    d = y + action.z
    g1 = epoch_area(y, action.z, lbar)
    g3 = wbar - d * power.p_bar
    return g1 - gamma * d + lam * g3
