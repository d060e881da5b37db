"""Model primitives: energy curve, service times, expected costs, epoch area.

Frozen expected values below are hand-derived from the definitions:
  energy(tau)            = (1/tau)^(2/(alpha-1))
  service  PTS           = x * tau[x]
  service  UTS           = sum_{k<=x} tau[k]
  expectations           = pmf-weighted (PTS weights f(x)*x, UTS weights survival(x))
  epoch area             = (y+z)*lbar + (y+z)^2 / 2
"""

import numpy as np
import pytest

from age_sched.model import (
    Action,
    Mode,
    PowerModel,
    TaskSizeDistribution,
    batch_energy,
    epoch_area,
    expected_energy,
    expected_service_time,
    lagrangian_cost,
    service_time,
)


# ---------------------------------------------------------------- distribution

def test_pmf_validation_and_survival():
    d = TaskSizeDistribution.from_pmf([0.7, 0.3])
    assert d.b == 2
    np.testing.assert_allclose(d.pmf, [0.7, 0.3], rtol=1e-15)
    # survival(x) = Pr[X >= x], suffix sums; survival(1) == 1 exactly
    np.testing.assert_allclose(d.survival, [1.0, 0.3], rtol=1e-15)
    assert d.survival[0] == 1.0
    assert d.mean == pytest.approx(1.3, rel=1e-14)
    assert d.variance == pytest.approx(0.21, rel=1e-12)


def test_pmf_rejects_bad_input():
    with pytest.raises(ValueError):
        TaskSizeDistribution.from_pmf([0.7, 0.2])  # sums to 0.9
    with pytest.raises(ValueError):
        TaskSizeDistribution.from_pmf([1.2, -0.2])  # negative mass
    with pytest.raises(ValueError):
        TaskSizeDistribution.from_pmf([])


def test_pmf_renormalized_exactly():
    # off by < 1e-12 is accepted, then snapped to an exact unit sum
    d = TaskSizeDistribution.from_pmf([0.5, 0.5 + 1e-13])
    assert d.pmf.sum() == 1.0
    assert d.cdf[-1] == 1.0


def test_deterministic_size_distribution():
    d = TaskSizeDistribution.from_pmf([0.0, 0.0, 1.0])
    assert d.mean == 3.0
    assert d.variance == pytest.approx(0.0, abs=1e-14)
    np.testing.assert_allclose(d.survival, [1.0, 1.0, 1.0])


# ----------------------------------------------------------------- energy curve

def test_batch_energy_frozen_values():
    assert batch_energy(1.0, 2.0) == pytest.approx(1.0, rel=1e-15)
    assert batch_energy(0.5, 2.0) == pytest.approx(4.0, rel=1e-15)
    # alpha=1.5: exponent 2/(alpha-1) = 4, so (1/0.5)^4
    assert batch_energy(0.5, 1.5) == pytest.approx(16.0, rel=1e-15)


def test_batch_energy_domain_errors():
    with pytest.raises(ValueError):
        batch_energy(0.0, 2.0)
    with pytest.raises(ValueError):
        batch_energy(-1.0, 2.0)
    with pytest.raises(ValueError):
        batch_energy(0.5, 1.0)  # alpha must exceed 1
    with pytest.raises(ValueError):
        batch_energy(0.5, 2.5)


def test_batch_energy_decreasing_and_convex():
    rng = np.random.default_rng(7)
    for _ in range(200):
        alpha = rng.uniform(1.05, 2.0)
        a, c = np.sort(rng.uniform(0.05, 5.0, size=2))
        if c - a < 1e-9:
            continue
        ea, ec = batch_energy(a, alpha), batch_energy(c, alpha)
        assert ea > ec  # strictly decreasing
        mid = 0.5 * (a + c)
        assert batch_energy(mid, alpha) <= 0.5 * (ea + ec) + 1e-12  # convex


def test_batch_energy_vectorized():
    out = batch_energy(np.array([1.0, 0.5]), 2.0)
    np.testing.assert_allclose(out, [1.0, 4.0], rtol=1e-15)


# ---------------------------------------------------------------- service time

def test_service_time_frozen_values():
    tau = np.array([0.5, 0.4])
    assert service_time(2, tau, Mode.PTS) == pytest.approx(0.8, rel=1e-15)
    assert service_time(2, tau, Mode.UTS) == pytest.approx(0.9, rel=1e-15)
    # single batch: the modes coincide
    assert service_time(1, tau, Mode.PTS) == service_time(1, tau, Mode.UTS) == 0.5


def test_service_time_range_check():
    tau = np.array([0.5, 0.4])
    for x in (0, 3, -1):
        with pytest.raises(ValueError):
            service_time(x, tau, Mode.UTS)


def test_modes_coincide_for_constant_speed():
    rng = np.random.default_rng(11)
    for _ in range(50):
        b = rng.integers(1, 7)
        t = rng.uniform(0.1, 2.0)
        tau = np.full(b, t)
        x = int(rng.integers(1, b + 1))
        assert service_time(x, tau, Mode.PTS) == pytest.approx(
            service_time(x, tau, Mode.UTS), rel=1e-12
        )


# ----------------------------------------------------------------- expectations

def test_expected_service_time_frozen_values():
    d = TaskSizeDistribution.from_pmf([0.7, 0.3])
    tau = np.array([0.5, 0.4])
    # PTS: 0.7*1*0.5 + 0.3*2*0.4 = 0.59
    assert expected_service_time(tau, d, Mode.PTS) == pytest.approx(0.59, rel=1e-14)
    # UTS: 1.0*0.5 + 0.3*0.4 = 0.62
    assert expected_service_time(tau, d, Mode.UTS) == pytest.approx(0.62, rel=1e-14)


def test_expected_energy_frozen_values():
    d = TaskSizeDistribution.from_pmf([0.7, 0.3])
    tau = np.array([0.5, 0.4])
    # energy(0.5)=4, energy(0.4)=6.25 at alpha=2
    assert expected_energy(tau, d, Mode.UTS, 2.0) == pytest.approx(5.875, rel=1e-14)
    assert expected_energy(tau, d, Mode.PTS, 2.0) == pytest.approx(6.55, rel=1e-14)


def test_expectations_match_direct_enumeration():
    # oracle: enumerate sizes and weight realized values by the pmf
    rng = np.random.default_rng(3)
    for _ in range(40):
        b = int(rng.integers(1, 8))
        pmf = rng.uniform(0.01, 1.0, size=b)
        pmf /= pmf.sum()
        d = TaskSizeDistribution.from_pmf(pmf)
        tau = rng.uniform(0.2, 1.5, size=b)
        alpha = rng.uniform(1.2, 2.0)
        for mode in (Mode.PTS, Mode.UTS):
            lbar = sum(d.pmf[x - 1] * service_time(x, tau, mode) for x in range(1, b + 1))
            assert expected_service_time(tau, d, mode) == pytest.approx(lbar, rel=1e-12)
            if mode is Mode.PTS:
                wbar = sum(d.pmf[x - 1] * x * batch_energy(tau[x - 1], alpha) for x in range(1, b + 1))
            else:
                wbar = sum(
                    d.pmf[x - 1] * sum(batch_energy(tau[k], alpha) for k in range(x))
                    for x in range(1, b + 1)
                )
            assert expected_energy(tau, d, mode, alpha) == pytest.approx(wbar, rel=1e-12)


# ------------------------------------------------------------------- epoch area

def test_epoch_area_frozen_values():
    assert epoch_area(0.5, 0.1, 0.62) == pytest.approx(0.552, rel=1e-14)
    assert epoch_area(1.0, 0.0, 1.0) == pytest.approx(1.5, rel=1e-15)
    assert epoch_area(0.0, 0.0, 0.0) == 0.0


# -------------------------------------------------------------- lagrangian cost

def test_lagrangian_cost_frozen_values():
    d = TaskSizeDistribution.from_pmf([0.7, 0.3])
    power = PowerModel(alpha=2.0, p_bar=8.0, tau_min=0.1, tau_max=1.0)
    act = Action(z=0.1, tau=np.array([0.5, 0.4]))
    # gamma=1, lambda=0: 0.552 - 1*0.6 = -0.048
    assert lagrangian_cost(0.5, act, 1.0, 0.0, d, Mode.UTS, power) == pytest.approx(
        -0.048, rel=1e-12
    )
    # lambda=1 adds 5.875 - 0.6*8 = 1.075
    assert lagrangian_cost(0.5, act, 1.0, 1.0, d, Mode.UTS, power) == pytest.approx(
        1.027, rel=1e-12
    )


def test_lagrangian_power_term_sign():
    # policy exactly at the power budget contributes zero through the dual term
    d = TaskSizeDistribution.from_pmf([1.0])
    tau = np.array([0.5])
    power = PowerModel(alpha=2.0, p_bar=8.0, tau_min=0.01, tau_max=10.0)
    # W = 4, duration*p_bar = (y+z)*8: pick y+z = 0.5 so g3 = 0
    base = lagrangian_cost(0.5, Action(0.0, tau), 0.7, 0.0, d, Mode.UTS, power)
    with_dual = lagrangian_cost(0.5, Action(0.0, tau), 0.7, 123.4, d, Mode.UTS, power)
    assert with_dual == pytest.approx(base, rel=1e-12)


# ----------------------------------------------------------------- power model

def test_power_model_validation():
    with pytest.raises(ValueError):
        PowerModel(alpha=1.0, p_bar=1.0, tau_min=0.1, tau_max=1.0)
    with pytest.raises(ValueError):
        PowerModel(alpha=2.1, p_bar=1.0, tau_min=0.1, tau_max=1.0)
    with pytest.raises(ValueError):
        PowerModel(alpha=2.0, p_bar=0.0, tau_min=0.1, tau_max=1.0)
    with pytest.raises(ValueError):
        PowerModel(alpha=2.0, p_bar=1.0, tau_min=0.5, tau_max=0.2)


def test_power_model_floors_unconstrained_bounds():
    pm = PowerModel(alpha=2.0, p_bar=8.0, tau_min=0.0, tau_max=np.inf)
    assert pm.tau_min == 1e-6
    assert pm.tau_max == 1e3
    # explicit finite bounds are kept as given
    pm2 = PowerModel(alpha=2.0, p_bar=8.0, tau_min=0.25, tau_max=2.0)
    assert pm2.tau_min == 0.25 and pm2.tau_max == 2.0


def test_action_validation():
    pm = PowerModel(alpha=2.0, p_bar=8.0, tau_min=0.1, tau_max=1.0)
    Action(z=0.0, tau=np.array([0.5, 0.5])).validate(2, pm)
    with pytest.raises(ValueError):
        Action(z=-0.1, tau=np.array([0.5, 0.5])).validate(2, pm)
    with pytest.raises(ValueError):
        Action(z=0.0, tau=np.array([0.05, 0.5])).validate(2, pm)
    with pytest.raises(ValueError):
        Action(z=0.0, tau=np.array([0.5])).validate(2, pm)
