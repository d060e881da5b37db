"""End-to-end acceptance checks: six standalone criteria, one line each.

Every tolerance and expectation window is pinned in this file.  Where a
measured value falls outside its pinned window, the assertion message reports
the measurement and the cause; windows are never widened to fit.
"""

import time

import numpy as np
import pytest

from age_sched.benchmarks import all_benchmarks
from age_sched.model import Mode, PowerModel, TaskSizeDistribution
from age_sched.simulate import simulate
from age_sched.solver import (
    Problem,
    QuantizedStateSpace,
    SolverConfig,
    dinkelbach_solve,
    value_iteration,
)
from age_sched.structure import build_structure_report, closed_form_fixed_size

N_SIM = 10**6
SIM_SEED = 11


def _solve(pmf, mode, alpha, p_bar, y_max, q_max):
    prob = Problem(
        TaskSizeDistribution.from_pmf(pmf),
        mode,
        PowerModel(alpha=alpha, p_bar=p_bar),
    )
    grid = QuantizedStateSpace(y_max=y_max, q_max=q_max)
    t0 = time.perf_counter()
    res = dinkelbach_solve(prob, grid, SolverConfig())
    return prob, grid, res, time.perf_counter() - t0


@pytest.fixture(scope="module")
def closed_form_solves():
    out = []
    for b, alpha, p_bar, y_max in [
        (2, 2.0, 8.0, 2.0),
        (3, 2.0, 3.0, 4.0),
        (1, 1.5, 1.0, 2.0),
    ]:
        pmf = [0.0] * (b - 1) + [1.0]
        out.append((b, alpha, p_bar) + _solve(pmf, Mode.PTS, alpha, p_bar, y_max, 50))
    return out


@pytest.fixture(scope="module")
def snapshot_solve():
    return _solve([0.7, 0.3], Mode.UTS, 2.0, 8.0, 1.0, 25)


@pytest.fixture(scope="module")
def benchmark_cells():
    """Solve + simulate the three comparison cells at one million epochs."""
    dist = TaskSizeDistribution.from_pmf([0.7, 0.3])
    cells = []
    t0 = time.perf_counter()
    for mode, p_bar, y_max, dvs_name in [
        (Mode.UTS, 5.0, 1.5, "dvs_uts"),
        (Mode.UTS, 0.5, 3.2, "dvs_uts"),
        (Mode.PTS, 5.0, 1.5, "dvs_pts"),
    ]:
        prob, grid, res, _ = _solve([0.7, 0.3], mode, 2.0, p_bar, y_max, 50)
        sim_age = simulate(res.policy, dist, mode, 2.0, N_SIM, seed=SIM_SEED)
        gaps = {}
        for bench in all_benchmarks(dist, 2.0, p_bar):
            if bench.name.startswith("dvs") and bench.name != dvs_name:
                continue
            sim_b = simulate(bench.policy, dist, mode, 2.0, N_SIM, seed=SIM_SEED)
            gaps[bench.name] = 100.0 * (sim_b.avg_aoi - sim_age.avg_aoi) / sim_b.avg_aoi
        cells.append((mode, p_bar, prob, grid, res, sim_age, gaps))
    return cells, time.perf_counter() - t0


def test_1_closed_form_oracle_match(closed_form_solves):
    failures = []
    for b, alpha, p_bar, prob, grid, res, dt in closed_form_solves:
        assert dt < 60.0, f"(b={b}, alpha={alpha}, p_bar={p_bar}) solve took {dt:.1f}s"
        _, _, gamma_form = closed_form_fixed_size(b, alpha, p_bar)
        tol = max(2.0 * grid.delta, 0.005 * gamma_form)
        dev = abs(res.gamma_star - gamma_form)
        if dev > tol:
            corner = 1.5 * b * p_bar ** (-(alpha - 1.0) / (alpha + 1.0))
            failures.append(
                f"(b={b}, alpha={alpha}, p_bar={p_bar}): gamma* = {res.gamma_star:.6f}"
                f" vs closed form {gamma_form:.6f}, |diff| = {dev:.6f} > tol {tol:.6f}."
                f" The closed form uses an interior stationary speed, which for"
                f" alpha < 2 would need negative waiting; the feasible optimum is"
                f" the zero-wait corner with average age 1.5*b*p_bar**(-(alpha-1)/"
                f"(alpha+1)) = {corner:.6f}, which the solver attains with the"
                f" power budget tight."
            )
    assert not failures, "closed-form mismatches:\n" + "\n".join(failures)


def test_2_waterfilling_policy_snapshot(snapshot_solve):
    prob, grid, res, _ = snapshot_solve
    y = grid.midpoints
    z, tau = res.policy.z, res.policy.tau
    pos = z > 1e-9
    assert pos.any(), "expected positive waiting at small ages"
    # the positive-waiting region is a contiguous block starting at y = 0
    assert np.array_equal(np.flatnonzero(pos), np.arange(int(pos.sum())))
    threshold = float(y[pos].max())
    assert 0.64 - grid.delta <= threshold <= 0.64 + grid.delta, (
        f"waiting threshold midpoint {threshold} outside 0.64 +/- {grid.delta}"
    )
    slopes = np.diff(z[pos]) / grid.delta
    assert slopes.size == 0 or (slopes.min() >= -1.1 and slopes.max() <= -0.9), (
        f"discrete waiting slope outside -1 +/- 0.1: [{slopes.min()}, {slopes.max()}]"
    )
    assert np.all(tau[:, 0] >= tau[:, 1] - 1e-9), "expected tau_1 >= tau_2 at every age"
    support = y[res.mu > 1e-12]
    assert support.min() >= 0.44 - grid.delta - 1e-12, support.min()
    assert support.max() <= 1.0 + 1e-12, support.max()


# pinned expectation windows, percentage points below each baseline
GAP_WINDOWS = {
    (Mode.UTS, 5.0): {"zero_wait": (35.0, 45.0), "optimal_wait": (11.0, 21.0),
                      "dvs_uts": (7.0, 17.0)},
    (Mode.UTS, 0.5): {"zero_wait": (48.0, 58.0)},
    (Mode.PTS, 5.0): {"zero_wait": (38.0, 48.0), "optimal_wait": (16.0, 26.0),
                      "dvs_pts": (10.0, 20.0)},
}


def test_3_benchmark_ordering(benchmark_cells):
    cells, dt = benchmark_cells
    assert dt < 15 * 60, f"comparison sweep took {dt:.0f}s"
    failures = []
    for mode, p_bar, prob, grid, res, sim_age, gaps in cells:
        for name, (lo, hi) in GAP_WINDOWS[(mode, p_bar)].items():
            gap = gaps[name]
            if not lo <= gap <= hi:
                failures.append(
                    f"{mode.name} p_bar={p_bar} vs {name}: measured gap"
                    f" {gap:.2f}pp outside pinned window [{lo:.0f}, {hi:.0f}]"
                )
    assert not failures, (
        "benchmark gaps outside pinned windows:\n" + "\n".join(failures) + "\n"
        "With pmf [0.7, 0.3] the task-size variance is small, and with little"
        " size variance zero-wait constant speed is already near-optimal, so no"
        " policy can undercut it by tens of percent on this instance: the"
        " optimum lands about 3% below zero-wait and 0.1-0.2% below the best"
        " waiting policy at constant speed."
    )


def test_4_simulator_solver_consistency(
    closed_form_solves, snapshot_solve, benchmark_cells
):
    runs = []
    for b, alpha, p_bar, prob, grid, res, _ in closed_form_solves:
        runs.append((f"closed-form b={b} alpha={alpha}", prob, grid, res, None))
    prob, grid, res, _ = snapshot_solve
    runs.append(("waterfilling snapshot", prob, grid, res, None))
    cells, _ = benchmark_cells
    for mode, p_bar, prob, grid, res, sim_age, _ in cells:
        runs.append((f"comparison {mode.name} p_bar={p_bar}", prob, grid, res, sim_age))

    failures = []
    for label, prob, grid, res, sim in runs:
        if not res.diagnostics["dual_converged"]:
            continue
        if sim is None:
            sim = simulate(
                res.policy, prob.dist, prob.mode, prob.power.alpha, N_SIM,
                seed=SIM_SEED,
            )
        p_bar = prob.power.p_bar
        tol = max(0.02, 2.0 * grid.delta / res.gamma_star)
        rel = abs(sim.avg_aoi - res.gamma_star) / res.gamma_star
        if rel > tol:
            failures.append(
                f"{label}: simulated AoI {sim.avg_aoi:.5f} deviates {rel:.2%}"
                f" from gamma* {res.gamma_star:.5f} (tol {tol:.2%})"
            )
        if sim.avg_power > 1.02 * p_bar:
            failures.append(
                f"{label}: simulated power {sim.avg_power:.4f} > 1.02 * {p_bar}"
            )
        if res.lambda_star > 1e-9 and abs(sim.avg_power - p_bar) / p_bar > 0.02:
            failures.append(
                f"{label}: lambda* = {res.lambda_star:.3g} > 0 but simulated power"
                f" {sim.avg_power:.4f} is not within 2% of {p_bar}"
            )
    assert not failures, "simulator-solver inconsistencies:\n" + "\n".join(failures)


def _draw_instances(n=20, seed=2026):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        b = int(rng.integers(2, 4))
        pmf = rng.dirichlet(np.ones(b) * 2.0)
        pmf = np.maximum(pmf, 0.05)
        pmf = pmf / pmf.sum()
        alpha = float(rng.uniform(1.2, 2.0))
        p_bar = float(rng.uniform(0.5, 8.0))
        mode = Mode.PTS if rng.random() < 0.5 else Mode.UTS
        dist = TaskSizeDistribution.from_pmf(pmf)
        tau_zw = p_bar ** (-(alpha - 1.0) / (alpha + 1.0))
        y_max = float(np.clip(2.5 * b * tau_zw, 0.5, 40.0))
        q_max = int(rng.integers(32, 65))
        out.append((dist, mode, alpha, p_bar, y_max, q_max))
    return out


def test_5_solver_property_suite():
    failures = []
    for k, (dist, mode, alpha, p_bar, y_max, q_max) in enumerate(_draw_instances()):
        prob = Problem(dist, mode, PowerModel(alpha=alpha, p_bar=p_bar))
        grid = QuantizedStateSpace(y_max=y_max, q_max=q_max)
        res = dinkelbach_solve(prob, grid, SolverConfig())

        if res.lambda_star < 0.0:
            failures.append(f"[{k}] lambda* = {res.lambda_star} < 0")

        rep = build_structure_report(res, prob)
        if rep.waterfill_max_dev > 2.0 * grid.delta:
            failures.append(
                f"[{k}] water-filling deviation {rep.waterfill_max_dev:.3g}"
                f" > 2*delta = {2.0 * grid.delta:.3g}"
            )
        if rep.flags["monotonicity_applicable"] and rep.tau_monotonicity_violations:
            failures.append(
                f"[{k}] {rep.tau_monotonicity_violations} speed-ordering pair(s)"
                f" beyond 1e-6: on the quantized grid the true cell optimum can"
                f" break the continuous-model ordering near landing-cell"
                f" boundaries at O(delta) scale"
            )

        trace = sorted(res.diagnostics["trace"], key=lambda e: e["gamma"])
        for a, b2 in zip(trace, trace[1:]):
            if b2["gamma"] > a["gamma"] + 1e-15 and not b2["J"] < a["J"]:
                failures.append(
                    f"[{k}] J({b2['gamma']:.6f}) = {b2['J']:.4e} >="
                    f" J({a['gamma']:.6f}) = {a['J']:.4e}: warm-chain evaluation"
                    f" noise near the root, same order as the gamma spacing"
                )
                break

        vi = value_iteration(
            prob, grid, res.diagnostics["gamma_bisect"], res.lambda_star,
            SolverConfig(),
        )
        dspan = np.diff(vi.spans)
        if dspan.size and float(dspan.max()) > 1e-12:
            failures.append(
                f"[{k}] value-iteration span uptick +{float(dspan.max()):.3e}:"
                f" the per-state minimization over a piecewise-smooth landscape"
                f" is inexact, so the sweep is not an exact backup operator"
            )

        res2 = dinkelbach_solve(prob, grid, SolverConfig())
        if not (
            res2.gamma_star == res.gamma_star
            and np.array_equal(res2.policy.z, res.policy.z)
            and np.array_equal(res2.policy.tau, res.policy.tau)
            and np.array_equal(res2.value, res.value)
        ):
            failures.append(f"[{k}] rerun under the same config not bit-identical")

        if k == 0:
            s1 = simulate(res.policy, dist, mode, alpha, 20000, seed=7)
            s2 = simulate(res.policy, dist, mode, alpha, 20000, seed=7)
            if not (s1.avg_aoi == s2.avg_aoi and s1.avg_power == s2.avg_power):
                failures.append("[0] simulation rerun under the same seed differs")

    assert not failures, (
        f"{len(failures)} property failure(s) over 20 instances:\n"
        + "\n".join(failures)
    )


@pytest.fixture(scope="module")
def uniform_family():
    """Uniform task-size families with mean 5 and widening spread."""
    from age_sched.benchmarks import zero_wait_constant_speed

    rows = []
    for w in range(5):
        pmf = np.zeros(5 + w)
        pmf[4 - w : 5 + w] = 1.0 / (2 * w + 1)
        prob = Problem(
            TaskSizeDistribution.from_pmf(pmf), Mode.UTS,
            PowerModel(alpha=2.0, p_bar=5.0),
        )
        grid = QuantizedStateSpace(y_max=7.0, q_max=50)
        res = dinkelbach_solve(prob, grid, SolverConfig())
        zw = zero_wait_constant_speed(prob.dist, 2.0, 5.0)
        gap = (zw.analytic_aoi - res.gamma_star) / zw.analytic_aoi
        rows.append((w, res.gamma_star, zw.analytic_aoi, gap))
    return rows


def test_6_variance_ordering(uniform_family):
    gammas = [r[1] for r in uniform_family]
    gaps = [r[3] for r in uniform_family]
    detail = "\n".join(
        f"half-width {w}: gamma* = {g:.5f}, zero-wait = {zw:.5f}, gap = {gp:.2%}"
        for w, g, zw, gp in uniform_family
    )
    assert all(b >= a - 1e-12 for a, b in zip(gammas, gammas[1:])), (
        "optimal age not non-decreasing in task-size variance:\n" + detail
    )
    assert all(b > a for a, b in zip(gaps, gaps[1:])), (
        "zero-wait gap not widening with task-size variance:\n" + detail
    )
