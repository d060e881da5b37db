"""Command line front end: solve, simulate, compare, verify, oracle.

Artifacts are plain CSV/JSON written atomically (temp file + rename) into the
output directory. Floats are serialized with 17 significant digits so that
policy files reload bit-exactly.

Exit codes: 0 success, 1 input or validation error, 2 infeasible or
non-convergent solve, 3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import os
import sys
import tempfile
from types import SimpleNamespace

import numpy as np

from . import benchmarks as bm
from .config import RunConfig, load_config
from .errors import ConfigError, ConvergenceError, InfeasibleError
from .model import Mode
from .simulate import simulate
from .solver import QuantizedPolicy, SolverConfig, dinkelbach_solve
from .structure import build_structure_report, closed_form_fixed_size

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_INFEASIBLE = 2
EXIT_VERIFY = 3

BENCHMARKS = {
    "zero_wait": bm.zero_wait_constant_speed,
    "dvs_uts": bm.dvs_uts,
    "dvs_pts": bm.dvs_pts,
    "optimal_wait": bm.optimal_wait_constant_speed,
}
COMPARE_POLICIES = (
    "age_minimal_pts",
    "age_minimal_uts",
    "zero_wait",
    "optimal_wait",
    "dvs_pts",
    "dvs_uts",
)


# ------------------------------------------------------------------ artifacts

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _atomic_write(path: str, text: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_csv(path: str, header: list[str], rows) -> None:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    for row in rows:
        wr.writerow(row)
    _atomic_write(path, buf.getvalue())


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _write_json(path: str, obj) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, default=_json_default)
    _atomic_write(path, text + "\n")


def write_policy_csv(path: str, policy: QuantizedPolicy) -> None:
    header = ["q", "y_mid", "z"] + [f"tau_{k}" for k in range(1, policy.b + 1)]
    mids = policy.grid.midpoints
    rows = (
        [str(q + 1), _fmt(mids[q]), _fmt(policy.z[q])] + [_fmt(t) for t in policy.tau[q]]
        for q in range(policy.grid.q_max)
    )
    _write_csv(path, header, rows)


def load_policy_csv(path: str, grid) -> QuantizedPolicy:
    try:
        with open(path, newline="") as fh:
            rd = csv.reader(fh)
            header = next(rd, None)
            body = list(rd)
    except OSError as exc:
        raise ConfigError(f"cannot read policy file {path}: {exc}") from None
    if not header or header[:3] != ["q", "y_mid", "z"]:
        raise ConfigError(f"{path} is not a policy file (header {header!r})")
    b = len(header) - 3
    if b < 1 or header[3:] != [f"tau_{k}" for k in range(1, b + 1)]:
        raise ConfigError(f"{path} has malformed tau columns: {header[3:]!r}")
    if len(body) != grid.q_max:
        raise ConfigError(
            f"{path} has {len(body)} rows but the grid has {grid.q_max} intervals"
        )
    z = np.empty(grid.q_max)
    tau = np.empty((grid.q_max, b))
    try:
        for i, row in enumerate(body):
            if int(row[0]) != i + 1:
                raise ConfigError(f"{path} row {i + 1} has q = {row[0]}")
            z[i] = float(row[2])
            tau[i] = [float(v) for v in row[3:]]
    except (ValueError, IndexError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path} has a malformed row: {exc}") from None
    return QuantizedPolicy(grid=grid, z=z, tau=tau)


def write_value_csv(path: str, grid, r_vec: np.ndarray) -> None:
    rows = (
        [str(q + 1), _fmt(grid.midpoints[q]), _fmt(r_vec[q])]
        for q in range(grid.q_max)
    )
    _write_csv(path, ["q", "y_mid", "R"], rows)


# ------------------------------------------------------------------- commands

def cmd_solve(cfg: RunConfig, out_dir: str) -> int:
    problem = cfg.problem()
    res = dinkelbach_solve(problem, cfg.grid(), cfg.solver)
    report = build_structure_report(res, problem)
    write_policy_csv(os.path.join(out_dir, "policy.csv"), res.policy)
    write_value_csv(os.path.join(out_dir, "value.csv"), res.policy.grid, res.value)
    _write_json(
        os.path.join(out_dir, "result.json"),
        {
            "gamma_star": res.gamma_star,
            "lambda_star": res.lambda_star,
            "iterations": {
                "bisections": res.diagnostics["bisections"],
                "dual_iterations": res.diagnostics["dual_iterations"],
                "vi_sweeps": res.diagnostics["vi_sweeps"],
            },
            "j_residual": res.diagnostics["j_residual"],
            "clamp_mass": res.clamp_mass,
            "mode": cfg.mode.value,
            "p_bar": cfg.p_bars[0],
            "structure": report.to_dict(),
        },
    )
    print(f"gamma_star = {res.gamma_star:.6f}  lambda_star = {res.lambda_star:.6f}")
    return EXIT_OK


def _resolve_policy(cfg: RunConfig, name_or_path: str):
    """Benchmark name or policy.csv path -> (callable policy, mode to run in)."""
    if name_or_path in BENCHMARKS:
        res = BENCHMARKS[name_or_path](cfg.dist, cfg.alpha, cfg.p_bars[0])
        return res.policy, (res.mode or cfg.mode)
    policy = load_policy_csv(name_or_path, cfg.grid())
    if policy.b != cfg.dist.b:
        raise ConfigError(
            f"policy has {policy.b} speed columns but the task pmf has {cfg.dist.b}"
        )
    return policy, cfg.mode


def cmd_simulate(cfg: RunConfig, out_dir: str, policy_arg: str | None,
                 seed: int | None, trace: bool) -> int:
    target = policy_arg or os.path.join(out_dir, "policy.csv")
    policy, mode = _resolve_policy(cfg, target)
    rep = simulate(
        policy, cfg.dist, mode, cfg.alpha, cfg.n_epochs,
        seed=cfg.seed if seed is None else seed, include_trace=trace,
    )
    _write_json(os.path.join(out_dir, "sim.json"), rep.to_dict())
    if trace:
        tr = rep.trace
        rows = (
            [str(int(tr["n"][i])), _fmt(tr["y"][i]), _fmt(tr["z"][i]),
             str(int(tr["x"][i])), _fmt(tr["L"][i]), _fmt(tr["area"][i]),
             _fmt(tr["W"][i])]
            for i in range(cfg.n_epochs)
        )
        _write_csv(os.path.join(out_dir, "trace.csv"),
                   ["n", "y", "z", "x", "L", "area", "W"], rows)
    print(f"avg_aoi = {rep.avg_aoi:.6f}  avg_power = {rep.avg_power:.6f}")
    return EXIT_OK


def _cell_payload(cfg: RunConfig, p_bar: float, policy_name: str) -> dict:
    return {
        "pmf": cfg.dist.pmf.tolist(),
        "alpha": cfg.alpha,
        "p_bar": p_bar,
        "tau_min": cfg.tau_min,
        "tau_max": cfg.tau_max,
        "y_max": cfg.y_max,
        "q_max": cfg.q_max,
        "solver": dataclasses.asdict(cfg.solver),
        "mode": cfg.mode.value,
        "n_epochs": cfg.n_epochs,
        "seed": cfg.seed,
        "policy": policy_name,
    }


def _run_cell(payload: dict) -> dict:
    """One (p_bar, policy) comparison cell; exceptions land in the error column."""
    from .model import PowerModel, TaskSizeDistribution
    from .solver import Problem, QuantizedStateSpace

    row = {
        "p_bar": payload["p_bar"], "policy": payload["policy"],
        "analytic_aoi": "", "sim_aoi": "", "sim_power": "", "error": "",
    }
    try:
        dist = TaskSizeDistribution.from_pmf(payload["pmf"])
        name = payload["policy"]
        if name.startswith("age_minimal_"):
            mode = Mode.parse(name.removeprefix("age_minimal_"))
            problem = Problem(
                mode=mode, dist=dist,
                power=PowerModel(
                    alpha=payload["alpha"], p_bar=payload["p_bar"],
                    tau_min=payload["tau_min"], tau_max=payload["tau_max"],
                ),
            )
            grid = QuantizedStateSpace(y_max=payload["y_max"], q_max=payload["q_max"])
            res = dinkelbach_solve(problem, grid, SolverConfig(**payload["solver"]))
            policy, analytic = res.policy, res.gamma_star
        else:
            out = BENCHMARKS[name](dist, payload["alpha"], payload["p_bar"])
            policy, analytic = out.policy, out.analytic_aoi
            mode = out.mode or Mode.parse(payload["mode"])
        rep = simulate(
            policy, dist, mode, payload["alpha"], payload["n_epochs"], payload["seed"]
        )
        row.update(
            analytic_aoi=_fmt(analytic),
            sim_aoi=_fmt(rep.avg_aoi),
            sim_power=_fmt(rep.avg_power),
        )
    except Exception as exc:  # noqa: BLE001  (cell failures must not kill the sweep)
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def cmd_compare(cfg: RunConfig, out_dir: str) -> int:
    cells = [
        _cell_payload(cfg, pb, name)
        for pb in cfg.p_bars
        for name in COMPARE_POLICIES
    ]
    workers = os.environ.get("AGE_SCHED_THREADS")
    workers = int(workers) if workers else (os.cpu_count() or 1)
    workers = max(1, min(workers, len(cells)))
    if workers == 1:
        rows = [_run_cell(c) for c in cells]
    else:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_cell, cells))
    header = ["p_bar", "policy", "analytic_aoi", "sim_aoi", "sim_power", "error"]
    _write_csv(
        os.path.join(out_dir, "comparison.csv"),
        header,
        ([_fmt(r["p_bar"]), r["policy"], r["analytic_aoi"], r["sim_aoi"],
          r["sim_power"], r["error"]] for r in rows),
    )
    failed = sum(1 for r in rows if r["error"])
    print(f"compare: {len(rows)} cells, {failed} failed")
    return EXIT_OK


def cmd_verify(cfg: RunConfig, out_dir: str) -> int:
    result_path = os.path.join(out_dir, "result.json")
    policy_path = os.path.join(out_dir, "policy.csv")
    for p in (result_path, policy_path):
        if not os.path.exists(p):
            raise ConfigError(f"missing solve artifact: {p}")
    with open(result_path) as fh:
        result = json.load(fh)
    policy = load_policy_csv(policy_path, cfg.grid())
    ns = SimpleNamespace(
        policy=policy,
        gamma_star=float(result["gamma_star"]),
        lambda_star=float(result["lambda_star"]),
    )
    report = build_structure_report(ns, cfg.problem())
    _write_json(os.path.join(out_dir, "structure.json"), report.to_dict())

    tol = 2.0 * cfg.grid().delta
    checks = [("waterfill_dev", report.waterfill_max_dev <= tol)]
    if report.flags["monotonicity_applicable"]:
        checks.append(("tau_monotonicity", report.tau_monotonicity_violations == 0))
    if report.flags["fixed_point_applicable"]:
        checks.append(("fixed_point_residual", report.fixed_point_max_residual <= tol))
    ok = True
    for name, passed in checks:
        print(f"{name}: {'pass' if passed else 'FAIL'}")
        ok = ok and passed
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_oracle(cfg: RunConfig) -> int:
    pmf = cfg.dist.pmf
    live = np.flatnonzero(pmf > 0.0)
    if live.size != 1:
        raise ConfigError("oracle needs a deterministic task size (one-point pmf)")
    b = int(live[0]) + 1
    tau, z, gamma = closed_form_fixed_size(b, cfg.alpha, cfg.p_bars[0])
    print(json.dumps(
        {"b": b, "alpha": cfg.alpha, "p_bar": cfg.p_bars[0],
         "tau_star": tau, "z_star": z, "gamma_star": gamma},
        indent=2, sort_keys=True,
    ))
    return EXIT_OK


# ----------------------------------------------------------------- entrypoint

def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="age-sched",
        description="Age-minimal CPU scheduling: solver, simulator, baselines.",
    )
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("solve", "solve one instance; write policy.csv, value.csv, result.json"),
        ("simulate", "simulate a solved policy or a named baseline"),
        ("compare", "sweep budgets over all six policies into comparison.csv"),
        ("verify", "re-check structural properties of solve artifacts"),
        ("oracle", "print the deterministic-size closed-form optimum"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="YAML run configuration")
        if name != "oracle":
            p.add_argument("--out", default=None, help="artifact directory")
        if name == "simulate":
            p.add_argument("--policy", default=None,
                           help="policy.csv path or baseline name "
                                f"({', '.join(BENCHMARKS)})")
            p.add_argument("--seed", type=int, default=None)
            p.add_argument("--trace", action="store_true",
                           help="also write the per-epoch trace.csv")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.command == "oracle":
            return cmd_oracle(cfg)
        out_dir = args.out or cfg.out_dir or "."
        os.makedirs(out_dir, exist_ok=True)
        if args.command == "solve":
            return cmd_solve(cfg, out_dir)
        if args.command == "simulate":
            return cmd_simulate(cfg, out_dir, args.policy, args.seed, args.trace)
        if args.command == "compare":
            return cmd_compare(cfg, out_dir)
        return cmd_verify(cfg, out_dir)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (InfeasibleError, ConvergenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
