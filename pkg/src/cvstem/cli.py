"""Config-driven experiment runner for the two benchmarks.

Subcommands: ``run`` executes a controller-comparison ensemble (with an
optional controller sampling-period sweep) and writes per-run CSVs,
per-run manifests, bound reports for the optimizing controller, and a
normalized summary table; ``summarize`` rebuilds the summary and
plot-data files from a results directory; ``verify-bounds`` executes the
ensembles and reports only the analytic-bound checks. Exit codes: 0
success, 1 verify-bounds found a violated bound, 2 configuration error,
3 solver failure fraction above the threshold.
"""

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import analysis, benchmarks, programs
from .benchmarks import ConfigError
from .controller import control_effort
from .sim import write_run_manifest, write_trajectory_csv

STEADY_STATE_WINDOW = 150
FAILURE_FRACTION_LIMIT = 0.1


@dataclass
class ExperimentManifest:
    """One experiment: a benchmark config crossed with controllers and dt_ctrl values."""

    config: dict
    controllers: list
    sweep: list
    n_runs: int = 60
    seed_base: int = 0
    out: str = "results"
    steady_state_window: int = STEADY_STATE_WINDOW

    def __post_init__(self):
        if self.n_runs < 1:
            raise ConfigError("n_runs must be >= 1")
        if not self.controllers:
            raise ConfigError("config selects no controllers")
        if "dt_sim" not in self.config:
            raise ConfigError("config needs dt_sim")
        dt_sim = float(self.config["dt_sim"])
        for dt in self.sweep:
            ratio = dt / dt_sim
            if dt < dt_sim or abs(ratio - round(ratio)) > 1e-9:
                raise ConfigError(
                    f"sweep value dt_ctrl={dt} is not a multiple of dt_sim={dt_sim}")

    @classmethod
    def from_config(cls, cfg, out=None, seed_base=None):
        controllers = cfg.get("controllers")
        if controllers is None:
            controllers = [cfg["controller"]] if "controller" in cfg else []
        dt_ctrl = cfg.get("dt_ctrl", cfg.get("dt_sim"))
        sweep = list(dt_ctrl) if isinstance(dt_ctrl, (list, tuple)) else [dt_ctrl]
        return cls(
            config=cfg,
            controllers=list(controllers),
            sweep=[float(v) for v in sweep],
            n_runs=int(cfg.get("n_runs", 60)),
            seed_base=int(seed_base if seed_base is not None
                          else cfg.get("seed_base", 0)),
            out=str(out if out is not None else cfg.get("out", "results")),
        )

    def cells(self):
        for ctrl in self.controllers:
            for dt in self.sweep:
                yield ctrl, dt


def _cell_dir(out, controller, dt_ctrl):
    return Path(out) / f"{controller}_dt{dt_ctrl:g}"


def _steady_state_mse(err_sq, window):
    tail = err_sq[-window:] if len(err_sq) > window else err_sq
    return float(np.mean(tail))


def _run_one(args):
    """Worker: one (config-cell, seed) run; writes CSV + manifest."""
    cfg, controller, dt_ctrl, seed, out, window = args
    bc = benchmarks.benchmark_config(cfg, controller, dt_ctrl)
    cell = _cell_dir(out, controller, dt_ctrl)
    try:
        record = benchmarks.run_single(bc, seed)
    except RuntimeError as exc:
        write_run_manifest(cell / f"run_{seed:05d}.json", cfg, seed,
                           solver_stats={"failed": True, "error": str(exc)})
        return {"seed": seed, "ok": False, "error": str(exc)}

    write_trajectory_csv(record, cell / f"run_{seed:05d}.csv")
    statuses = {}
    for _, sol in record.metric_log:
        statuses[sol.solver_status] = statuses.get(sol.solver_status, 0) + 1
    write_run_manifest(cell / f"run_{seed:05d}.json", cfg, seed,
                       solver_stats={"num_solves": len(record.metric_log),
                                     "status_counts": statuses})

    dt_sim = float(record.times[1] - record.times[0])
    err_sq = record.squared_errors()
    out_stats = {
        "seed": seed,
        "ok": True,
        "steady_mse": _steady_state_mse(err_sq, window),
        "effort": control_effort(record.inputs, dt_sim),
        "err_sq": err_sq,
        "times": record.times,
    }

    if record.metric_log:
        lam_lo, lam_hi = analysis.run_metric_extremes([record])
        out_stats["metric_extremes"] = (lam_lo, lam_hi)
        e0 = record.states[0] - record.desired_states[0]
        M0, _ = programs.reconstruct_metric(record.metric_log[0][1])
        out_stats["v0"] = float(e0 @ (M0 @ e0))
        if bc.which == "formation":
            # The analytic bound controls the composite variable, not the
            # raw state error, so the bound report gets its own curve; the
            # summary comparison stays on ||x - x_d||^2 for every controller.
            f = bc.formation
            system, _, gains = benchmarks.formation_system(
                num_agents=int(f.get("n_agents", 5)), mass=f.get("mass", 1.0),
                orbit_period=f.get("orbit_period", bc.horizon),
                K1=f.get("K1", 5.0), K2=f.get("K2", 2.0),
                Lambda=f.get("Lambda", 1.0), radius=f.get("radius", 0.5))
            n = system.dof
            H = system.inertia(record.states[0][:n])
            e_q = record.states[:, :n] - record.desired_states[:, :n]
            e_qd = record.states[:, n:] - record.desired_states[:, n:]
            s = e_qd + e_q @ gains.Lambda.T
            out_stats["bound_err_sq"] = np.einsum("ij,ij->i", s, s)
            out_stats["v0"] = float(s[0] @ ((H + M0) @ s[0]))
            hm = [np.linalg.eigvalsh(H + programs.reconstruct_metric(sol)[0])
                  for _, sol in record.metric_log]
            out_stats["metric_extremes"] = (min(float(e[0]) for e in hm),
                                            max(float(e[-1]) for e in hm))
    return out_stats


def _bound_report(cfg, bc, cell_stats, path):
    """Analytic bound vs ensemble curve for one optimizing-controller cell."""
    runs = [r for r in cell_stats if r["ok"] and "metric_extremes" in r]
    if not runs:
        return None
    times = runs[0]["times"]
    curves = np.stack([r.get("bound_err_sq", r["err_sq"]) for r in runs])
    mean = curves.mean(axis=0)
    stderr = (curves.std(axis=0, ddof=1) / np.sqrt(len(runs))
              if len(runs) > 1 else np.zeros_like(mean))
    lam_lo = min(r["metric_extremes"][0] for r in runs)
    lam_hi = max(r["metric_extremes"][1] for r in runs)
    v0 = float(np.mean([r["v0"] for r in runs]))

    if bc.which == "attitude":
        g_u = bc.noise_scale * float(np.linalg.norm(benchmarks.ATTITUDE_DIFFUSION))
        bound = analysis.tracking_mse_bound(
            bc.alpha, lam_lo, lam_hi, bc.m_x, bc.eps, g_u, v0, times)
        constants = {"alpha": bc.alpha, "m_lower": lam_lo, "m_upper": lam_hi,
                     "g_u": g_u, "V0": v0}
    else:
        f = bc.formation
        n = 3 * int(f.get("n_agents", 5))
        mass = f.get("mass", 1.0)
        params = programs.LagrangianParams.from_bounds(
            alpha_ell=f.get("alpha_ell", 0.1), eps_ell=f.get("eps_ell", 1.0),
            ell_x=f.get("ell_x", 0.0), ell_xx=f.get("ell_xx", 0.0),
            g_B=bc.noise_scale * np.sqrt(n) / mass,
            k_lower=f.get("k_lower", 0.99 * f.get("K1", 5.0)),
            h_max=mass, R=bc.R * np.eye(n))
        bound = analysis.lagrangian_mse_bound(params, lam_lo, lam_hi, v0, times)
        constants = {"alpha_ell": params.alpha_ell, "hm_min": lam_lo,
                     "hm_max": lam_hi, "g_B": params.g_B,
                     "k_lower": params.k_lower, "V0": v0}
    return analysis.write_bound_report(path, constants, times, bound, mean, stderr)


def _fmt(x):
    return f"{x:.12g}"


def _write_summary(out, rows):
    """Summary CSV normalized to the optimizing controller at the base dt_ctrl."""
    base = next((r for r in rows if r["controller"] == "cvstem"), rows[0])
    mse_base = base["steady_state_mse"] or 1.0
    eff_base = base["control_effort"] or 1.0
    path = Path(out) / "summary.csv"
    cols = ["benchmark", "controller", "dt_ctrl", "n_runs",
            "steady_state_mse", "steady_state_mse_normalized",
            "control_effort", "control_effort_normalized", "failure_fraction"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([r["benchmark"], r["controller"], _fmt(r["dt_ctrl"]),
                        r["n_runs"], _fmt(r["steady_state_mse"]),
                        _fmt(r["steady_state_mse"] / mse_base),
                        _fmt(r["control_effort"]),
                        _fmt(r["control_effort"] / eff_base),
                        _fmt(r["failure_fraction"])])
    return path


def _write_plot_data(out, rows):
    """Plot-ready columns: dt_ctrl on x, one normalized column per controller."""
    controllers = sorted({r["controller"] for r in rows})
    dts = sorted({r["dt_ctrl"] for r in rows})
    base = next((r for r in rows if r["controller"] == "cvstem"), rows[0])
    for which, key in (("error", "steady_state_mse"), ("effort", "control_effort")):
        norm = base[key] or 1.0
        with open(Path(out) / f"plot_{which}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["dt_ctrl"] + controllers)
            for dt in dts:
                row = [_fmt(dt)]
                for ctrl in controllers:
                    match = [r for r in rows
                             if r["controller"] == ctrl and r["dt_ctrl"] == dt]
                    row.append(_fmt(match[0][key] / norm) if match else "")
                w.writerow(row)


class SolverFailureBudget(RuntimeError):
    """Raised when too many runs abort on solver failures."""


def run_experiment(manifest, jobs=1, bounds_only=False):
    """Execute every cell of the manifest; returns (rows, bound_passes)."""
    out = Path(manifest.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, bound_passes = [], []
    tasks = []
    for ctrl, dt in manifest.cells():
        _cell_dir(out, ctrl, dt).mkdir(parents=True, exist_ok=True)
        for i in range(manifest.n_runs):
            tasks.append((manifest.config, ctrl, dt, manifest.seed_base + i,
                          str(out), manifest.steady_state_window))

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, tasks))
    else:
        results = [_run_one(t) for t in tasks]

    by_cell = {}
    for task, res in zip(tasks, results):
        by_cell.setdefault((task[1], task[2]), []).append(res)

    total, failed = 0, 0
    for ctrl, dt in manifest.cells():
        stats = sorted(by_cell[(ctrl, dt)], key=lambda r: r["seed"])
        ok = [r for r in stats if r["ok"]]
        total += len(stats)
        failed += len(stats) - len(ok)
        bc = benchmarks.benchmark_config(manifest.config, ctrl, dt)
        if not ok:
            raise SolverFailureBudget(
                f"every run failed in cell {ctrl} dt_ctrl={dt}")
        rows.append({
            "benchmark": bc.which,
            "controller": ctrl,
            "dt_ctrl": dt,
            "n_runs": len(ok),
            "steady_state_mse": float(np.mean([r["steady_mse"] for r in ok])),
            "control_effort": float(np.mean([r["effort"] for r in ok])),
            "failure_fraction": (len(stats) - len(ok)) / len(stats),
        })
        if ctrl == "cvstem":
            report = _bound_report(manifest.config, bc, ok,
                                   _cell_dir(out, ctrl, dt) / "bound_report.json")
            if report is not None:
                bound_passes.append((ctrl, dt, report["passed"]))

    if not bounds_only:
        _write_summary(out, rows)
        _write_plot_data(out, rows)
    failure_fraction = failed / max(total, 1)
    if failure_fraction > FAILURE_FRACTION_LIMIT:
        raise SolverFailureBudget(
            f"{failed}/{total} runs failed (> {FAILURE_FRACTION_LIMIT:.0%})")
    return rows, bound_passes


def summarize_results(out):
    """Rebuild summary.csv and plot data from per-run CSVs on disk."""
    out = Path(out)
    cell_dirs = sorted(p for p in out.iterdir() if p.is_dir()) if out.is_dir() else []
    rows = []
    for cell in cell_dirs:
        name = cell.name
        if "_dt" not in name:
            continue
        ctrl, dt_txt = name.rsplit("_dt", 1)
        csvs = sorted(cell.glob("run_*.csv"))
        manifests = sorted(cell.glob("run_*.json"))
        if not csvs:
            continue
        steady, efforts = [], []
        benchmark = ""
        if manifests:
            benchmark = json.loads(manifests[0].read_text())["config"].get(
                "benchmark", "")
        for path in csvs:
            with open(path, newline="") as fh:
                rd = csv.reader(fh)
                header = next(rd)
                data = np.array([[float(v) for v in row] for row in rd])
            u_cols = [i for i, h in enumerate(header) if h.startswith("u")]
            err = data[:, header.index("err_sq")]
            dt_sim = data[1, 0] - data[0, 0]
            steady.append(_steady_state_mse(err, STEADY_STATE_WINDOW))
            efforts.append(control_effort(data[:, u_cols], dt_sim))
        failures = len(manifests) - len(csvs)
        rows.append({
            "benchmark": benchmark,
            "controller": ctrl,
            "dt_ctrl": float(dt_txt),
            "n_runs": len(csvs),
            "steady_state_mse": float(np.mean(steady)),
            "control_effort": float(np.mean(efforts)),
            "failure_fraction": failures / max(len(manifests), 1),
        })
    if not rows:
        raise ConfigError(f"no results found under {out}")
    rows.sort(key=lambda r: (r["controller"] != "cvstem", r["controller"],
                             r["dt_ctrl"]))
    _write_summary(out, rows)
    _write_plot_data(out, rows)
    return rows


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="cvstem", description="benchmark experiment runner")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "summarize", "verify-bounds"):
        p = sub.add_parser(name)
        if name != "summarize":
            p.add_argument("--config", required=True)
        p.add_argument("--out", default=None)
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--seed-base", type=int, default=None)
    args = parser.parse_args(argv)

    try:
        if args.command == "summarize":
            if args.out is None:
                raise ConfigError("summarize needs --out pointing at results")
            summarize_results(args.out)
            return 0
        cfg = benchmarks.load_config(args.config)
        manifest = ExperimentManifest.from_config(cfg, out=args.out,
                                                  seed_base=args.seed_base)
        rows, bound_passes = run_experiment(
            manifest, jobs=args.jobs,
            bounds_only=args.command == "verify-bounds")
        if args.command == "verify-bounds":
            all_ok = True
            for ctrl, dt, passed in bound_passes:
                print(f"{ctrl} dt_ctrl={dt:g}: "
                      f"{'PASS' if passed else 'FAIL'}")
                all_ok = all_ok and passed
            if not bound_passes:
                print("no optimizing-controller cells; nothing to verify")
            return 0 if all_ok else 1
        for row in rows:
            print(f"{row['controller']} dt_ctrl={row['dt_ctrl']:g}: "
                  f"steady-state mse {row['steady_state_mse']:.6g}, "
                  f"effort {row['control_effort']:.6g}")
        return 0
    except (ConfigError, FileNotFoundError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SolverFailureBudget as exc:
        print(f"solver failures: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
