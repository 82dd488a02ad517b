"""Scenario driver: builds the system from a config, integrates it and writes
metrics, probe traces and field snapshots.

metrics.csv has one row per attempted step with the columns in
:data:`METRIC_COLUMNS`. Per-step columns count work done inside that step;
``cum_*`` columns are running totals that start from the cost of computing
the initial condition (reported separately in summary.json under ``init``).
``time_*`` columns are wall seconds and are the only non-deterministic ones.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import SimConfig, check_against_mesh
from .errors import ConfigError, EqsimError
from .fem import PointLocator
from .integrators import Integrator, StepRecord
from .start_vector import make_estimator
from .system import EqsSystem
from .vtk import write_vtk

log = logging.getLogger(__name__)

PHASES = ("residual", "solve", "estimator", "assembly", "matrix_setup", "precond_setup", "spectral")

METRIC_COLUMNS = (
    "step", "t", "dt", "method", "accepted", "stages", "newton_iterations", "m_solves", "spectral_solves",
    "pcg_iterations", "spectral_pcg_iterations", "pcg_per_solve", "estimator", "estimator_rank", "rho", "error",
    "precond_setups", "svd_count", "stiffness_assemblies", "residual_evals",
    "cum_pcg_iterations", "cum_m_solves", "cum_precond_setups", "cum_svd_count",
) + tuple(f"time_{p}" for p in PHASES) + ("time_step",)

WALL_COLUMNS = tuple(c for c in METRIC_COLUMNS if c.startswith("time_"))

SUMMARY_FIELDS = ("name", "method", "estimator", "order", "n_dofs", "n_free", "steps_accepted", "steps_rejected",
                  "pcg_iterations", "spectral_pcg_iterations", "m_solves", "spectral_solves", "precond_setups", "svd_count",
                  "newton_iterations", "residual_evals", "stiffness_assemblies", "wall_time",
                  "setup_time", "setup_per_step", "setup_per_eval", "residual_time_per_eval")


@dataclass
class RunResult:
    status: int
    summary: dict
    records: list = field(default_factory=list)
    probe_times: list = field(default_factory=list)
    probe_values: list = field(default_factory=list)
    x_final: np.ndarray | None = None
    message: str = ""


def build_system(cfg: SimConfig, workers: int | None = None):
    mesh = cfg.build_mesh()
    check_against_mesh(cfg, mesh)
    est = make_estimator(cfg.estimator.mode, **cfg.estimator.params)
    system = EqsSystem(mesh, cfg.order, cfg.materials, cfg.build_excitation(),
                       preconditioner=cfg.solver.preconditioner, precond_params=cfg.solver.params,
                       rel_tol=cfg.solver.rel_tol, max_iter=cfg.solver.max_iter, estimator=est,
                       workers=workers or cfg.workers)
    return mesh, system


def _setup_time(timers: dict, method: str) -> float:
    """Per-stage "system setup" work: K assembly plus RHS/matrix formation.

    For the explicit methods this is the fused residual evaluation; for SDIRK
    the stiffness assembly and the ``M + gamma dt K`` / RHS formation.
    Preconditioner setup is reported separately.
    """
    if method == "sdirk32":
        return timers.get("assembly", 0.0) + timers.get("matrix_setup", 0.0)
    return timers.get("residual", 0.0)


def run(cfg: SimConfig, out_dir=None, workers: int | None = None, write: bool = True) -> RunResult:
    """Run one scenario. Returns a RunResult; ``status`` 0 ok, 2 solver failure.

    Config problems raise ConfigError (exit status 1 at the CLI).
    """
    out = Path(out_dir) if out_dir is not None else (
        Path(cfg.output.dir) if cfg.output.dir else None)
    if out is not None and not out.is_absolute() and out_dir is None:
        out = cfg.base_dir / out
    mesh, system = build_system(cfg, workers)
    probes = PointLocator(mesh, system.dofmap, cfg.probes) if cfg.probes else None
    ic = cfg.integrator
    integ = Integrator(system, ic.method, tol=ic.tol, max_stages=ic.max_stages,
                       max_rejections=ic.max_rejections, fixed_stages=ic.fixed_stages,
                       rho_mode=ic.rho_mode, newton=ic.newton)

    if write and out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if cfg.output.snapshot_every:
            (out / "snapshots").mkdir(exist_ok=True)
    metrics_f = open(out / "metrics.csv", "w", newline="") if write and out else None
    probes_f = open(out / "probes.csv", "w", newline="") if write and out and probes else None
    metrics_w = csv.writer(metrics_f) if metrics_f else None
    probes_w = csv.writer(probes_f) if probes_f else None
    if metrics_w:
        metrics_w.writerow(METRIC_COLUMNS)
    if probes_w:
        probes_w.writerow(["t"] + [f"probe_{k}" for k in range(len(cfg.probes))])

    result = RunResult(0, {})
    t_start = time.perf_counter()
    cum = {"pcg": 0, "m": 0, "pre": 0, "svd": 0}
    svd_prev = [0]
    n_accepted = [0]

    def snapshot(x_free, t, index):
        if not (write and out and cfg.output.snapshot_every):
            return
        xf = system.full(x_free, t)
        write_vtk(out / "snapshots" / f"step_{index:05d}.vtk", mesh, xf[:mesh.n_nodes], system.cell_kappa(xf),
                  title=f"{cfg.name} t={t!r}")

    def record_probe(x_free, t):
        if probes is None:
            return
        vals = probes(system.full(x_free, t))
        result.probe_times.append(t)
        result.probe_values.append(vals)
        if probes_w:
            probes_w.writerow([repr(t)] + [repr(float(v)) for v in vals])

    def on_step(rec: StepRecord, x):
        c = rec.counters
        svd_now = system.estimator.stats.svd_count
        svd = svd_now - svd_prev[0]
        svd_prev[0] = svd_now
        pre = c["mass_precond_setups"] + c["step_precond_setups"]
        cum["pcg"] += c["pcg_iterations"]
        cum["m"] += c["m_solves"]
        cum["pre"] += pre
        cum["svd"] += svd
        row = {
            "step": rec.step, "t": rec.t, "dt": rec.dt, "method": rec.method, "accepted": int(rec.accepted),
            "stages": rec.stages, "newton_iterations": rec.newton_iterations, "m_solves": c["m_solves"],
            "spectral_solves": c["spectral_solves"], "pcg_iterations": c["pcg_iterations"],
            "spectral_pcg_iterations": c["spectral_pcg_iterations"],
            "pcg_per_solve": " ".join(map(str, rec.pcg_per_solve)), "estimator": rec.estimator,
            "estimator_rank": system.estimator.stats.last_rank, "rho": rec.rho, "error": rec.error,
            "precond_setups": pre, "svd_count": svd, "stiffness_assemblies": c["stiffness_assemblies"],
            "residual_evals": c["residual_evals"], "cum_pcg_iterations": cum["pcg"], "cum_m_solves": cum["m"],
            "cum_precond_setups": cum["pre"], "cum_svd_count": cum["svd"],
        }
        for p in PHASES:
            row[f"time_{p}"] = rec.timers.get(p, 0.0)
        row["time_step"] = time.perf_counter() - step_clock[0]
        step_clock[0] = time.perf_counter()
        result.records.append(row)
        if metrics_w:
            metrics_w.writerow([_fmt(row[k]) for k in METRIC_COLUMNS])
        if x is not None:
            n_accepted[0] += 1
            t_new = rec.t + rec.dt
            record_probe(x, t_new)
            if cfg.output.snapshot_every and n_accepted[0] % cfg.output.snapshot_every == 0:
                snapshot(x, t_new, n_accepted[0])

    step_clock = [time.perf_counter()]
    init = None
    try:
        x0 = system.initial_state(ic.t0, ic.initial)
        init = system.counters.snapshot()
        cum.update(pcg=init["pcg_iterations"], m=init["m_solves"], pre=system.counters.precond_setups)
        svd_prev[0] = system.estimator.stats.svd_count
        record_probe(x0, ic.t0)
        snapshot(x0, ic.t0, 0)
        step_clock[0] = time.perf_counter()
        x = integ.run(ic.t0, ic.t_end, ic.dt0, x0=x0, on_step=on_step, adaptive=ic.adaptive)
        result.x_final = x
        if cfg.output.snapshot_every and n_accepted[0] % cfg.output.snapshot_every:
            snapshot(x, ic.t_end, n_accepted[0])
    except ConfigError:
        raise
    except EqsimError as exc:
        result.status = 2
        result.message = str(exc)
        log.error("solver failure: %s", exc)
    finally:
        for f in (metrics_f, probes_f):
            if f:
                f.close()

    wall = time.perf_counter() - t_start
    ctr = system.counters
    setup = _setup_time(system.timers, ic.method)
    n_steps = integ.accepted + integ.rejected
    n_evals = ctr.stiffness_assemblies if ic.method == "sdirk32" else ctr.residual_evals
    result.summary = {
        "name": cfg.name, "method": ic.method, "estimator": cfg.estimator.mode, "order": cfg.order,
        "n_dofs": system.dofmap.n_dofs, "n_free": system.n, "steps_accepted": integ.accepted,
        "steps_rejected": integ.rejected, "pcg_iterations": ctr.pcg_iterations,
        "spectral_pcg_iterations": ctr.spectral_pcg_iterations, "m_solves": ctr.m_solves,
        "spectral_solves": ctr.spectral_solves, "precond_setups": ctr.precond_setups,
        "svd_count": system.estimator.stats.svd_count, "newton_iterations": ctr.newton_iterations,
        "residual_evals": ctr.residual_evals, "stiffness_assemblies": ctr.stiffness_assemblies,
        "wall_time": wall, "setup_time": setup, "setup_per_step": setup / n_steps if n_steps else 0.0,
        "setup_per_eval": setup / n_evals if n_evals else 0.0,
        "residual_time_per_eval": system.timers.get("residual", 0.0) / ctr.residual_evals
        if ctr.residual_evals else 0.0,
        "timers": dict(system.timers), "init": init, "status": result.status, "message": result.message,
    }
    if write and out is not None:
        (out / "summary.json").write_text(json.dumps(result.summary, indent=2, default=float))
    return result


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


# --------------------------------------------------------------------------
# comparison

COMPARE_COLUMNS = ("name", "method", "estimator", "order", "steps_accepted", "steps_rejected", "wall_time",
                   "pcg_iterations", "m_solves", "precond_setups", "svd_count", "setup_per_step",
                   "setup_per_eval")


@dataclass
class Comparison:
    rows: list
    notes: list

    def table(self) -> str:
        cols = COMPARE_COLUMNS
        cells = [[_cell(r[c]) for c in cols] for r in self.rows]
        widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
        lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
        lines.append("  ".join("-" * w for w in widths))
        lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
        return "\n".join(lines + [""] + self.notes)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(COMPARE_COLUMNS)
            for r in self.rows:
                w.writerow([_fmt(r[c]) for c in COMPARE_COLUMNS])


def _cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def check_same_physics(configs) -> None:
    keys = {c.physics_key() for c in configs}
    if len(keys) > 1:
        names = ", ".join(c.name for c in configs)
        raise ValueError(f"configs do not share mesh and physics: {names}")


def compare(configs, out_dir=None, workers: int | None = None) -> Comparison:
    """Run every config and tabulate cost metrics.

    Raises ValueError when the configs do not describe the same physical
    problem. A run that fails is listed with its status instead of aborting
    the comparison.
    """
    configs = list(configs)
    if not configs:
        raise ValueError("nothing to compare")
    check_same_physics(configs)
    rows, notes = [], []
    for k, cfg in enumerate(configs):
        sub = Path(out_dir) / f"{k:02d}_{cfg.name}" if out_dir is not None else None
        res = run(cfg, sub, workers, write=sub is not None)
        rows.append(res.summary)
        if res.status:
            notes.append(f"{cfg.name}: solver failure ({res.message})")
    by_est = {}
    for r in rows:
        if r["method"] == "rkc" and r["status"] == 0:
            by_est.setdefault(r["estimator"], r["pcg_iterations"])
    if "pod_fixed" in by_est and "pod_rolling" in by_est:
        fixed, rolling = by_est["pod_fixed"], by_est["pod_rolling"]
        if rolling < fixed:
            notes.append(f"POD ordering as expected: rolling {rolling} < fixed {fixed} PCG iterations")
        else:
            notes.append(f"POD ordering INVERTED: rolling {rolling} >= fixed {fixed} PCG iterations")
    setup = {r["method"]: r for r in rows if r["status"] == 0}
    if "sdirk32" in setup and "rkc" in setup:
        s, e = setup["sdirk32"], setup["rkc"]
        if e["setup_per_eval"] > 0:
            notes.append(f"setup time ratio SDIRK/RKC per stage evaluation: "
                         f"{s['setup_per_eval'] / e['setup_per_eval']:.1f}")
        if e["setup_per_step"] > 0:
            notes.append(f"setup time ratio SDIRK/RKC per step: {s['setup_per_step'] / e['setup_per_step']:.1f}")
    cmp = Comparison(rows, notes)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        cmp.write_csv(Path(out_dir) / "comparison.csv")
        (Path(out_dir) / "comparison.txt").write_text(cmp.table() + "\n")
    return cmp
