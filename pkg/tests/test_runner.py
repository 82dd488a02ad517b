import csv
import copy
import json
import math
from pathlib import Path

import numpy as np
import pytest

from eqsim.cli import main
from eqsim.config import load_config, parse_config
from eqsim.errors import ConfigError
from eqsim.runner import METRIC_COLUMNS, WALL_COLUMNS, compare, run
from eqsim.vtk import read_vtk_scalars

from helpers import SLAB_LAYERS, rc_divider

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def small_slab(**changes):
    data = json.loads((CONFIGS / "slab-rkc.json").read_text())
    data["mesh"]["box"]["cells"] = [3, 3, 6]
    data["integrator"]["t_end"] = 0.005
    data["output"]["dir"] = ""
    for path, value in changes.items():
        node = data
        keys = path.split(".")
        for k in keys[:-1]:
            node = node[k]
        node[keys[-1]] = value
    return data


def read_metrics(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return rows[0], rows[1:]


# -- config validation -----------------------------------------------------------

@pytest.mark.parametrize("mutate,message", [
    (lambda d: d.pop("mesh"), "missing required key"),
    (lambda d: d.update(order=3), "order"),
    (lambda d: d["integrator"].update(tol=-1.0), "integrator.tol"),
    (lambda d: d["integrator"].update(method="rk4"), "integrator.method"),
    (lambda d: d["integrator"].update(t_end=0.0), "t_end"),
    (lambda d: d["solver"].update(preconditioner="ilu"), "preconditioner"),
    (lambda d: d["estimator"].update(mode="krylov"), "estimator.mode"),
    (lambda d: d.update(colour="red"), "unknown top-level"),
    (lambda d: d["integrator"].update(stepsize=1), "unknown keys"),
    (lambda d: d["materials"]["1"]["conductivity"].update(type="ohmic"), "conductivity type"),
    (lambda d: d["excitation"]["hv"].update(frequency=0.0), "frequency"),
    (lambda d: d.update(probes=[[0, 0]]), "probes"),
    (lambda d: d.update(workers=0), "workers"),
    (lambda d: d["materials"].update({"x": {"eps_r": 1.0}}), "integer region id"),
    (lambda d: d["materials"]["1"].update(eps_r=0.0), "eps_r must be positive"),
])
def test_config_validation(mutate, message):
    data = small_slab()
    mutate(data)
    with pytest.raises(ConfigError, match=message):
        parse_config(data)


def test_config_region_must_exist():
    data = small_slab()
    data["materials"]["7"] = {"eps_r": 1.0}
    with pytest.raises(ConfigError, match="not in the mesh"):
        run(parse_config(data), write=False)


def test_config_missing_region_material():
    data = small_slab()
    del data["materials"]["2"]
    with pytest.raises(ConfigError, match="no material"):
        run(parse_config(data), write=False)


def test_config_boundary_must_exist():
    data = small_slab()
    data["excitation"]["top"] = {"type": "dc", "level": 1.0}
    with pytest.raises(ConfigError, match="unknown boundary"):
        run(parse_config(data), write=False)


def test_probe_outside_mesh():
    data = small_slab(probes=[[1.0, 1.0, 1.0]])
    with pytest.raises(ConfigError):
        run(parse_config(data), write=False)


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.json")), ids=lambda p: p.stem)
def test_committed_configs_parse(path):
    cfg = load_config(path)
    assert cfg.name == path.stem


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(bad)


# -- CLI --------------------------------------------------------------------------

def test_cli_run_ok(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(small_slab()))
    assert main(["run", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert "PCG iterations" in capsys.readouterr().out
    for name in ("metrics.csv", "probes.csv", "summary.json"):
        assert (tmp_path / "o" / name).exists()


def test_cli_config_error(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(small_slab(order=5)))
    assert main(["run", str(cfg)]) == 1
    assert "config error" in capsys.readouterr().err


def test_cli_bad_workers(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(small_slab()))
    assert main(["run", str(cfg), "--workers", "0"]) == 1


def test_cli_solver_failure(tmp_path, capsys):
    # PCG capped at one iteration cannot meet 1e-12
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(small_slab(**{"solver.max_iter": 1})))
    out = tmp_path / "o"
    assert main(["run", str(cfg), "--out", str(out)]) == 2
    assert "error" in capsys.readouterr().err
    summary = json.loads((out / "summary.json").read_text())
    assert summary["status"] == 2
    assert (out / "metrics.csv").exists()


def test_cli_compare_mismatch(tmp_path, capsys):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    a.write_text(json.dumps(small_slab(name="a")))
    b.write_text(json.dumps(small_slab(name="b", order=2)))
    assert main(["compare", str(a), str(b)]) == 1
    assert "do not share" in capsys.readouterr().err


def test_module_entry_point():
    import subprocess
    import sys
    res = subprocess.run([sys.executable, "-m", "eqsim", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "compare" in res.stdout


# -- outputs --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def slab_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("slab")
    data = small_slab(**{"output.snapshot_every": 5})
    res = run(parse_config(data), out)
    return res, out


def test_metrics_schema(slab_run):
    res, out = slab_run
    header, rows = read_metrics(out / "metrics.csv")
    assert tuple(header) == METRIC_COLUMNS
    assert len(rows) == res.summary["steps_accepted"] + res.summary["steps_rejected"]
    assert all(len(r) == len(header) for r in rows)


def test_cumulative_counters_are_sums(slab_run):
    res, _ = slab_run
    init = res.summary["init"]
    recs = res.records
    for cum, per, start in (("cum_pcg_iterations", "pcg_iterations", init["pcg_iterations"]),
                            ("cum_m_solves", "m_solves", init["m_solves"]),
                            ("cum_precond_setups", "precond_setups", init["mass_precond_setups"]),
                            ("cum_svd_count", "svd_count", 0)):
        running = start
        for r in recs:
            running += r[per]
            assert r[cum] == running
    last = recs[-1]
    assert last["cum_pcg_iterations"] == res.summary["pcg_iterations"]
    assert last["cum_m_solves"] == res.summary["m_solves"]
    assert last["cum_precond_setups"] == res.summary["precond_setups"]


def test_per_solve_list_matches_count(slab_run):
    res, _ = slab_run
    for r in res.records:
        spectral = r["spectral_pcg_iterations"]
        assert sum(int(v) for v in r["pcg_per_solve"].split()) == r["pcg_iterations"] + spectral


def test_probe_file(slab_run):
    res, out = slab_run
    with open(out / "probes.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["t", "probe_0"]
    assert len(rows) - 1 == res.summary["steps_accepted"] + 1
    t = np.array([float(r[0]) for r in rows[1:]])
    assert t[0] == 0.0 and t[-1] == pytest.approx(0.005)
    assert np.all(np.diff(t) > 0)


def test_snapshots(slab_run):
    res, out = slab_run
    files = sorted((out / "snapshots").glob("step_*.vtk"))
    n_acc = res.summary["steps_accepted"]
    assert len(files) == 1 + n_acc // 5 + (1 if n_acc % 5 else 0)
    text = files[0].read_text()
    assert text.startswith("# vtk DataFile Version 2.0")
    assert "UNSTRUCTURED_GRID" in text and "SCALARS potential" in text and "SCALARS kappa" in text
    data = read_vtk_scalars(files[-1])
    assert data["potential"].size == 4 * 4 * 7
    assert data["kappa"].size == 6 * 3 * 3 * 6
    assert set(np.unique(data["kappa"])) <= {k for _, k in SLAB_LAYERS.values()}
    # the last snapshot sits at t_end: top plate at u(t_end)
    u = 1000.0 * math.sin(2 * math.pi * 50.0 * 0.005)
    assert np.sum(np.isclose(data["potential"], u, rtol=1e-9)) == 16
    assert np.sum(data["potential"] == 0.0) == 16


def test_summary_json(slab_run):
    _, out = slab_run
    s = json.loads((out / "summary.json").read_text())
    assert s["status"] == 0 and s["method"] == "rkc"
    assert s["precond_setups"] == 1


def test_determinism_excluding_wall_time(tmp_path):
    data = small_slab()
    a = run(parse_config(data), tmp_path / "a")
    b = run(parse_config(data), tmp_path / "b", workers=1)
    ha, ra = read_metrics(tmp_path / "a" / "metrics.csv")
    _, rb = read_metrics(tmp_path / "b" / "metrics.csv")
    keep = [i for i, c in enumerate(ha) if c not in WALL_COLUMNS]
    assert [[r[i] for i in keep] for r in ra] == [[r[i] for i in keep] for r in rb]
    assert (tmp_path / "a" / "probes.csv").read_text() == (tmp_path / "b" / "probes.csv").read_text()
    assert np.array_equal(a.x_final, b.x_final)


def test_worker_count_does_not_change_results():
    data = small_slab()
    a = run(parse_config(data), write=False, workers=1)
    b = run(parse_config(data), write=False, workers=3)
    assert np.array_equal(a.x_final, b.x_final)
    assert a.summary["pcg_iterations"] == b.summary["pcg_iterations"]


# -- physics examples -----------------------------------------------------------------

def test_zero_amplitude_is_free():
    res = run(load_config(CONFIGS / "slab-zero.json"), write=False)
    assert res.status == 0
    assert res.summary["pcg_iterations"] == 0
    assert not np.any(np.array(res.probe_values))


def test_dc_steady_state_divider():
    res = run(load_config(CONFIGS / "slab-dc.json"), write=False)
    (_, k1), (_, k2) = SLAB_LAYERS[1], SLAB_LAYERS[2]
    target = 1000.0 * k2 / (k1 + k2)
    assert res.probe_values[-1][0] == pytest.approx(target, rel=1e-2)


def test_dc_steady_state_tight_tolerance():
    data = json.loads((CONFIGS / "slab-dc.json").read_text())
    data["integrator"]["tol"] = 1e-5
    data["output"]["dir"] = ""
    res = run(parse_config(data), write=False)
    (_, k1), (_, k2) = SLAB_LAYERS[1], SLAB_LAYERS[2]
    assert res.probe_values[-1][0] == pytest.approx(1000.0 * k2 / (k1 + k2), rel=1e-4)


def test_small_slab_follows_rc_divider():
    res = run(parse_config(small_slab(**{"integrator.t_end": 0.02})), write=False)
    t = np.array(res.probe_times)
    p = np.array(res.probe_values)[:, 0]
    ref = rc_divider(t, phi0=p[0])
    assert np.abs(p - ref).max() <= 0.02 * np.abs(ref).max()


def test_euler_config_fixed_steps():
    data = json.loads((CONFIGS / "slab-euler.json").read_text())
    data["mesh"]["box"]["cells"] = [3, 3, 6]
    data["output"]["dir"] = ""
    res = run(parse_config(data), write=False)
    assert res.summary["steps_accepted"] == 200 and res.summary["steps_rejected"] == 0
    assert all(r["dt"] == pytest.approx(1e-4) for r in res.records)


# -- compare ----------------------------------------------------------------------------

def test_compare_report(tmp_path):
    base = small_slab()
    cfgs = []
    for est in ("zero", "pod_fixed", "pod_rolling"):
        d = copy.deepcopy(base)
        d["name"] = est
        d["estimator"] = {"mode": est, "params": {"snapshots": 4, "rank": 2} if est == "pod_fixed"
                          else ({"capacity": 4, "rank": 2} if est == "pod_rolling" else {})}
        cfgs.append(parse_config(d))
    d = copy.deepcopy(base)
    d["name"] = "implicit"
    d["integrator"]["method"] = "sdirk32"
    cfgs.append(parse_config(d))
    cmp = compare(cfgs, tmp_path)
    assert len(cmp.rows) == 4
    assert any("POD ordering" in n for n in cmp.notes)
    assert any("SDIRK/RKC per step" in n for n in cmp.notes)
    rows = {r["name"]: r for r in cmp.rows}
    assert rows["zero"]["precond_setups"] == 1
    assert rows["implicit"]["precond_setups"] >= rows["implicit"]["steps_accepted"]
    assert (tmp_path / "comparison.csv").exists() and (tmp_path / "comparison.txt").exists()
    assert "pcg_iterations" in cmp.table()


def test_compare_flags_inversion():
    from eqsim.runner import Comparison  # noqa: F401  (report object)
    base = small_slab()
    cfgs = []
    # a one-snapshot rolling window carries less information than the fixed basis
    for est, params in (("pod_fixed", {"snapshots": 6, "rank": 6}), ("pod_rolling", {"capacity": 1, "rank": 1})):
        d = copy.deepcopy(base)
        d["name"] = est
        d["estimator"] = {"mode": est, "params": params}
        cfgs.append(parse_config(d))
    cmp = compare(cfgs)
    fixed, rolling = (r["pcg_iterations"] for r in cmp.rows)
    flag = "INVERTED" if rolling >= fixed else "as expected"
    assert any(flag in n for n in cmp.notes)


def test_compare_needs_configs():
    with pytest.raises(ValueError):
        compare([])
