"""JSON scenario configuration.

A config is one JSON object::

    {
      "name": "slab-rkc",
      "mesh": {"box": {"cells": [10, 10, 20], "size": [1e-3, 1e-3, 2e-3],
                       "layer_splits": [1e-3], "regions": [1, 2]}},
      "order": 1,
      "materials": {"1": {"eps_r": 4.0, "conductivity": {"type": "constant", "kappa": 2e-9}}},
      "excitation": {"hv": {"type": "sinusoid", "amplitude": 1000.0, "frequency": 50.0}},
      "integrator": {"method": "rkc", "tol": 1e-2, "t_end": 0.02, "dt0": 1e-5},
      "solver": {"preconditioner": "amg", "rel_tol": 1e-12, "max_iter": 2000},
      "estimator": {"mode": "spe", "params": {"window": 8}},
      "probes": [[5e-4, 5e-4, 1e-3]],
      "output": {"dir": "out/slab-rkc", "snapshot_every": 0},
      "workers": 1
    }

``mesh`` may instead be ``{"file": "path.msh"}`` (relative to the config file).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError, EqsimError
from .fem import BoundaryExcitation, Dc, Ramp, Sinusoid
from .materials import Constant, MaterialModel, Microvaristor
from .mesh import TetMesh, generate_box_mesh, load_msh
from .start_vector import MODES

METHODS = ("euler", "rkc", "sdirk32")
PRECONDITIONERS = ("amg", "jacobi", "sgs", "ssor", "none")


@dataclass
class IntegratorConfig:
    method: str = "rkc"
    tol: float = 1e-2
    t_end: float = 0.02
    dt0: float = 1e-5
    t0: float = 0.0
    adaptive: bool | None = None
    fixed_stages: int | None = None
    max_stages: int = 200
    max_rejections: int = 50
    rho_mode: str = "jacobian"
    newton: str = "full"
    initial: str = "electrostatic"


@dataclass
class SolverConfig:
    preconditioner: str = "amg"
    rel_tol: float = 1e-12
    max_iter: int = 2000
    params: dict = field(default_factory=dict)


@dataclass
class EstimatorConfig:
    mode: str = "zero"
    params: dict = field(default_factory=dict)


@dataclass
class OutputConfig:
    dir: str | None = None
    snapshot_every: int = 0


@dataclass
class SimConfig:
    name: str
    mesh: dict
    order: int
    materials: dict[int, MaterialModel]
    excitation: dict[str, Any]
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    probes: list = field(default_factory=list)
    output: OutputConfig = field(default_factory=OutputConfig)
    workers: int = 1
    base_dir: Path = field(default_factory=Path.cwd)
    raw: dict = field(default_factory=dict, repr=False)

    def build_mesh(self) -> TetMesh:
        try:
            if "file" in self.mesh:
                return load_msh(self.base_dir / self.mesh["file"])
            box = self.mesh["box"]
            cells = box["cells"]
            size = box.get("size", [1.0, 1.0, 1.0])
            return generate_box_mesh(*cells, *size, layer_splits=tuple(box.get("layer_splits", ())),
                                     regions=box.get("regions"))
        except (ValueError, TypeError, KeyError, OSError) as exc:
            raise ConfigError(f"cannot build mesh: {exc}") from exc

    def build_excitation(self) -> BoundaryExcitation:
        return BoundaryExcitation(dict(self.excitation))

    def physics_key(self) -> str:
        """Canonical text of everything that defines the physical problem."""
        physics = {k: self.raw.get(k) for k in ("mesh", "order", "materials", "excitation")}
        physics["t_end"] = self.integrator.t_end
        physics["t0"] = self.integrator.t0
        physics["initial"] = self.integrator.initial
        return json.dumps(physics, sort_keys=True)


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _positive(value, what: str) -> float:
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{what} must be a number, got {value!r}") from None
    _require(v > 0, f"{what} must be positive, got {value!r}")
    return v


def _material(entry: dict, where: str) -> MaterialModel:
    _require(isinstance(entry, dict), f"{where}: expected an object")
    cond = entry.get("conductivity", {"type": "constant", "kappa": 0.0})
    try:
        kind = cond.get("type", "constant")
        if kind == "constant":
            law = Constant(float(cond.get("kappa", 0.0)))
        elif kind == "microvaristor":
            law = Microvaristor(**{k: float(v) for k, v in cond.items() if k != "type"})
        else:
            raise ConfigError(f"{where}: unknown conductivity type {kind!r}")
        return MaterialModel(float(entry.get("eps_r", 1.0)), law)
    except (TypeError, ValueError, AttributeError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _waveform(entry: dict, where: str):
    _require(isinstance(entry, dict), f"{where}: expected an object")
    kind = entry.get("type", "sinusoid")
    args = {k: v for k, v in entry.items() if k != "type"}
    classes = {"sinusoid": Sinusoid, "ramp": Ramp, "dc": Dc}
    _require(kind in classes, f"{where}: unknown waveform {kind!r}")
    try:
        w = classes[kind](**{k: float(v) for k, v in args.items()})
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    if kind == "sinusoid":
        _positive(w.frequency, f"{where}.frequency")
    if kind == "ramp":
        _positive(w.rise_time, f"{where}.rise_time")
    return w


def _section(cls, data, where: str):
    data = data or {}
    _require(isinstance(data, dict), f"{where}: expected an object")
    names = cls.__dataclass_fields__
    unknown = set(data) - set(names)
    _require(not unknown, f"{where}: unknown keys {sorted(unknown)}")
    return cls(**data)


def parse_config(data: dict, base_dir: Path | str | None = None) -> SimConfig:
    """Validate a decoded JSON document; raises ConfigError with a readable message."""
    _require(isinstance(data, dict), "config must be a JSON object")
    known = {"name", "mesh", "order", "materials", "excitation", "integrator", "solver", "estimator",
             "probes", "output", "workers"}
    unknown = set(data) - known
    _require(not unknown, f"unknown top-level keys {sorted(unknown)}")
    for key in ("mesh", "materials", "excitation"):
        _require(key in data, f"missing required key {key!r}")

    mesh = data["mesh"]
    _require(isinstance(mesh, dict) and (("file" in mesh) ^ ("box" in mesh)),
             "mesh must contain exactly one of 'file' or 'box'")
    if "box" in mesh:
        box = mesh["box"]
        _require(isinstance(box, dict) and "cells" in box and len(box["cells"]) == 3,
                 "mesh.box.cells must be three integers")

    order = data.get("order", 1)
    _require(order in (1, 2), f"order must be 1 or 2, got {order!r}")

    mats = data["materials"]
    _require(isinstance(mats, dict) and mats, "materials must be a non-empty object")
    materials = {}
    for key, entry in mats.items():
        try:
            rid = int(key)
        except ValueError:
            raise ConfigError(f"material key {key!r} is not an integer region id") from None
        materials[rid] = _material(entry, f"materials[{key}]")

    exc = data["excitation"]
    _require(isinstance(exc, dict), "excitation must be an object")
    excitation = {name: _waveform(entry, f"excitation[{name}]") for name, entry in exc.items()}

    integ = _section(IntegratorConfig, data.get("integrator"), "integrator")
    _require(integ.method in METHODS, f"integrator.method must be one of {METHODS}")
    _positive(integ.tol, "integrator.tol")
    _positive(integ.dt0, "integrator.dt0")
    _require(float(integ.t_end) > float(integ.t0), "integrator.t_end must exceed t0")
    _require(integ.initial in ("electrostatic", "zero"), "integrator.initial must be 'electrostatic' or 'zero'")
    _require(integ.rho_mode in ("jacobian", "secant"), "integrator.rho_mode must be 'jacobian' or 'secant'")
    _require(integ.newton in ("full", "picard"), "integrator.newton must be 'full' or 'picard'")
    _require(integ.fixed_stages is None or int(integ.fixed_stages) >= 2, "integrator.fixed_stages must be >= 2")

    solver = _section(SolverConfig, data.get("solver"), "solver")
    _require(solver.preconditioner in PRECONDITIONERS, f"solver.preconditioner must be one of {PRECONDITIONERS}")
    _positive(solver.rel_tol, "solver.rel_tol")
    _require(int(solver.max_iter) >= 1, "solver.max_iter must be >= 1")

    est = _section(EstimatorConfig, data.get("estimator"), "estimator")
    _require(est.mode in MODES, f"estimator.mode must be one of {MODES}")

    probes = data.get("probes", [])
    _require(isinstance(probes, list) and all(isinstance(p, list) and len(p) == 3 for p in probes),
             "probes must be a list of [x, y, z] points")

    output = _section(OutputConfig, data.get("output"), "output")
    workers = data.get("workers", 1)
    _require(isinstance(workers, int) and workers >= 1, "workers must be a positive integer")

    cfg = SimConfig(name=str(data.get("name", "run")), mesh=mesh, order=order, materials=materials,
                    excitation=excitation, integrator=integ, solver=solver, estimator=est,
                    probes=[[float(v) for v in p] for p in probes], output=output, workers=workers,
                    base_dir=Path(base_dir) if base_dir is not None else Path.cwd(), raw=data)
    return cfg


def check_against_mesh(cfg: SimConfig, mesh: TetMesh) -> None:
    """Region ids and boundary names referenced by the config must exist."""
    present = set(int(r) for r in set(mesh.region_id.tolist()))
    missing = present - set(cfg.materials)
    _require(not missing, f"no material given for mesh regions {sorted(missing)}")
    extra = set(cfg.materials) - present
    _require(not extra, f"materials given for regions not in the mesh: {sorted(extra)}")
    names = set(mesh.boundary_sets)
    unknown = set(cfg.excitation) - names
    _require(not unknown, f"excitation for unknown boundary sets {sorted(unknown)}; mesh has {sorted(names)}")


def load_config(path) -> SimConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    try:
        return parse_config(data, path.parent)
    except EqsimError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
