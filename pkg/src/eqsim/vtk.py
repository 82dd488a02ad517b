"""Legacy ASCII VTK (version 2.0) unstructured-grid snapshots."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .mesh import TetMesh

VTK_TETRA = 10


def write_vtk(path, mesh: TetMesh, potential: np.ndarray, kappa: np.ndarray, title: str = "eqsim") -> None:
    """Write vertex potentials as POINT_DATA "potential" and per-cell conductivity
    as CELL_DATA "kappa". For order-2 fields pass only the vertex values.
    """
    potential = np.asarray(potential, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    if potential.shape != (mesh.n_nodes,):
        raise ValueError(f"potential must have {mesh.n_nodes} entries, got {potential.shape}")
    if kappa.shape != (mesh.n_tets,):
        raise ValueError(f"kappa must have {mesh.n_tets} entries, got {kappa.shape}")
    lines = ["# vtk DataFile Version 2.0", title.replace("\n", " ")[:255], "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {mesh.n_nodes} double"]
    lines += [f"{x!r} {y!r} {z!r}" for x, y, z in mesh.nodes.tolist()]
    lines.append(f"CELLS {mesh.n_tets} {5 * mesh.n_tets}")
    lines += [f"4 {a} {b} {c} {d}" for a, b, c, d in mesh.tets.tolist()]
    lines.append(f"CELL_TYPES {mesh.n_tets}")
    lines += [str(VTK_TETRA)] * mesh.n_tets
    lines += [f"POINT_DATA {mesh.n_nodes}", "SCALARS potential double 1", "LOOKUP_TABLE default"]
    lines += [repr(v) for v in potential.tolist()]
    lines += [f"CELL_DATA {mesh.n_tets}", "SCALARS kappa double 1", "LOOKUP_TABLE default"]
    lines += [repr(v) for v in kappa.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_vtk_scalars(path) -> dict[str, np.ndarray]:
    """Minimal reader for files produced by :func:`write_vtk` (used in tests and tooling)."""
    tokens = Path(path).read_text().split("\n")
    out = {}
    i = 0
    while i < len(tokens):
        line = tokens[i].strip()
        if line.startswith(("POINT_DATA", "CELL_DATA")):
            count = int(line.split()[1])
            name = tokens[i + 1].split()[1]
            out[name] = np.array([float(v) for v in tokens[i + 3:i + 3 + count]])
            i += 3 + count
            continue
        i += 1
    return out
