"""Lagrange P1/P2 finite elements on tetrahedra: dof maps, element matrices,
global CSR assembly with Dirichlet block elimination, and boundary-driven
right-hand sides.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, GeometryError
from .materials import MaterialModel, _eval_many
from .mesh import TetMesh

# local edge ordering of the P2 element, dofs 4..9
TET_EDGES = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]])

_QA = 0.5854101966249685
_QB = 0.1381966011250105
QUADRATURE = {
    1: (np.array([[0.25, 0.25, 0.25, 0.25]]), np.array([1.0])),
    2: (np.array([[_QA, _QB, _QB, _QB],
                  [_QB, _QA, _QB, _QB],
                  [_QB, _QB, _QA, _QB],
                  [_QB, _QB, _QB, _QA]]), np.full(4, 0.25)),
}


def n_local_dofs(order: int) -> int:
    return {1: 4, 2: 10}[order]


# --------------------------------------------------------------------------
# reference basis in barycentric coordinates

def barycentric_gradients(coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the four barycentric coordinates and the volume.

    ``coords`` has shape (..., 4, 3); returns grads (..., 4, 3) and vol (...).
    """
    coords = np.asarray(coords, dtype=float)
    jac = np.swapaxes(coords[..., 1:, :] - coords[..., :1, :], -1, -2)
    det = np.linalg.det(jac)
    scale = np.max(np.abs(jac), axis=(-1, -2)) ** 3
    if np.any(np.abs(det) <= 1e-14 * scale):
        raise GeometryError("degenerate tetrahedron")
    inv = np.linalg.inv(jac)
    grads = np.concatenate([-inv.sum(axis=-2, keepdims=True), inv], axis=-2)
    return grads, np.abs(det) / 6.0


def shape_values(order: int, lam: np.ndarray) -> np.ndarray:
    """Basis values at barycentric points ``lam`` (..., 4) -> (..., nloc)."""
    lam = np.asarray(lam, dtype=float)
    if order == 1:
        return lam.copy()
    vert = lam * (2.0 * lam - 1.0)
    edge = 4.0 * lam[..., TET_EDGES[:, 0]] * lam[..., TET_EDGES[:, 1]]
    return np.concatenate([vert, edge], axis=-1)


def shape_gradients(order: int, bgrad: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Physical basis gradients.

    bgrad: (..., 4, 3) barycentric gradients of the element(s)
    lam: (4,) barycentric point
    returns (..., nloc, 3)
    """
    if order == 1:
        return bgrad.copy()
    lam = np.asarray(lam, dtype=float)
    vert = (4.0 * lam - 1.0)[:, None] * bgrad
    i, j = TET_EDGES[:, 0], TET_EDGES[:, 1]
    edge = 4.0 * (lam[i, None] * bgrad[..., j, :] + lam[j, None] * bgrad[..., i, :])
    return np.concatenate([vert, edge], axis=-2)


def element_matrices(coords, order: int, eps: float, kappa_eval) -> tuple[np.ndarray, np.ndarray]:
    """Local stiffness and mass-type matrices of one tetrahedron.

    Both are Laplacian forms: ``M_e = int eps grad N_i . grad N_j`` and
    ``K_e = int kappa grad N_i . grad N_j``, with ``kappa_eval`` one value per
    quadrature point (1 for order 1, 4 for order 2).
    """
    pts, w = QUADRATURE[order]
    bgrad, vol = barycentric_gradients(coords)
    kappa_eval = np.broadcast_to(np.asarray(kappa_eval, dtype=float), w.shape)
    nloc = n_local_dofs(order)
    K = np.zeros((nloc, nloc))
    Me = np.zeros((nloc, nloc))
    for q in range(len(w)):
        g = shape_gradients(order, bgrad, pts[q])
        gg = g @ g.T * (w[q] * vol)
        K += kappa_eval[q] * gg
        Me += eps * gg
    return K, Me


# --------------------------------------------------------------------------
# dof maps

@dataclass(frozen=True)
class DofMap:
    """Global numbering of P1/P2 dofs and their free/Dirichlet partition.

    ``fixed_set[k]`` is the index into ``set_names`` of Dirichlet dof ``fixed[k]``.
    """

    order: int
    cell_dofs: np.ndarray
    coords: np.ndarray
    edges: np.ndarray
    free: np.ndarray
    fixed: np.ndarray
    fixed_set: np.ndarray
    set_names: tuple[str, ...]

    @property
    def n_dofs(self) -> int:
        return self.coords.shape[0]

    @property
    def n_free(self) -> int:
        return self.free.shape[0]


def build_dofmap(mesh: TetMesh, order: int = 1, dirichlet_sets=None) -> DofMap:
    """Number vertex dofs first, then one dof per unique edge for order 2.

    All boundary sets of the mesh are Dirichlet unless ``dirichlet_sets``
    restricts them. An edge dof is Dirichlet when both endpoints belong to the
    same set.
    """
    if order not in (1, 2):
        raise ValueError(f"element order must be 1 or 2, got {order}")
    names = tuple(sorted(mesh.boundary_sets) if dirichlet_sets is None else dirichlet_sets)
    for name in names:
        if name not in mesh.boundary_sets:
            raise ConfigError(f"unknown boundary set {name!r}")

    nn = mesh.n_nodes
    node_set = np.full(nn, -1, dtype=np.int64)
    for k, name in enumerate(names):
        node_set[mesh.boundary_sets[name]] = k

    if order == 1:
        cell_dofs = mesh.tets.copy()
        coords = mesh.nodes.copy()
        edges = np.zeros((0, 2), dtype=np.int64)
        dof_set = node_set
    else:
        all_edges = np.sort(mesh.tets[:, TET_EDGES].reshape(-1, 2), axis=1)
        edges, inverse = np.unique(all_edges, axis=0, return_inverse=True)
        inverse = inverse.reshape(mesh.n_tets, 6)
        cell_dofs = np.concatenate([mesh.tets, nn + inverse], axis=1)
        coords = np.vstack([mesh.nodes, 0.5 * (mesh.nodes[edges[:, 0]] + mesh.nodes[edges[:, 1]])])
        a, b = node_set[edges[:, 0]], node_set[edges[:, 1]]
        edge_set = np.where((a == b) & (a >= 0), a, -1)
        dof_set = np.concatenate([node_set, edge_set])

    fixed = np.flatnonzero(dof_set >= 0)
    free = np.flatnonzero(dof_set < 0)
    arrays = [cell_dofs, coords, edges, free, fixed, dof_set[fixed]]
    for a in arrays:
        a.setflags(write=False)
    return DofMap(order, cell_dofs, coords, edges, free, fixed, dof_set[fixed], names)


# --------------------------------------------------------------------------
# element data and global assembly

@dataclass(frozen=True)
class ElementData:
    """Per-element quadrature data: basis gradients and weighted volumes.

    grads: (ne, nq, nloc, 3); wvol: (ne, nq) = quadrature weight * volume.
    """

    grads: np.ndarray
    wvol: np.ndarray
    volume: np.ndarray

    @classmethod
    def build(cls, mesh: TetMesh, order: int) -> "ElementData":
        pts, w = QUADRATURE[order]
        bgrad, vol = barycentric_gradients(mesh.nodes[mesh.tets])
        grads = np.stack([shape_gradients(order, bgrad, p) for p in pts], axis=1)
        return cls(np.ascontiguousarray(grads), np.outer(vol, w), vol)

    def field_gradient(self, cell_dofs: np.ndarray, x_full: np.ndarray) -> np.ndarray:
        """grad phi at every quadrature point, shape (ne, nq, 3)."""
        return np.einsum("eqid,ei->eqd", self.grads, x_full[cell_dofs])

    def field_magnitude(self, cell_dofs: np.ndarray, x_full: np.ndarray) -> np.ndarray:
        """|grad phi| at every quadrature point, shape (ne, nq)."""
        g = self.field_gradient(cell_dofs, x_full)
        return np.sqrt(np.einsum("eqd,eqd->eq", g, g))

    def tangent_matrices(self, kappa: np.ndarray, dkappa: np.ndarray, g: np.ndarray) -> np.ndarray:
        """Local Jacobians of ``x -> K(x) x``.

        ``kappa`` and ``dkappa = dkappa/dE`` per (element, qp), ``g`` the field
        gradient. The extra term is ``kappa'(E)/E (g.grad N_i)(g.grad N_j)``.
        """
        e = np.sqrt(np.einsum("eqd,eqd->eq", g, g))
        ratio = np.divide(dkappa, e, out=np.zeros_like(e), where=e > 0)
        proj = np.einsum("eqid,eqd->eqi", self.grads, g)
        return self.local_matrices(kappa) + np.einsum("eqi,eqj,eq->eij", proj, proj, ratio * self.wvol)

    def local_matrices(self, coeff: np.ndarray) -> np.ndarray:
        """Batched local Laplacian matrices for a coefficient per (element, qp)."""
        coeff = np.asarray(coeff, dtype=float)
        if coeff.ndim:
            coeff = coeff.reshape(self.wvol.shape[0], -1)
        coeff = np.broadcast_to(coeff, self.wvol.shape)
        return np.einsum("eqid,eqjd,eq->eij", self.grads, self.grads, coeff * self.wvol)


class AssemblyPlan:
    """Sparsity pattern of the global matrix plus the scatter slot of every
    local entry, so repeated assembly is a single ordered reduction.
    """

    def __init__(self, cell_dofs: np.ndarray, n_dofs: int):
        ne, nloc = cell_dofs.shape
        rows = np.repeat(cell_dofs, nloc, axis=1).ravel()
        cols = np.tile(cell_dofs, (1, nloc)).ravel()
        keys, self.slot = np.unique(rows * n_dofs + cols, return_inverse=True)
        self.slot = self.slot.ravel()
        self.n = n_dofs
        self.row = keys // n_dofs
        self.col = keys % n_dofs
        self.indptr = np.concatenate([[0], np.cumsum(np.bincount(self.row, minlength=n_dofs))])
        self.nnz = keys.size

    def assemble(self, local: np.ndarray) -> sp.csr_matrix:
        data = np.bincount(self.slot, weights=local.ravel(), minlength=self.nnz)
        return sp.csr_matrix((data, self.col.copy(), self.indptr.copy()), shape=(self.n, self.n))


class BlockExtractor:
    """Fast free/fixed block extraction for matrices on a fixed pattern."""

    def __init__(self, plan: AssemblyPlan, free: np.ndarray, fixed: np.ndarray):
        pos = np.full(plan.n, -1)
        pos[free] = np.arange(free.size)
        fpos = np.full(plan.n, -1)
        fpos[fixed] = np.arange(fixed.size)
        r_free = pos[plan.row] >= 0
        self._ii = np.flatnonzero(r_free & (pos[plan.col] >= 0))
        self._ib = np.flatnonzero(r_free & (fpos[plan.col] >= 0))
        self._shape_ii = (free.size, free.size)
        self._shape_ib = (free.size, fixed.size)
        self._cols_ii = pos[plan.col[self._ii]]
        self._cols_ib = fpos[plan.col[self._ib]]
        self._ptr_ii = np.concatenate([[0], np.cumsum(np.bincount(pos[plan.row[self._ii]], minlength=free.size))])
        self._ptr_ib = np.concatenate([[0], np.cumsum(np.bincount(pos[plan.row[self._ib]], minlength=free.size))])

    def split(self, A: sp.csr_matrix) -> tuple[sp.csr_matrix, sp.csr_matrix]:
        d = A.data
        A_ii = sp.csr_matrix((d[self._ii], self._cols_ii, self._ptr_ii), shape=self._shape_ii)
        A_ib = sp.csr_matrix((d[self._ib], self._cols_ib, self._ptr_ib), shape=self._shape_ib)
        return A_ii, A_ib


def material_arrays(mesh: TetMesh, materials: Mapping[int, MaterialModel]):
    """Per-tet permittivity (F/m) and compiled conductivity-law parameters."""
    missing = set(np.unique(mesh.region_id).tolist()) - set(materials)
    if missing:
        raise ConfigError(f"no material given for region(s) {sorted(missing)}")
    regions = np.unique(mesh.region_id)
    lookup = np.searchsorted(regions, mesh.region_id)
    eps = np.array([materials[int(r)].eps for r in regions])[lookup]
    laws = np.array([materials[int(r)].law_params() for r in regions])[lookup]
    return eps, np.ascontiguousarray(laws)


def kappa_field(laws: np.ndarray, e_mag: np.ndarray, deriv: bool = False) -> np.ndarray:
    """Conductivity (or its field derivative) per (element, qp) from the per-tet law rows."""
    out = np.empty_like(e_mag)
    for kind in np.unique(laws, axis=0):
        sel = np.all(laws == kind, axis=1)
        vals = np.ascontiguousarray(e_mag[sel].ravel())
        buf = np.empty_like(vals)
        _eval_many(kind, vals, buf, deriv)
        out[sel] = buf.reshape(-1, e_mag.shape[1])
    return out


def assemble_matrix(mesh: TetMesh, dofmap: DofMap, coefficient, *, plan: AssemblyPlan | None = None,
                    element_data: ElementData | None = None) -> sp.csr_matrix:
    """Global Laplacian-form matrix for a coefficient per tet or per quadrature point.

    Pass the permittivity field for M, or a frozen conductivity field for K(x).
    """
    element_data = element_data or ElementData.build(mesh, dofmap.order)
    plan = plan or AssemblyPlan(dofmap.cell_dofs, dofmap.n_dofs)
    return plan.assemble(element_data.local_matrices(coefficient))


# --------------------------------------------------------------------------
# boundary excitation

@dataclass(frozen=True)
class Sinusoid:
    amplitude: float
    frequency: float
    phase: float = 0.0

    def value(self, t):
        return self.amplitude * np.sin(2 * math.pi * self.frequency * t + self.phase)

    def rate(self, t):
        w = 2 * math.pi * self.frequency
        return self.amplitude * w * np.cos(w * t + self.phase)


@dataclass(frozen=True)
class Ramp:
    """Linear rise from 0 to ``amplitude`` over ``rise_time``, then constant."""

    amplitude: float
    rise_time: float

    def value(self, t):
        return self.amplitude * np.clip(t / self.rise_time, 0.0, 1.0)

    def rate(self, t):
        return np.where((t >= 0) & (t < self.rise_time), self.amplitude / self.rise_time, 0.0) + 0.0


@dataclass(frozen=True)
class Dc:
    level: float = 0.0

    def value(self, t):
        return self.level + 0.0 * np.asarray(t)

    def rate(self, t):
        return 0.0 * np.asarray(t)


@dataclass(frozen=True)
class BoundaryExcitation:
    """Waveform per named Dirichlet set; unlisted sets are held at 0 V."""

    waveforms: Mapping[str, object] = field(default_factory=dict)

    def check(self, dofmap: DofMap) -> None:
        for name in self.waveforms:
            if name not in dofmap.set_names:
                raise ConfigError(f"excitation given for unknown boundary set {name!r}")

    def _per_set(self, dofmap, t, attr):
        vals = np.zeros(len(dofmap.set_names))
        for k, name in enumerate(dofmap.set_names):
            w = self.waveforms.get(name)
            if w is not None:
                vals[k] = float(getattr(w, attr)(t))
        return vals

    def dirichlet_values(self, dofmap: DofMap, t: float) -> np.ndarray:
        self.check(dofmap)
        return self._per_set(dofmap, t, "value")[dofmap.fixed_set]

    def dirichlet_rates(self, dofmap: DofMap, t: float) -> np.ndarray:
        self.check(dofmap)
        return self._per_set(dofmap, t, "rate")[dofmap.fixed_set]

    def scale(self) -> float:
        """Largest drive amplitude, used as the voltage scale of error norms."""
        amps = [abs(getattr(w, "amplitude", getattr(w, "level", 0.0))) for w in self.waveforms.values()]
        return max(amps, default=0.0)


def build_rhs(t: float, excitation: BoundaryExcitation, M: sp.csr_matrix, K_frozen: sp.csr_matrix,
              dofmap: DofMap) -> np.ndarray:
    """Free-dof source vector ``b(t) = -K_IB x_B(t) - M_IB xdot_B(t)``."""
    xb = excitation.dirichlet_values(dofmap, t)
    vb = excitation.dirichlet_rates(dofmap, t)
    rows = M[dofmap.free]
    b = -(rows[:, dofmap.fixed] @ vb)
    if K_frozen is not None:
        b -= K_frozen[dofmap.free][:, dofmap.fixed] @ xb
    return b


# --------------------------------------------------------------------------
# point evaluation

class PointLocator:
    """Brute-force containing-tet search with cached barycentric weights."""

    def __init__(self, mesh: TetMesh, dofmap: DofMap, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        nodes = mesh.nodes[mesh.tets]
        bgrad, _ = barycentric_gradients(nodes)
        tol = 1e-10
        self.cells = np.empty(len(points), dtype=np.int64)
        self.weights = np.empty((len(points), n_local_dofs(dofmap.order)))
        for k, p in enumerate(points):
            lam123 = np.einsum("eid,ed->ei", bgrad[:, 1:], p - nodes[:, 0])
            lam = np.column_stack([1.0 - lam123.sum(axis=1), lam123])
            inside = np.flatnonzero(lam.min(axis=1) >= -tol)
            if inside.size == 0:
                raise ConfigError(f"probe point {p.tolist()} lies outside the mesh")
            e = inside[0]
            self.cells[k] = e
            self.weights[k] = shape_values(dofmap.order, np.clip(lam[e], 0.0, 1.0))
        self._dofs = dofmap.cell_dofs[self.cells]

    def __call__(self, x_full: np.ndarray) -> np.ndarray:
        return np.einsum("pi,pi->p", self.weights, x_full[self._dofs])
