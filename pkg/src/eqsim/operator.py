"""Fused assembly + matrix-vector product for the nonlinear conductivity operator.

Each element forms its local K_e(x) in a small worker-local buffer, multiplies
it with the gathered entries of v and scatters the result into y. No global
matrix is ever built. Scatter conflicts are avoided by element coloring: tets
of one color share no dof, so a color can be split across threads freely and
the accumulation order per dof is fixed by the color order alone.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from typing import Mapping

import numpy as np
from numba import njit

from .fem import DofMap, ElementData, material_arrays, n_local_dofs
from .materials import MaterialModel, law_kappa
from .mesh import TetMesh


@njit(cache=True, nogil=True)
def _element_kernel(elems, dofs, grads, wvol, laws, x, v, y):
    nloc = dofs.shape[1]
    nq = grads.shape[1]
    Ke = np.empty((nloc, nloc))
    for idx in range(elems.size):
        e = elems[idx]
        Ke[:, :] = 0.0
        for q in range(nq):
            gx = 0.0
            gy = 0.0
            gz = 0.0
            for i in range(nloc):
                xi = x[dofs[e, i]]
                gx += xi * grads[e, q, i, 0]
                gy += xi * grads[e, q, i, 1]
                gz += xi * grads[e, q, i, 2]
            w = law_kappa(laws[e], math.sqrt(gx * gx + gy * gy + gz * gz)) * wvol[e, q]
            for i in range(nloc):
                for j in range(i, nloc):
                    Ke[i, j] += w * (grads[e, q, i, 0] * grads[e, q, j, 0]
                                     + grads[e, q, i, 1] * grads[e, q, j, 1]
                                     + grads[e, q, i, 2] * grads[e, q, j, 2])
        for i in range(nloc):
            s = 0.0
            for j in range(nloc):
                kij = Ke[i, j] if j >= i else Ke[j, i]
                s += kij * v[dofs[e, j]]
            y[dofs[e, i]] += s


@njit(cache=True)
def _greedy_coloring(cell_dofs, dof_ptr, dof_elems):
    ne, nloc = cell_dofs.shape
    color = -np.ones(ne, dtype=np.int64)
    mark = -np.ones(ne + 1, dtype=np.int64)
    for e in range(ne):
        for i in range(nloc):
            d = cell_dofs[e, i]
            for k in range(dof_ptr[d], dof_ptr[d + 1]):
                c = color[dof_elems[k]]
                if c >= 0:
                    mark[c] = e
        c = 0
        while mark[c] == e:
            c += 1
        color[e] = c
    return color


def color_elements(cell_dofs: np.ndarray, n_dofs: int) -> list[np.ndarray]:
    """Greedy coloring: returns element-id arrays, one per color, no shared dofs within a color."""
    flat = cell_dofs.ravel()
    order = np.argsort(flat, kind="stable")
    dof_elems = (order // cell_dofs.shape[1]).astype(np.int64)
    dof_ptr = np.concatenate([[0], np.cumsum(np.bincount(flat, minlength=n_dofs))]).astype(np.int64)
    color = _greedy_coloring(np.ascontiguousarray(cell_dofs, dtype=np.int64), dof_ptr, dof_elems)
    return [np.flatnonzero(color == c) for c in range(color.max() + 1)]


class MatrixFreeStiffness:
    """Applies ``K(x_state) @ v`` element by element without forming ``K``.

    Parameters
    ----------
    workers : int
        Number of threads. Results are bit-identical for any worker count with
        ``scatter="coloring"``.
    scatter : {"coloring", "private"}
        ``"private"`` gives each worker its own output buffer over a contiguous
        slice of elements, reduced in worker order afterwards; used as a
        cross-check of the coloring path.
    """

    def __init__(self, mesh: TetMesh, dofmap: DofMap, materials: Mapping[int, MaterialModel],
                 workers: int = 1, scatter: str = "coloring", element_data: ElementData | None = None):
        if scatter not in ("coloring", "private"):
            raise ValueError(f"unknown scatter strategy {scatter!r}")
        ed = element_data or ElementData.build(mesh, dofmap.order)
        self.dofmap = dofmap
        self.n_dofs = dofmap.n_dofs
        self.dofs = np.ascontiguousarray(dofmap.cell_dofs, dtype=np.int64)
        self.grads = ed.grads
        self.wvol = np.ascontiguousarray(ed.wvol)
        _, self.laws = material_arrays(mesh, materials)
        self.workers = max(1, int(workers))
        self.scatter = scatter
        self.colors = color_elements(self.dofs, self.n_dofs)
        self._color_order = np.concatenate(self.colors)
        self._pool = ThreadPoolExecutor(self.workers) if self.workers > 1 else None
        nloc = n_local_dofs(dofmap.order)
        self.stats = {"calls": 0, "global_matrices": 0,
                      "local_floats_peak": self.workers * nloc * nloc}

    def __del__(self):
        if getattr(self, "_pool", None) is not None:
            self._pool.shutdown(wait=False)

    def _run(self, elems, x, v, y):
        _element_kernel(elems, self.dofs, self.grads, self.wvol, self.laws, x, v, y)

    def apply(self, x_state: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Full-dof ``y = K(x_state) v``; both inputs are full-dof vectors."""
        x_state = np.ascontiguousarray(x_state, dtype=float)
        v = np.ascontiguousarray(v, dtype=float)
        if x_state.shape != (self.n_dofs,) or v.shape != (self.n_dofs,):
            raise ValueError(f"expected vectors of length {self.n_dofs}, got {x_state.shape} and {v.shape}")
        self.stats["calls"] += 1
        y = np.zeros(self.n_dofs)
        if self.scatter == "private":
            chunks = np.array_split(np.arange(self.dofs.shape[0]), self.workers)
            bufs = [np.zeros(self.n_dofs) for _ in chunks]
            if self._pool is None:
                self._run(chunks[0], x_state, v, bufs[0])
            else:
                list(self._pool.map(lambda cb: self._run(cb[0], x_state, v, cb[1]), zip(chunks, bufs)))
            for b in bufs:
                y += b
            return y
        if self._pool is None:
            self._run(self._color_order, x_state, v, y)
            return y
        for elems in self.colors:
            parts = np.array_split(elems, self.workers)
            list(self._pool.map(lambda p: self._run(p, x_state, v, y), parts))
        return y

    def residual(self, x_state: np.ndarray, b_t: np.ndarray) -> np.ndarray:
        """Free-dof ``b_t - (K(x) x)_I``.

        ``x_state`` carries the Dirichlet values, so the ``K_IB x_B`` coupling is
        produced by the same element kernel; ``b_t`` holds only the remaining
        source terms (the capacitive lift ``-M_IB xdot_B``).
        """
        y = self.apply(x_state, x_state)
        return b_t - y[self.dofmap.free]


def matfree_apply(mesh, dofmap, materials, x_state, v, workers: int = 1) -> np.ndarray:
    return MatrixFreeStiffness(mesh, dofmap, materials, workers).apply(x_state, v)


def matfree_residual(mesh, dofmap, materials, x_state, b_t, workers: int = 1) -> np.ndarray:
    return MatrixFreeStiffness(mesh, dofmap, materials, workers).residual(x_state, b_t)
