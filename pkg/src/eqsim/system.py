"""The semi-discrete EQS system ``M_II dx/dt = -M_IB xdot_B(t) - (K(x) x)_I``
on the free dofs, with instrumentation for every solve and setup.
"""

from __future__ import annotations

import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field, fields
from typing import Mapping

import numpy as np
import scipy.sparse as sp

from .errors import StepFailure
from .fem import (AssemblyPlan, BlockExtractor, BoundaryExcitation, ElementData, build_dofmap,
                  kappa_field, material_arrays)
from .materials import MaterialModel
from .mesh import TetMesh
from .operator import MatrixFreeStiffness
from .solvers import make_preconditioner, pcg_solve
from .start_vector import ZeroStart


@dataclass
class Counters:
    m_solves: int = 0
    spectral_solves: int = 0
    pcg_iterations: int = 0  # time-stepping solves only
    spectral_pcg_iterations: int = 0
    mass_precond_setups: int = 0
    step_precond_setups: int = 0
    newton_iterations: int = 0
    residual_evals: int = 0
    stiffness_assemblies: int = 0

    @property
    def precond_setups(self) -> int:
        return self.mass_precond_setups + self.step_precond_setups

    def snapshot(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class SolveRecord:
    purpose: str
    estimator: str
    rank: int
    iterations: int
    initial_residual: float
    residual: float


class EqsSystem:
    """Free-dof EQS system on a tetrahedral mesh.

    The mass matrix is assembled once; its preconditioner is built on first
    use and then reused for every solve. Stiffness contributions go through
    the fused element kernel, except on the implicit path, which assembles
    ``K(x)`` explicitly on purpose (it needs the matrix).
    """

    def __init__(self, mesh: TetMesh, order: int, materials: Mapping[int, MaterialModel],
                 excitation: BoundaryExcitation, *, preconditioner: str = "amg",
                 precond_params: dict | None = None, rel_tol: float = 1e-12, max_iter: int = 2000,
                 estimator=None, workers: int = 1):
        self.mesh = mesh
        self.materials = dict(materials)
        self.dofmap = build_dofmap(mesh, order)
        excitation.check(self.dofmap)
        self.excitation = excitation
        self.elements = ElementData.build(mesh, order)
        self.plan = AssemblyPlan(self.dofmap.cell_dofs, self.dofmap.n_dofs)
        self.blocks = BlockExtractor(self.plan, self.dofmap.free, self.dofmap.fixed)
        self.eps, self.laws = material_arrays(mesh, self.materials)
        self.M = self.plan.assemble(self.elements.local_matrices(self.eps))
        self.M_II, self.M_IB = self.blocks.split(self.M)
        self.op = MatrixFreeStiffness(mesh, self.dofmap, self.materials, workers, element_data=self.elements)
        self.preconditioner = preconditioner
        self.precond_params = dict(precond_params or {})
        self.rel_tol = rel_tol
        self.max_iter = max_iter
        self.estimator = estimator if estimator is not None else ZeroStart()
        self.counters = Counters()
        self.timers: dict[str, float] = defaultdict(float)
        self.solve_log: list[SolveRecord] = []
        self._mass_precond = None

    @property
    def n(self) -> int:
        return self.dofmap.n_free

    @contextmanager
    def timed(self, phase: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.timers[phase] += time.perf_counter() - t0

    # -- boundary data ------------------------------------------------------
    def x_boundary(self, t: float) -> np.ndarray:
        return self.excitation.dirichlet_values(self.dofmap, t)

    def xdot_boundary(self, t: float) -> np.ndarray:
        return self.excitation.dirichlet_rates(self.dofmap, t)

    def full(self, x_free: np.ndarray, t: float) -> np.ndarray:
        x = np.empty(self.dofmap.n_dofs)
        x[self.dofmap.free] = x_free
        x[self.dofmap.fixed] = self.x_boundary(t)
        return x

    def lift(self, t: float) -> np.ndarray:
        """Capacitive source ``-M_IB xdot_B(t)``."""
        return -(self.M_IB @ self.xdot_boundary(t))

    # -- mass solves --------------------------------------------------------
    @property
    def mass_precond(self):
        if self._mass_precond is None:
            with self.timed("precond_setup"):
                self._mass_precond = make_preconditioner(self.M_II, self.preconditioner, **self.precond_params)
            self.counters.mass_precond_setups += 1
        return self._mass_precond

    def solve_mass(self, rhs: np.ndarray, *, purpose: str = "stage", rel_tol: float | None = None,
                   use_estimator: bool = True) -> np.ndarray:
        precond = self.mass_precond
        est = self.estimator if use_estimator else None
        with self.timed("estimator"):
            x0 = est.next(self.M_II, rhs) if est is not None else None
        with self.timed("solve"):
            res = pcg_solve(self.M_II, precond, rhs, x0, rel_tol or self.rel_tol, self.max_iter)
        if purpose == "spectral":
            self.counters.spectral_solves += 1
            self.counters.spectral_pcg_iterations += res.iterations
        else:
            self.counters.m_solves += 1
            self.counters.pcg_iterations += res.iterations
        self.solve_log.append(SolveRecord(purpose, est.mode if est else "zero",
                                          est.stats.last_rank if est else 0,
                                          res.iterations, res.initial_residual, res.residual))
        if not res.converged:
            raise StepFailure(f"PCG did not converge in {res.iterations} iterations "
                              f"(relative residual {res.recurrence_residual:.3e})")
        if est is not None:
            with self.timed("estimator"):
                est.feedback(res.x, res.iterations)
        return res.x

    # -- explicit path ------------------------------------------------------
    def residual(self, t: float, x_free: np.ndarray) -> np.ndarray:
        """``b(t) - K(x) x`` on the free dofs via the fused kernel."""
        with self.timed("residual"):
            r = self.op.residual(self.full(x_free, t), self.lift(t))
        self.counters.residual_evals += 1
        return r

    def rate(self, t: float, x_free: np.ndarray) -> np.ndarray:
        """``M^-1 (b(t) - K(x) x)``: one residual evaluation and one mass solve."""
        return self.solve_mass(self.residual(t, x_free))

    def stiffness_times(self, t: float, x_free: np.ndarray, v_free: np.ndarray) -> np.ndarray:
        """``K_II(x) v`` with the conductivity frozen at state ``x``."""
        v = np.zeros(self.dofmap.n_dofs)
        v[self.dofmap.free] = v_free
        return self.op.apply(self.full(x_free, t), v)[self.dofmap.free]

    def jacobian_times(self, t: float, x_free: np.ndarray, v_free: np.ndarray,
                       base: np.ndarray | None = None) -> np.ndarray:
        """Directional derivative of ``x -> (K(x) x)_I`` along ``v`` by a forward difference.

        Includes the ``dkappa/dE`` term that ``stiffness_times`` leaves out, so
        it sees the differential (not the secant) conductivity.
        """
        xf = self.full(x_free, t)
        if base is None:
            base = self.op.apply(xf, xf)[self.dofmap.free]
        nv = np.linalg.norm(v_free)
        if nv == 0.0:
            return np.zeros_like(v_free)
        h = np.sqrt(np.finfo(float).eps) * (1.0 + np.linalg.norm(x_free)) / nv
        xp = xf.copy()
        xp[self.dofmap.free] += h * v_free
        return (self.op.apply(xp, xp)[self.dofmap.free] - base) / h

    # -- implicit path ------------------------------------------------------
    def kappa_at(self, x_full: np.ndarray) -> np.ndarray:
        return kappa_field(self.laws, self.elements.field_magnitude(self.dofmap.cell_dofs, x_full))

    def assemble_stiffness(self, x_full: np.ndarray) -> sp.csr_matrix:
        with self.timed("assembly"):
            K = self.plan.assemble(self.elements.local_matrices(self.kappa_at(x_full)))
        self.counters.stiffness_assemblies += 1
        return K

    def assemble_tangent(self, x_full: np.ndarray) -> tuple[sp.csr_matrix, sp.csr_matrix]:
        """``K(x)`` and the Jacobian of ``x -> K(x) x``, both on the full dof set."""
        with self.timed("assembly"):
            g = self.elements.field_gradient(self.dofmap.cell_dofs, x_full)
            e = np.sqrt(np.einsum("eqd,eqd->eq", g, g))
            kap = kappa_field(self.laws, e)
            K = self.plan.assemble(self.elements.local_matrices(kap))
            J = self.plan.assemble(self.elements.tangent_matrices(kap, kappa_field(self.laws, e, True), g))
        self.counters.stiffness_assemblies += 1
        return K, J

    def new_step_preconditioner(self, A):
        with self.timed("precond_setup"):
            P = make_preconditioner(A, self.preconditioner, **self.precond_params)
        self.counters.step_precond_setups += 1
        return P

    # -- misc ---------------------------------------------------------------
    def initial_state(self, t0: float, mode: str = "electrostatic") -> np.ndarray:
        """Zero potential, or the capacitive field ``M_II x = -M_IB x_B(t0)``."""
        if mode == "zero":
            return np.zeros(self.n)
        if mode != "electrostatic":
            raise ValueError(f"unknown initial condition {mode!r}")
        return self.solve_mass(-(self.M_IB @ self.x_boundary(t0)), purpose="initial", use_estimator=False)

    def cell_kappa(self, x_full: np.ndarray) -> np.ndarray:
        return self.kappa_at(x_full).mean(axis=1)
