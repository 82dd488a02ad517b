"""Electro-quasistatic transient field simulation on tetrahedral meshes with
matrix-free explicit (Runge-Kutta-Chebyshev) and implicit (SDIRK3(2)) time
stepping, AMG-preconditioned CG and start-vector estimators."""

from .errors import (ConfigError, EmptyMeshError, EqsimError, GeometryError, MeshParseError,
                     NumericalBreakdownError, StepFailure)
from .fem import BoundaryExcitation, Dc, Ramp, Sinusoid, assemble_matrix, build_dofmap
from .materials import EPS0, Constant, MaterialModel, Microvaristor, dkappa_dE, kappa_of_E
from .mesh import TetMesh, generate_box_mesh, load_msh, write_msh
from .operator import MatrixFreeStiffness, matfree_apply, matfree_residual
from .solvers import amg_setup, make_preconditioner, pcg_solve
from .start_vector import make_estimator
from .system import EqsSystem
from .integrators import Integrator

__version__ = "0.1.0"
