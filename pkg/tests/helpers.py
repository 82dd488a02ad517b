"""Shared scenario builders and independent oracles for the test suite."""

import numpy as np
from scipy.integrate import solve_ivp

from eqsim.fem import BoundaryExcitation, Sinusoid
from eqsim.materials import EPS0, Constant, MaterialModel, Microvaristor
from eqsim.mesh import generate_box_mesh
from eqsim.system import EqsSystem

D = 1e-3  # layer thickness, m
SLAB_LAYERS = {1: (4.0, 2e-9), 2: (2.0, 1e-8)}  # eps_r, kappa: bottom and top


def slab_mesh(n=2, nz=None):
    return generate_box_mesh(n, n, nz or 2 * n, D, D, 2 * D, layer_splits=(D,), regions=(1, 2))


def slab_materials():
    return {r: MaterialModel(er, Constant(k)) for r, (er, k) in SLAB_LAYERS.items()}


def slab_system(n=2, order=1, amplitude=1000.0, freq=50.0, nz=None, **kw):
    exc = BoundaryExcitation({"hv": Sinusoid(amplitude, freq)})
    return EqsSystem(slab_mesh(n, nz), order, slab_materials(), exc, **kw)


def varistor_system(n=2, nz=12, order=1, amplitude=4000.0, **kw):
    mesh = generate_box_mesh(n, n, nz, D, D, 3 * D, layer_splits=(D, 2 * D), regions=(1, 2, 3))
    mats = {1: MaterialModel(4.0, Constant(1e-10)),
            2: MaterialModel(10.0, Microvaristor(1e-10, 1e-4, 5e5, 5e4)),
            3: MaterialModel(4.0, Constant(1e-10))}
    return EqsSystem(mesh, order, mats, BoundaryExcitation({"hv": Sinusoid(amplitude, 50.0)}), **kw)


def rc_divider(times, amplitude=1000.0, freq=50.0, phi0=0.0):
    """Interface potential of the two-layer slab from its lumped RC circuit.

    (c1 + c2) phi' + (g1 + g2) phi = c2 u' + g2 u, with u = A sin(w t), solved
    in closed form (steady-state phasor plus decaying homogeneous part).
    """
    (e1, k1), (e2, k2) = SLAB_LAYERS[1], SLAB_LAYERS[2]
    c1, c2 = e1 * EPS0 / D, e2 * EPS0 / D
    g1, g2 = k1 / D, k2 / D
    w = 2 * np.pi * freq
    C, G = c1 + c2, g1 + g2
    # particular solution a sin + b cos
    den = G * G + (w * C) ** 2
    a = amplitude * (g2 * G + c2 * C * w * w) / den
    b = amplitude * w * (c2 * G - g2 * C) / den
    t = np.asarray(times, dtype=float)
    return a * np.sin(w * t) + b * np.cos(w * t) + (phi0 - b) * np.exp(-G / C * t)


def dense_reference(system, t_end, x0, rtol=1e-13, atol=1e-10):
    """High-accuracy trajectory of a linear system from the assembled matrices."""
    K = system.assemble_stiffness(np.zeros(system.dofmap.n_dofs))
    K_II, K_IB = system.blocks.split(K)
    Minv = np.linalg.inv(system.M_II.toarray())
    K_II = K_II.toarray()

    def f(t, x):
        return Minv @ (system.lift(t) - K_IB @ system.x_boundary(t) - K_II @ x)

    return solve_ivp(f, (0.0, t_end), x0, method="DOP853", rtol=rtol, atol=atol, dense_output=True)
