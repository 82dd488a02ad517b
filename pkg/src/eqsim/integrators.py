"""Time integration of ``M dx/dt + K(x) x = b(t)``: explicit Euler, damped
second-order Runge-Kutta-Chebyshev with adaptive steps, and the implicit
SDIRK3(2) baseline with quasi-Newton stage solves.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NumericalBreakdownError, StepFailure
from .solvers import pcg_solve

log = logging.getLogger(__name__)

RKC_DAMPING = 2.0 / 13.0
RKC_BETA = 0.653  # real stability boundary ~ RKC_BETA * (s^2 - 1) for the damping above


# --------------------------------------------------------------------------
# Runge-Kutta-Chebyshev coefficients

@dataclass(frozen=True)
class RkcCoefficients:
    s: int
    w0: float
    w1: float
    b: np.ndarray
    a: np.ndarray
    mu: np.ndarray
    nu: np.ndarray
    mu_t: np.ndarray
    gamma_t: np.ndarray
    c: np.ndarray
    T: np.ndarray
    dT: np.ndarray
    d2T: np.ndarray


def chebyshev_at(s: int, w: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """T_j(w), T_j'(w), T_j''(w) for j = 0..s by the three-term recurrence."""
    T = np.zeros(s + 1)
    dT = np.zeros(s + 1)
    d2T = np.zeros(s + 1)
    T[0] = 1.0
    T[1], dT[1] = w, 1.0
    for j in range(2, s + 1):
        T[j] = 2 * w * T[j - 1] - T[j - 2]
        dT[j] = 2 * T[j - 1] + 2 * w * dT[j - 1] - dT[j - 2]
        d2T[j] = 4 * dT[j - 1] + 2 * w * d2T[j - 1] - d2T[j - 2]
    return T, dT, d2T


def rkc_coefficients(s: int, damping: float = RKC_DAMPING) -> RkcCoefficients:
    if s < 2:
        raise ValueError("RKC needs at least 2 stages")
    w0 = 1.0 + damping / s**2
    T, dT, d2T = chebyshev_at(s, w0)
    w1 = dT[s] / d2T[s]
    b = np.empty(s + 1)
    b[2:] = d2T[2:] / dT[2:] ** 2
    b[0] = b[1] = b[2]
    a = 1.0 - b * T
    mu = np.zeros(s + 1)
    nu = np.zeros(s + 1)
    mu_t = np.zeros(s + 1)
    gamma_t = np.zeros(s + 1)
    mu_t[1] = b[1] * w1
    for j in range(2, s + 1):
        mu[j] = 2 * b[j] * w0 / b[j - 1]
        nu[j] = -b[j] / b[j - 2]
        mu_t[j] = 2 * b[j] * w1 / b[j - 1]
        gamma_t[j] = -a[j - 1] * mu_t[j]
    # stage times from the recurrence applied to y' = 1
    c = np.zeros(s + 1)
    c[1] = mu_t[1]
    for j in range(2, s + 1):
        c[j] = mu[j] * c[j - 1] + nu[j] * c[j - 2] + mu_t[j] + gamma_t[j]
    return RkcCoefficients(s, w0, w1, b, a, mu, nu, mu_t, gamma_t, c, T, dT, d2T)


def rkc_stability_polynomial(s: int, z, damping: float = RKC_DAMPING):
    """Closed form ``a_s + b_s T_s(w0 + w1 z)``."""
    co = rkc_coefficients(s, damping)
    z = np.asarray(z, dtype=float)
    arg = co.w0 + co.w1 * z
    Ts = np.polynomial.chebyshev.chebval(arg, np.eye(s + 1)[s])
    return co.a[s] + co.b[s] * Ts


def rkc_stages_for(dt_rho: float) -> int:
    """Smallest s >= 2 whose stability interval covers ``dt * rho``.

    The damped boundary is ``RKC_BETA * (s^2 - 1)``; the bare ``RKC_BETA * s^2``
    overshoots it and is not safe for small s.
    """
    s = max(2, math.ceil(math.sqrt(1.0 + dt_rho / RKC_BETA)))
    while RKC_BETA * (s * s - 1) < dt_rho:
        s += 1
    return s


def rkc_advance(f: Callable, t: float, y0: np.ndarray, dt: float, s: int, f0=None,
                coeffs: RkcCoefficients | None = None) -> np.ndarray:
    """One s-stage RKC step for ``y' = f(t, y)``; returns ``Y_s``."""
    co = coeffs if coeffs is not None and coeffs.s == s else rkc_coefficients(s)
    if f0 is None:
        f0 = f(t, y0)
    y_jm2 = y0
    y_jm1 = y0 + co.mu_t[1] * dt * f0
    for j in range(2, s + 1):
        fj = f(t + co.c[j - 1] * dt, y_jm1)
        y_j = ((1.0 - co.mu[j] - co.nu[j]) * y0 + co.mu[j] * y_jm1 + co.nu[j] * y_jm2
               + co.mu_t[j] * dt * fj + co.gamma_t[j] * dt * f0)
        y_jm2, y_jm1 = y_jm1, y_j
    return y_jm1


def rkc_error_estimate(y0, y1, dt, f0, f1):
    return 0.8 * (y0 - y1) + 0.4 * dt * (f0 + f1)


def euler_advance(f: Callable, t: float, y: np.ndarray, dt: float) -> np.ndarray:
    """Forward Euler with the source evaluated at the new time level."""
    return y + dt * f(t + dt, y)


# --------------------------------------------------------------------------
# SDIRK3(2)

def _sdirk_tableau():
    # gamma: root of g^3 - 3 g^2 + 3/2 g - 1/6 in (1/6, 1/2)
    g = 0.435866521508459
    for _ in range(3):
        g -= (g**3 - 3 * g**2 + 1.5 * g - 1 / 6) / (3 * g**2 - 6 * g + 1.5)
    c = np.array([g, (1 + g) / 2, 1.0])
    b1 = -1.5 * g**2 + 4 * g - 0.25
    b2 = 1.5 * g**2 - 5 * g + 1.25
    A = np.array([[g, 0, 0], [(1 - g) / 2, g, 0], [b1, b2, g]])
    b = A[2].copy()
    # embedded order 2: bh1 + bh2 = 1, bh1 c1 + bh2 c2 = 1/2, bh3 = 0
    bh2 = (0.5 - c[0]) / (c[1] - c[0])
    bh = np.array([1.0 - bh2, bh2, 0.0])
    return g, c, A, b, bh


SDIRK_GAMMA, SDIRK_C, SDIRK_A, SDIRK_B, SDIRK_BHAT = _sdirk_tableau()


class NewtonFailure(StepFailure):
    pass


def sdirk_advance(system, t: float, x: np.ndarray, dt: float, newton_tol: float = 1e-8,
                  max_newton: int = 25, newton: str = "full") -> tuple[np.ndarray, np.ndarray, int]:
    """One SDIRK3(2) step on the free dofs of ``system``.

    Each stage equation ``M (X - x_n) - dt sum_j a_ij g_j = 0`` with
    ``g = b(t) - K(X) X`` is solved by Newton iterations with matrix
    ``M + gamma dt J(X_k)``, reassembled every iteration. ``newton="full"`` uses
    the exact Jacobian ``J`` of ``K(X) X``; ``"picard"`` uses the secant
    ``K(X_k)``, which stalls once a field-dependent layer switches. The
    preconditioner is set up once per step, on the first matrix of the first
    stage.

    Returns (x_new, error_estimate, newton_iterations).
    """
    g_ = SDIRK_GAMMA
    M = system.M_II
    precond = None
    stage_x, stage_g = [], []
    newton_total = 0
    X = x.copy()
    for i in range(3):
        ti = t + SDIRK_C[i] * dt
        known = M @ x
        for j in range(i):
            known = known + dt * SDIRK_A[i, j] * stage_g[j]
        xb = system.x_boundary(ti)
        lift = system.lift(ti)
        scale = max(np.linalg.norm(known), 1e-300)
        for k in range(max_newton + 1):
            if newton == "full":
                K, J = system.assemble_tangent(system.full(X, ti))
            else:
                K = J = system.assemble_stiffness(system.full(X, ti))
            with system.timed("matrix_setup"):
                K_II, K_IB = system.blocks.split(K)
                g = lift - K_IB @ xb - K_II @ X
                G = M @ X - known - dt * g_ * g
            if np.linalg.norm(G) <= newton_tol * max(scale, np.linalg.norm(M @ X)):
                break
            if k == max_newton:
                raise NewtonFailure(f"Newton did not converge in {max_newton} iterations at t={ti:.6e}")
            with system.timed("matrix_setup"):
                A = (M + (g_ * dt) * system.blocks.split(J)[0]).tocsr()
            if precond is None:
                precond = system.new_step_preconditioner(A)
            with system.timed("solve"):
                res = pcg_solve(A, precond, -G, None, system.rel_tol, system.max_iter)
            system.counters.pcg_iterations += res.iterations
            system.counters.newton_iterations += 1
            newton_total += 1
            if not res.converged:
                raise StepFailure("PCG did not converge inside Newton iteration")
            X = X + res.x
        if not np.all(np.isfinite(X)):
            raise NumericalBreakdownError("non-finite stage value")
        stage_x.append(X.copy())
        stage_g.append(g)
    # stage slopes k_i = M^-1 g_i recovered from the stage increments
    kk = []
    for i in range(3):
        v = (stage_x[i] - x) / dt
        for j in range(i):
            v = v - SDIRK_A[i, j] * kk[j]
        kk.append(v / g_)
    est = dt * sum((SDIRK_B[i] - SDIRK_BHAT[i]) * kk[i] for i in range(3))
    return stage_x[2], est, newton_total


# --------------------------------------------------------------------------
# spectral radius and step control

def estimate_spectral_radius(apply_K: Callable[[np.ndarray], np.ndarray],
                             solve_M: Callable[[np.ndarray], np.ndarray], n: int,
                             apply_M: Callable[[np.ndarray], np.ndarray] | None = None,
                             iterations: int = 15, safety: float = 1.2, seed: int = 0,
                             max_restarts: int = 3) -> float:
    """Safety-scaled power-iteration estimate of the largest eigenvalue of ``M^-1 K``.

    Iterates ``v <- M^-1 K v``; the eigenvalue is read off the generalized
    Rayleigh quotient ``v.Kv / v.Mv`` of the last iterate. An operator that
    maps every random start to exactly zero is reported as 0 after the restarts.
    """
    apply_M = apply_M or (lambda v: v)
    for attempt in range(max_restarts + 1):
        v = np.random.default_rng(seed + attempt).standard_normal(n)
        v /= np.linalg.norm(v)
        ok = True
        for _ in range(iterations):
            w = solve_M(apply_K(v))
            nw = np.linalg.norm(w)
            if not np.isfinite(nw):
                raise NumericalBreakdownError("non-finite value in power iteration")
            if nw == 0.0:
                ok = False
                break
            v = w / nw
        if ok:
            lam = (v @ apply_K(v)) / (v @ apply_M(v))
            return safety * float(lam)
    log.info("power iteration hit the zero vector %d times; treating the operator as zero", max_restarts + 1)
    return 0.0


def error_norm(est: np.ndarray, x_old: np.ndarray, x_new: np.ndarray, atol: float, rtol: float) -> float:
    w = atol + rtol * np.maximum(np.abs(x_old), np.abs(x_new))
    return float(np.sqrt(np.mean((est / w) ** 2))) if est.size else 0.0


def step_controller(err: float, dt: float, order: int) -> tuple[bool, float]:
    """Accept iff ``err <= 1``; ``dt_new = dt * clamp(0.8 err^(-1/(p+1)), 0.1, 10)``."""
    if err == 0.0:
        factor = 10.0
    elif not math.isfinite(err):
        factor = 0.1
    else:
        factor = min(10.0, max(0.1, 0.8 * err ** (-1.0 / (order + 1))))
    return err <= 1.0, dt * factor


# --------------------------------------------------------------------------
# driver

@dataclass
class StepRecord:
    step: int
    t: float
    dt: float
    method: str
    accepted: bool
    stages: int = 0
    newton_iterations: int = 0
    pcg_per_solve: list = field(default_factory=list)
    estimator: str = ""
    rho: float = float("nan")
    error: float = float("nan")
    counters: dict = field(default_factory=dict)
    timers: dict = field(default_factory=dict)


METHOD_ORDER = {"euler": 1, "rkc": 2, "sdirk32": 3}


class Integrator:
    """Advances an :class:`~eqsim.system.EqsSystem` from ``t0`` to ``t_end``.

    ``on_step(record, x)`` is called for every attempted step with the new
    free-dof state (``x`` is None for rejected steps).
    """

    def __init__(self, system, method: str = "rkc", tol: float = 1e-2, atol: float | None = None,
                 max_stages: int = 200, rho_refresh: int = 25, rho_tol: float = 1e-4,
                 newton_tol: float = 1e-8, max_newton: int = 25, max_rejections: int = 50,
                 fixed_stages: int | None = None, rho_mode: str = "jacobian", newton: str = "full"):
        if method not in METHOD_ORDER:
            raise ValueError(f"unknown integrator {method!r}")
        if tol <= 0:
            raise ValueError("tolerance must be positive")
        self.system = system
        self.method = method
        self.rtol = tol
        scale = system.excitation.scale() or 1.0
        self.atol = tol * scale if atol is None else atol
        self.max_stages = max_stages
        self.rho_refresh = rho_refresh
        self.rho_tol = rho_tol
        self.newton_tol = newton_tol
        self.max_newton = max_newton
        self.max_rejections = max_rejections
        self.fixed_stages = fixed_stages
        if rho_mode not in ("jacobian", "secant"):
            raise ValueError(f"unknown spectral radius mode {rho_mode!r}")
        self.rho_mode = rho_mode
        if newton not in ("full", "picard"):
            raise ValueError(f"unknown Newton variant {newton!r}")
        self.newton = newton
        self.rho = None
        self._rho_age = 0
        self._f0 = None
        self.accepted = 0
        self.rejected = 0

    def spectral_radius(self, t: float, x: np.ndarray) -> float:
        """Largest eigenvalue of ``M^-1 K(x)`` ("secant") or of ``M^-1 J(x)``
        with ``J`` the Jacobian of ``x -> K(x) x`` ("jacobian"), using loose
        inner M-solves. Both agree for linear materials; with a field-dependent
        conductivity only the Jacobian bounds the explicit stability limit.
        """
        sysm = self.system
        if self.rho_mode == "secant":
            apply_K = lambda v: sysm.stiffness_times(t, x, v)
        else:
            xf = sysm.full(x, t)
            base = sysm.op.apply(xf, xf)[sysm.dofmap.free]
            apply_K = lambda v: sysm.jacobian_times(t, x, v, base)

        def solve(r):
            return sysm.solve_mass(r, purpose="spectral", rel_tol=self.rho_tol, use_estimator=False)

        with sysm.timed("spectral"):
            rho = estimate_spectral_radius(apply_K, solve, sysm.n, lambda v: sysm.M_II @ v)
        self.rho = rho
        self._rho_age = 0
        return rho

    def _f(self, t, x):
        return self.system.rate(t, x)

    def _attempt(self, t, x, dt):
        """Returns (x_new, err, info) or raises StepFailure."""
        if self.method == "euler":
            x_new = euler_advance(self._f, t, x, dt)
            return x_new, 0.0, {}
        if self.method == "sdirk32":
            x_new, est, newton = sdirk_advance(self.system, t, x, dt, self.newton_tol, self.max_newton,
                                               self.newton)
            return x_new, error_norm(est, x, x_new, self.atol, self.rtol), {"newton": newton}
        # rkc
        if self.rho is None or self._rho_age >= self.rho_refresh:
            self.spectral_radius(t, x)
        s = self.fixed_stages or rkc_stages_for(dt * self.rho)
        if s > self.max_stages:
            raise _StageCap(RKC_BETA * (self.max_stages**2 - 1) / self.rho)
        if self._f0 is None:
            self._f0 = self._f(t, x)
        f0 = self._f0
        x_new = rkc_advance(self._f, t, x, dt, s, f0)
        f1 = self._f(t + dt, x_new)
        est = rkc_error_estimate(x, x_new, dt, f0, f1)
        return x_new, error_norm(est, x, x_new, self.atol, self.rtol), {"stages": s, "f1": f1}

    def run(self, t0: float, t_end: float, dt0: float, x0: np.ndarray | None = None, on_step=None,
            initial: str = "electrostatic", adaptive: bool | None = None) -> np.ndarray:
        sysm = self.system
        x = sysm.initial_state(t0, initial) if x0 is None else np.array(x0, dtype=float)
        adaptive = self.method != "euler" if adaptive is None else adaptive
        t, dt = t0, dt0
        step = 0
        consecutive = 0
        eps_t = 1e-12 * max(abs(t_end), abs(dt0))
        while t < t_end - eps_t:
            dt = min(dt, t_end - t)
            before = sysm.counters.snapshot()
            tim_before = dict(sysm.timers)
            n_log = len(sysm.solve_log)
            rec = StepRecord(step, t, dt, self.method, False, estimator=sysm.estimator.mode)
            try:
                x_new, err, info = self._attempt(t, x, dt)
                ok = np.all(np.isfinite(x_new)) and math.isfinite(err)
                if not ok:
                    err = math.inf
                if adaptive:
                    accept, dt_next = step_controller(err, dt, METHOD_ORDER[self.method])
                else:
                    accept, dt_next = bool(ok), dt
                    if not ok:
                        raise StepFailure("non-finite state with fixed step size")
            except _StageCap as cap:
                x_new, err, info, accept, dt_next = None, math.inf, {}, False, cap.dt
            except NewtonFailure:
                if not adaptive:
                    raise
                x_new, err, info, accept, dt_next = None, math.inf, {}, False, 0.5 * dt
            except StepFailure:
                if not adaptive:
                    raise
                x_new, err, info, accept, dt_next = None, math.inf, {}, False, 0.5 * dt
            rec.accepted = bool(accept)
            rec.error = err
            rec.stages = info.get("stages", {"euler": 1, "sdirk32": 3}.get(self.method, 0))
            rec.newton_iterations = info.get("newton", 0)
            rec.rho = self.rho if self.rho is not None else float("nan")
            rec.pcg_per_solve = [r.iterations for r in sysm.solve_log[n_log:]]
            after = sysm.counters.snapshot()
            rec.counters = {k: after[k] - before[k] for k in after}
            rec.timers = {k: v - tim_before.get(k, 0.0) for k, v in sysm.timers.items()}
            if accept:
                t = t + dt
                x = x_new
                self.accepted += 1
                self._rho_age += 1
                consecutive = 0
                if self.method == "rkc":
                    self._f0 = info["f1"]
            else:
                self.rejected += 1
                consecutive += 1
                # estimate may be stale after a rejection
                self.rho = None if self.method == "rkc" else self.rho
                if consecutive > self.max_rejections:
                    raise StepFailure(f"{consecutive} consecutive step rejections at t={t:.6e}")
                if dt_next < 1e-14 * max(abs(t_end), 1e-300):
                    raise StepFailure(f"step size underflow at t={t:.6e}")
            if on_step is not None:
                on_step(rec, x if accept else None)
            dt = dt_next
            step += 1
        return x


class _StageCap(Exception):
    def __init__(self, dt):
        super().__init__(dt)
        self.dt = dt
