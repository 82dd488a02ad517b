"""Preconditioned conjugate gradients and reusable SPD preconditioners
(Jacobi, symmetric Gauss-Seidel, smoothed-aggregation AMG V-cycle).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
from numba import njit

from .errors import NumericalBreakdownError

log = logging.getLogger(__name__)


def as_operator(A) -> Callable[[np.ndarray], np.ndarray]:
    """Wrap a sparse/dense matrix or a callback as ``v -> A v``."""
    if callable(A) and not sp.issparse(A) and not isinstance(A, np.ndarray):
        return A
    return lambda v: A @ v


class PcgResult(NamedTuple):
    x: np.ndarray
    iterations: int
    residual: float
    converged: bool
    initial_residual: float
    recurrence_residual: float


def pcg_solve(apply_A, precond, b, x0=None, rel_tol: float = 1e-12, max_iter: int = 1000) -> PcgResult:
    """Solve ``A x = b`` for SPD ``A`` with an SPD preconditioner.

    Stops when ``||b - A x|| <= rel_tol * ||b||`` (relative to ``b``, not to the
    initial residual, so an exact start vector costs no iterations).
    ``iterations`` counts operator applications after the initial residual.
    ``residual`` is recomputed from scratch at exit; ``recurrence_residual``
    is the value the iteration stopped on.
    """
    A = as_operator(apply_A)
    M = as_operator(precond) if precond is not None else (lambda r: r)
    b = np.asarray(b, dtype=float)
    nb = np.linalg.norm(b)
    if nb == 0.0:
        return PcgResult(np.zeros_like(b), 0, 0.0, True, 0.0, 0.0)
    if x0 is None or not np.any(x0):
        x = np.zeros_like(b)
        r = b.copy()
    else:
        x = np.array(x0, dtype=float)
        r = b - A(x)
    rel = np.linalg.norm(r) / nb
    rel0 = rel
    if not np.isfinite(rel):
        raise NumericalBreakdownError("non-finite initial residual")
    it = 0
    if rel > rel_tol:
        z = M(r)
        p = z.copy()
        rz = r @ z
        while it < max_iter:
            q = A(p)
            pq = p @ q
            it += 1
            if not np.isfinite(pq) or pq <= 0.0:
                raise NumericalBreakdownError(f"PCG breakdown at iteration {it}: p.Ap = {pq}")
            alpha = rz / pq
            x += alpha * p
            r -= alpha * q
            rel = np.linalg.norm(r) / nb
            if not np.isfinite(rel):
                raise NumericalBreakdownError(f"non-finite residual at iteration {it}")
            if rel <= rel_tol:
                break
            z = M(r)
            rz_new = r @ z
            p *= rz_new / rz
            p += z
            rz = rz_new
    true_rel = np.linalg.norm(b - A(x)) / nb if it else rel
    return PcgResult(x, it, float(true_rel), bool(rel <= rel_tol), float(rel0), float(rel))


# --------------------------------------------------------------------------
# single-level preconditioners

class IdentityPreconditioner:
    kind = "none"

    def __call__(self, r):
        return r.copy()


class JacobiPreconditioner:
    kind = "jacobi"

    def __init__(self, A):
        d = np.asarray(A.diagonal() if sp.issparse(A) else np.diag(A), dtype=float)
        if np.any(d <= 0):
            raise ValueError("Jacobi preconditioner needs a positive diagonal")
        self.inv_diag = 1.0 / d

    def __call__(self, r):
        return r * self.inv_diag


@njit(cache=True)
def _gs_sweep(indptr, indices, data, diag, x, b, reverse):
    n = b.size
    for k in range(n):
        i = n - 1 - k if reverse else k
        s = b[i]
        for p in range(indptr[i], indptr[i + 1]):
            s -= data[p] * x[indices[p]]
        x[i] += s / diag[i]


def _csr(A) -> sp.csr_matrix:
    A = sp.csr_matrix(A)
    A.sum_duplicates()
    A.sort_indices()
    return A


class SymmetricGaussSeidel:
    """Forward then backward Gauss-Seidel sweep(s) from a zero guess (SSOR with omega=1)."""

    kind = "sgs"

    def __init__(self, A, sweeps: int = 1):
        self.A = _csr(A)
        self.diag = self.A.diagonal()
        if np.any(self.diag <= 0):
            raise ValueError("Gauss-Seidel needs a positive diagonal")
        self.sweeps = sweeps

    def smooth(self, x, b):
        A = self.A
        for _ in range(self.sweeps):
            _gs_sweep(A.indptr, A.indices, A.data, self.diag, x, b, False)
            _gs_sweep(A.indptr, A.indices, A.data, self.diag, x, b, True)
        return x

    def __call__(self, r):
        return self.smooth(np.zeros_like(r), np.ascontiguousarray(r))


# --------------------------------------------------------------------------
# smoothed aggregation AMG

def strength_graph(A: sp.csr_matrix, theta: float) -> sp.csr_matrix:
    """Off-diagonal couplings with ``|a_ij| >= theta * sqrt(a_ii a_jj)``."""
    A = A.tocoo()
    d = np.abs(A.diagonal())
    keep = (A.row != A.col) & (np.abs(A.data) >= theta * np.sqrt(d[A.row] * d[A.col]))
    S = sp.csr_matrix((np.ones(keep.sum()), (A.row[keep], A.col[keep])), shape=A.shape)
    S.sort_indices()
    return S


@njit(cache=True)
def _standard_aggregation(indptr, indices, n):
    agg = -np.ones(n, dtype=np.int64)
    n_agg = 0
    # pass 1: seed aggregates from nodes whose whole neighbourhood is free
    for i in range(n):
        if agg[i] >= 0:
            continue
        free = True
        for p in range(indptr[i], indptr[i + 1]):
            if agg[indices[p]] >= 0:
                free = False
                break
        if free:
            agg[i] = n_agg
            for p in range(indptr[i], indptr[i + 1]):
                agg[indices[p]] = n_agg
            n_agg += 1
    # pass 2: attach leftovers to a neighbouring pass-1 aggregate
    first = agg.copy()
    for i in range(n):
        if agg[i] >= 0:
            continue
        for p in range(indptr[i], indptr[i + 1]):
            j = indices[p]
            if first[j] >= 0:
                agg[i] = first[j]
                break
    # pass 3: whatever is left forms new aggregates with its free neighbours
    for i in range(n):
        if agg[i] >= 0:
            continue
        agg[i] = n_agg
        for p in range(indptr[i], indptr[i + 1]):
            j = indices[p]
            if agg[j] < 0:
                agg[j] = n_agg
        n_agg += 1
    return agg, n_agg


def aggregate(S: sp.csr_matrix) -> tuple[np.ndarray, int]:
    return _standard_aggregation(S.indptr.astype(np.int64), S.indices.astype(np.int64), S.shape[0])


def estimate_lambda_max(A: sp.csr_matrix, iterations: int = 10, seed: int = 0) -> float:
    """Largest eigenvalue of ``D^{-1} A`` by power iteration on the symmetric scaling."""
    s = 1.0 / np.sqrt(A.diagonal())
    B = sp.diags(s) @ A @ sp.diags(s)
    v = np.random.default_rng(seed).standard_normal(A.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iterations):
        w = B @ v
        lam = v @ w
        nw = np.linalg.norm(w)
        if nw == 0.0:
            break
        v = w / nw
    return float(max(lam, np.linalg.norm(B @ v)))


@dataclass
class AmgLevel:
    A: sp.csr_matrix
    P: sp.csr_matrix | None = None
    R: sp.csr_matrix | None = None
    smoother: SymmetricGaussSeidel | None = None


@dataclass
class AmgHierarchy:
    """Smoothed-aggregation hierarchy; calling it applies one symmetric V-cycle."""

    levels: list[AmgLevel]
    coarse_factor: tuple = field(repr=False, default=None)
    kind: str = "amg"

    @property
    def dims(self) -> list[int]:
        return [lvl.A.shape[0] for lvl in self.levels]

    def _cycle(self, k: int, b: np.ndarray) -> np.ndarray:
        lvl = self.levels[k]
        if k == len(self.levels) - 1:
            return la.cho_solve(self.coarse_factor, b)
        x = lvl.smoother.smooth(np.zeros_like(b), b)
        r = b - lvl.A @ x
        x += lvl.P @ self._cycle(k + 1, lvl.R @ r)
        return lvl.smoother.smooth(x, b)

    def __call__(self, r: np.ndarray) -> np.ndarray:
        return self._cycle(0, np.ascontiguousarray(r, dtype=float))


def amg_setup(A, theta: float = 0.08, sweeps: int = 1, max_levels: int = 10,
              max_coarse: int = 64) -> AmgHierarchy:
    """Build a smoothed-aggregation hierarchy for an SPD matrix.

    Near-kernel vector is the constant; the tentative prolongator is smoothed
    by one damped Jacobi step with weight ``(2/3) / lambda_max(D^-1 A)``.
    """
    A = _csr(A)
    scale = np.abs(A.data).max() if A.nnz else 1.0
    if A.nnz and abs(A - A.T).max() > 1e-12 * scale:
        raise ValueError("AMG setup needs a symmetric matrix")
    levels = []
    while A.shape[0] > max_coarse and len(levels) < max_levels - 1:
        agg, n_agg = aggregate(strength_graph(A, theta))
        if n_agg >= A.shape[0]:
            break
        n = A.shape[0]
        sizes = np.bincount(agg, minlength=n_agg)
        T = sp.csr_matrix((1.0 / np.sqrt(sizes[agg]), (np.arange(n), agg)), shape=(n, n_agg))
        omega = (2.0 / 3.0) / estimate_lambda_max(A)
        P = _csr(T - omega * (sp.diags(1.0 / A.diagonal()) @ (A @ T)))
        R = _csr(P.T)
        levels.append(AmgLevel(A, P, R, SymmetricGaussSeidel(A, sweeps)))
        A = _csr(R @ A @ P)
    levels.append(AmgLevel(A))
    factor = la.cho_factor(A.toarray(), lower=True)
    return AmgHierarchy(levels, factor)


def precond_apply(precond, r: np.ndarray) -> np.ndarray:
    return precond(r)


def make_preconditioner(A, kind: str = "amg", **params):
    if kind == "amg":
        return amg_setup(A, **params)
    if kind == "jacobi":
        return JacobiPreconditioner(A)
    if kind in ("sgs", "ssor"):
        return SymmetricGaussSeidel(A, params.get("sweeps", 1))
    if kind == "none":
        return IdentityPreconditioner()
    raise ValueError(f"unknown preconditioner {kind!r}")


def dump_matrix_market(A, path) -> None:
    """Write ``A`` in Matrix Market coordinate format (debugging aid)."""
    from scipy.io import mmwrite
    mmwrite(str(path), sp.coo_matrix(A))
