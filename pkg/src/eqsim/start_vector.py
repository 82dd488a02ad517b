"""Start vectors for the repeated solves with the constant mass matrix.

Every estimator maps the next right-hand side ``b`` to a guess
``x0 = V (V^T M V)^{-1} V^T b`` for some orthonormal basis ``V`` built from
earlier solutions: the recent window (SPE), a POD basis of the first
snapshots (fixed), or a POD basis of a rolling snapshot window.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la

log = logging.getLogger(__name__)

MODES = ("zero", "previous", "spe", "pod_fixed", "pod_rolling")


def mgs_orthonormalize(vectors, drop_tol: float = 1e-8) -> np.ndarray:
    """Modified Gram-Schmidt with column dropping.

    A candidate is discarded if its norm after projection falls below
    ``drop_tol`` times its original norm. Returns an (n, m) array, m possibly 0.
    """
    cols = []
    for v in vectors:
        w = np.array(v, dtype=float)
        norm0 = np.linalg.norm(w)
        if norm0 == 0.0:
            continue
        for q in cols:
            w -= (q @ w) * q
        # second pass keeps orthonormality at machine precision
        for q in cols:
            w -= (q @ w) * q
        nw = np.linalg.norm(w)
        if nw >= drop_tol * norm0:
            cols.append(w / nw)
    if not cols:
        n = len(np.asarray(vectors[0])) if len(vectors) else 0
        return np.zeros((n, 0))
    return np.column_stack(cols)


def reduced_factor(V: np.ndarray, M):
    """Cholesky factor of ``V^T M V``; None if it is not positive definite."""
    MV = np.column_stack([M @ V[:, k] for k in range(V.shape[1])])
    R = V.T @ MV
    R = 0.5 * (R + R.T)
    try:
        return la.cho_factor(R, lower=True)
    except la.LinAlgError:
        return None


def spe_start(V: np.ndarray, M, b: np.ndarray, factor=None) -> np.ndarray:
    """Galerkin projection of ``M x = b`` onto ``span(V)``."""
    if V.shape[1] == 0:
        return np.zeros_like(b)
    factor = factor if factor is not None else reduced_factor(V, M)
    if factor is None:
        log.warning("reduced start-vector system is singular; using zero start")
        return np.zeros_like(b)
    return V @ la.cho_solve(factor, V.T @ b)


def pod_build(snapshots: np.ndarray, rank: int) -> np.ndarray:
    """Leading left singular vectors of the snapshot matrix.

    Directions with singular value below ``1e-12 * sigma_max`` are dropped, so
    fewer than ``rank`` columns may come back.
    """
    S = np.asarray(snapshots, dtype=float)
    if S.ndim != 2 or S.shape[1] < 1:
        raise ValueError("need at least one snapshot column")
    if rank < 1 or rank > S.shape[1]:
        raise ValueError(f"rank must be in [1, {S.shape[1]}], got {rank}")
    U, sigma, _ = la.svd(S, full_matrices=False)
    if sigma.size == 0 or sigma[0] == 0.0:
        return np.zeros((S.shape[0], 0))
    keep = min(rank, int(np.sum(sigma > 1e-12 * sigma[0])))
    return U[:, :keep]


@dataclass
class EstimatorStats:
    calls: int = 0
    svd_count: int = 0
    factorizations: int = 0
    appended: int = 0
    last_rank: int = 0


class ZeroStart:
    mode = "zero"

    def __init__(self):
        self.stats = EstimatorStats()

    def next(self, M, b):
        self.stats.calls += 1
        self.stats.last_rank = 0
        return np.zeros_like(b)

    def feedback(self, x, iterations):
        pass


class PreviousSolution(ZeroStart):
    mode = "previous"

    def __init__(self):
        super().__init__()
        self.last = None

    def next(self, M, b):
        self.stats.calls += 1
        self.stats.last_rank = int(self.last is not None)
        return np.zeros_like(b) if self.last is None else self.last.copy()

    def feedback(self, x, iterations):
        self.last = np.array(x, dtype=float)


class SubspaceProjection(ZeroStart):
    """SPE: project onto the MGS basis of the last ``window`` solutions."""

    mode = "spe"

    def __init__(self, window: int = 8, drop_tol: float = 1e-8):
        super().__init__()
        if window < 1:
            raise ValueError("SPE window must be at least 1")
        self.history = deque(maxlen=window)
        self.drop_tol = drop_tol

    def next(self, M, b):
        self.stats.calls += 1
        if not self.history:
            self.stats.last_rank = 0
            return np.zeros_like(b)
        V = mgs_orthonormalize(list(self.history), self.drop_tol)
        self.stats.last_rank = V.shape[1]
        if V.shape[1] == 0:
            return np.zeros_like(b)
        self.stats.factorizations += 1
        return spe_start(V, M, b)

    def feedback(self, x, iterations):
        self.history.append(np.array(x, dtype=float))


class PodFixed(ZeroStart):
    """POD basis from the first ``snapshots`` solutions, built once and kept."""

    mode = "pod_fixed"

    def __init__(self, snapshots: int = 40, rank: int = 10):
        super().__init__()
        if rank > snapshots:
            raise ValueError("POD rank cannot exceed the snapshot count")
        self.n_snapshots = snapshots
        self.rank = rank
        self.collected: list[np.ndarray] = []
        self.V = None
        self.factor = None

    def next(self, M, b):
        self.stats.calls += 1
        if self.V is None and len(self.collected) >= self.n_snapshots:
            self.V = pod_build(np.column_stack(self.collected), self.rank)
            self.collected = []
            self.stats.svd_count += 1
            self.factor = reduced_factor(self.V, M) if self.V.shape[1] else None
            self.stats.factorizations += 1
        if self.V is None or self.factor is None:
            self.stats.last_rank = 0
            return np.zeros_like(b)
        self.stats.last_rank = self.V.shape[1]
        return spe_start(self.V, M, b, self.factor)

    def feedback(self, x, iterations):
        if self.V is None and len(self.collected) < self.n_snapshots:
            self.collected.append(np.array(x, dtype=float))
            self.stats.appended += 1


class PodRolling(ZeroStart):
    """POD basis over a ring buffer of snapshots.

    While the buffer fills, every solution is stored. Once full, a solution
    replaces the oldest snapshot only if its solve took more iterations than
    the threshold: ``threshold`` if given, else ``threshold_factor`` times the
    median iteration count of the previous ``capacity`` solves. Every change
    of the snapshot set marks the basis stale; it is rebuilt (one SVD plus one
    reduced factorization) on the next request.
    """

    mode = "pod_rolling"

    def __init__(self, capacity: int = 20, rank: int = 10, threshold_factor: float = 1.25,
                 threshold: float | None = None):
        super().__init__()
        if rank > capacity:
            raise ValueError("POD rank cannot exceed the snapshot capacity")
        self.capacity = capacity
        self.rank = rank
        self.threshold_factor = threshold_factor
        self.fixed_threshold = threshold
        self.snapshots = deque(maxlen=capacity)
        self.iterations: list[int] = []
        self.stale = False
        self.V = None
        self.factor = None
        self.appended_after_fill = 0
        self.svd_after_fill = 0
        self._filled_at = None  # svd_count of the rebuild caused by the filling snapshot

    @property
    def full(self) -> bool:
        return len(self.snapshots) == self.capacity

    def threshold(self) -> float:
        if self.fixed_threshold is not None:
            return float(self.fixed_threshold)
        if not self.iterations:
            return 0.0
        return self.threshold_factor * float(np.median(self.iterations[-self.capacity:]))

    def next(self, M, b):
        self.stats.calls += 1
        if self.stale:
            self.V = pod_build(np.column_stack(self.snapshots), min(self.rank, len(self.snapshots)))
            self.stats.svd_count += 1
            if self._filled_at is not None and self.stats.svd_count > self._filled_at:
                self.svd_after_fill += 1
            self.factor = reduced_factor(self.V, M) if self.V.shape[1] else None
            self.stats.factorizations += 1
            self.stale = False
        if self.V is None or self.factor is None:
            self.stats.last_rank = 0
            return np.zeros_like(b)
        self.stats.last_rank = self.V.shape[1]
        return spe_start(self.V, M, b, self.factor)

    def feedback(self, x, iterations):
        was_full = self.full
        exceeded = iterations > self.threshold()
        self.iterations.append(int(iterations))
        if was_full and not exceeded:
            return
        self.snapshots.append(np.array(x, dtype=float))
        self.stats.appended += 1
        self.stale = True
        if was_full:
            self.appended_after_fill += 1
        elif self.full:
            # the rebuild triggered by the filling snapshot still belongs to the fill phase
            self._filled_at = self.stats.svd_count + 1


def make_estimator(mode: str = "zero", **params):
    """Factory: ``zero | previous | spe | pod_fixed | pod_rolling``."""
    classes = {"zero": ZeroStart, "previous": PreviousSolution, "spe": SubspaceProjection,
               "pod_fixed": PodFixed, "pod_rolling": PodRolling}
    if mode not in classes:
        raise ValueError(f"unknown estimator mode {mode!r}; expected one of {MODES}")
    return classes[mode](**params)
