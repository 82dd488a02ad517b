"""Material laws: permittivity and field-dependent conductivity."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from numba import njit

EPS0 = 8.8541878128e-12  # F/m

LAW_CONSTANT = 0
LAW_MICROVARISTOR = 1


@dataclass(frozen=True)
class Constant:
    kappa: float

    def __post_init__(self):
        if not self.kappa >= 0:
            raise ValueError(f"conductivity must be non-negative, got {self.kappa}")


@dataclass(frozen=True)
class Microvaristor:
    """Sigmoid-in-log conductivity switching from kappa_lo to kappa_hi around e_switch."""

    kappa_lo: float = 1e-10
    kappa_hi: float = 1e-4
    e_switch: float = 5e5
    width: float = 5e4

    def __post_init__(self):
        if not (self.kappa_lo > 0 and self.kappa_hi > 0):
            raise ValueError("kappa_lo and kappa_hi must be positive")
        if self.kappa_hi < self.kappa_lo:
            raise ValueError("kappa_hi must not be smaller than kappa_lo")
        if not (self.e_switch > 0 and self.width > 0):
            raise ValueError("e_switch and width must be positive")


Conductivity = Union[Constant, Microvaristor]


@dataclass(frozen=True)
class MaterialModel:
    eps_r: float = 1.0
    conductivity: Conductivity = Constant(0.0)

    def __post_init__(self):
        if not self.eps_r > 0:
            raise ValueError(f"eps_r must be positive, got {self.eps_r}")

    @property
    def eps(self) -> float:
        return self.eps_r * EPS0

    def law_params(self) -> np.ndarray:
        """Flat parameter row used by the compiled kernels."""
        c = self.conductivity
        if isinstance(c, Constant):
            return np.array([LAW_CONSTANT, c.kappa, 0.0, 0.0, 1.0])
        return np.array([LAW_MICROVARISTOR, c.kappa_lo, c.kappa_hi, c.e_switch, c.width])


@njit(cache=True, nogil=True)
def law_kappa(p, e):
    if p[0] == LAW_CONSTANT:
        return p[1]
    lo = math.log10(p[1])
    hi = math.log10(p[2])
    s = 0.5 * (1.0 + math.tanh((e - p[3]) / p[4]))
    return 10.0 ** (lo + (hi - lo) * s)


@njit(cache=True, nogil=True)
def law_dkappa(p, e):
    if p[0] == LAW_CONSTANT:
        return 0.0
    lo = math.log10(p[1])
    hi = math.log10(p[2])
    th = math.tanh((e - p[3]) / p[4])
    s = 0.5 * (1.0 + th)
    kap = 10.0 ** (lo + (hi - lo) * s)
    return kap * math.log(10.0) * (hi - lo) * 0.5 * (1.0 - th * th) / p[4]


@njit(cache=True)
def _eval_many(p, e, out, deriv):
    for i in range(e.size):
        out[i] = law_dkappa(p, e[i]) if deriv else law_kappa(p, e[i])


def _evaluate(model, e_mag, deriv):
    e = np.asarray(e_mag, dtype=float)
    if np.any(e < 0) or np.any(np.isnan(e)):
        raise ValueError("field magnitude must be non-negative")
    flat = np.ascontiguousarray(e.ravel())
    out = np.empty_like(flat)
    _eval_many(model.law_params(), flat, out, deriv)
    if e.ndim == 0:
        return float(out[0])
    return out.reshape(e.shape)


def kappa_of_E(model: MaterialModel, e_mag):
    """Conductivity in S/m at field magnitude ``e_mag`` (V/m); scalar or array."""
    return _evaluate(model, e_mag, False)


def dkappa_dE(model: MaterialModel, e_mag):
    """Analytic derivative of :func:`kappa_of_E` with respect to the field magnitude."""
    return _evaluate(model, e_mag, True)
