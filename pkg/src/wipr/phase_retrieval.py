r"""Majorization-minimization for ``min_x 1/2 || |Lx| - |y| ||^2``.

Each step replaces the unknown phase of the measurements by the phase of the
current prediction and solves the resulting linear least-squares problem::

    x_{k+1} = argmin_x 1/2 || L x - |y| exp(j angle(L x_k)) ||^2

The quadratic surrogate touches the objective at ``x_k`` and lies above it
everywhere (reverse triangle inequality, termwise), so the objective never
increases.  Where ``(L x_k)_i == 0`` the phase factor is taken as 1.

Inner products follow the conjugating convention ``<x, y> = sum(conj(x) * y)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg

__all__ = [
    "PrProblem",
    "PrState",
    "ZeroPhaseWarning",
    "RankDeficientWarning",
    "unit_phase",
    "pr_objective",
    "pr_gradient",
    "surrogate",
    "mm_step",
    "mm_solve",
    "normal_residual",
]


class ZeroPhaseWarning(RuntimeWarning):
    """A prediction entry was exactly zero, so its phase was set to 1."""


class RankDeficientWarning(RuntimeWarning):
    """The surrogate least-squares problem had no unique minimizer."""


@dataclass
class PrProblem:
    """Phase-retrieval problem over a linear map ``L`` (m x n).

    Either pass ``matrix`` or the pair ``apply``/``apply_adjoint``.
    """

    magnitude: np.ndarray
    apply: Callable[[np.ndarray], np.ndarray] | None = None
    apply_adjoint: Callable[[np.ndarray], np.ndarray] | None = None
    matrix: np.ndarray | None = None
    shape: tuple[int, int] | None = None

    def __post_init__(self):
        self.magnitude = np.asarray(self.magnitude, dtype=float)
        if np.any(self.magnitude < 0):
            raise ValueError("target magnitudes must be nonnegative")
        if self.matrix is not None:
            self.matrix = np.asarray(self.matrix, dtype=complex)
            mat = self.matrix
            self.apply = lambda x: mat @ x
            self.apply_adjoint = lambda r: mat.conj().T @ r
            self.shape = mat.shape
        elif self.apply is None or self.apply_adjoint is None or self.shape is None:
            raise ValueError("give either a matrix or apply/apply_adjoint and shape")
        if self.magnitude.shape != (self.shape[0],):
            raise ValueError(
                f"magnitude has shape {self.magnitude.shape}, operator has {self.shape[0]} rows"
            )

    @classmethod
    def from_matrix(cls, L, y) -> "PrProblem":
        return cls(magnitude=np.abs(np.asarray(y)), matrix=L)

    def _x(self, x):
        x = np.asarray(x, dtype=complex)
        if x.shape != (self.shape[1],):
            raise ValueError(f"x has shape {x.shape}, expected ({self.shape[1]},)")
        return x

    def dense(self) -> np.ndarray:
        """Explicit matrix, built column by column if only the map is known."""
        if self.matrix is None:
            eye = np.eye(self.shape[1], dtype=complex)
            self.matrix = np.column_stack([self.apply(e) for e in eye])
        return self.matrix


@dataclass
class PrState:
    x: np.ndarray
    objective: float
    iteration: int = 0
    history: list[float] = field(default_factory=list)
    rank_deficient: bool = False


def unit_phase(z, warn: bool = False) -> np.ndarray:
    """``exp(j angle(z))`` with the convention that zero maps to 1."""
    z = np.asarray(z, dtype=complex)
    mag = np.abs(z)
    zero = mag == 0
    if warn and np.any(zero):
        warnings.warn(
            f"{int(zero.sum())} zero-magnitude entries, phase set to 1",
            ZeroPhaseWarning,
            stacklevel=3,
        )
    return np.where(zero, 1.0 + 0j, z / np.where(zero, 1.0, mag))


def pr_objective(p: PrProblem, x) -> float:
    r = np.abs(p.apply(p._x(x))) - p.magnitude
    return 0.5 * float(np.dot(r, r))


def pr_gradient(p: PrProblem, x) -> np.ndarray:
    """``L^H (L x - |y| exp(j angle(L x)))``.

    For any complex direction ``d``,
    ``f(x + eps d) - f(x) = eps * Re<g, d> + O(eps**2)``.
    """
    z = p.apply(p._x(x))
    return p.apply_adjoint(z - p.magnitude * unit_phase(z, warn=True))


def surrogate(p: PrProblem, x, anchor) -> float:
    """Quadratic majorizer ``g(x, anchor)``."""
    target = p.magnitude * unit_phase(p.apply(p._x(anchor)))
    r = p.apply(p._x(x)) - target
    return 0.5 * float(np.vdot(r, r).real)


def normal_residual(p: PrProblem, x, target) -> float:
    """``|| L^H L x - L^H target ||`` for the surrogate least-squares system."""
    z = p.apply(p._x(x))
    return float(np.linalg.norm(p.apply_adjoint(z - target)))


def _least_squares(p: PrProblem, target):
    L = p.dense()
    x, _, rank, _ = scipy.linalg.lstsq(L, target, lapack_driver="gelsd")
    return x, rank < L.shape[1]


def mm_step(p: PrProblem, x) -> np.ndarray:
    """One MM update; the minimum-norm solution is used if ``L`` is rank deficient."""
    target = p.magnitude * unit_phase(p.apply(p._x(x)), warn=True)
    x_new, deficient = _least_squares(p, target)
    if deficient:
        warnings.warn(
            "surrogate system is rank deficient, returning minimum-norm solution",
            RankDeficientWarning,
            stacklevel=2,
        )
    return x_new


def mm_solve(p: PrProblem, x0, max_iters: int = 100, tol: float = 1e-12) -> PrState:
    """Iterate :func:`mm_step` until the objective change drops below
    ``tol * max(1, f(x0))`` or ``max_iters`` steps were taken."""
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if tol < 0:
        raise ValueError("tol must be >= 0")
    x = p._x(x0).copy()
    f = pr_objective(p, x)
    scale = max(1.0, f)
    state = PrState(x=x, objective=f, history=[f])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RankDeficientWarning)
        for k in range(1, max_iters + 1):
            x = mm_step(p, x)
            f_new = pr_objective(p, x)
            state.x, state.objective, state.iteration = x, f_new, k
            state.history.append(f_new)
            if abs(f - f_new) <= tol * scale:
                break
            f = f_new
    state.rank_deficient = any(
        issubclass(w.category, RankDeficientWarning) for w in caught
    )
    for w in caught:
        if not issubclass(w.category, RankDeficientWarning):
            warnings.warn_explicit(w.message, w.category, w.filename, w.lineno)
    return state
