"""Real normal equations for complex least squares over a real unknown."""

from __future__ import annotations

import warnings

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

RIDGE = 1e-10


class RidgeFallbackWarning(RuntimeWarning):
    """The normal operator was numerically singular and a ridge was added."""


def accumulate_normal(parts):
    """Sum ``Re(L^H L)`` and ``Re(L^H y)`` over ``(L, y)`` pairs.

    The pairs are reduced in the order given so results are reproducible.
    """
    parts = list(parts)
    if not parts:
        raise ValueError("at least one (L, y) pair is required")
    normal = None
    rhs = None
    for L, y in parts:
        L = sp.csr_matrix(L)
        y = np.asarray(y)
        if L.shape[0] != y.shape[0]:
            raise ValueError(f"operator has {L.shape[0]} rows, right-hand side {y.shape[0]}")
        LH = L.conj().T
        nrm = (LH @ L).real
        r = (LH @ y).real
        normal = nrm if normal is None else normal + nrm
        rhs = r if rhs is None else rhs + r
    return sp.csr_matrix(normal), rhs


def _is_diagonal(a: sp.spmatrix) -> bool:
    coo = a.tocoo()
    return bool(np.all(coo.row == coo.col))


def solve_normal(normal, rhs, ridge: float = RIDGE):
    """Solve the symmetric positive semidefinite system ``normal @ x = rhs``.

    If the operator is numerically singular, ``ridge * trace / n`` is added to
    its diagonal and a :class:`RidgeFallbackWarning` is issued.
    """
    normal = sp.csr_matrix(normal)
    n = normal.shape[0]
    diag = normal.diagonal()
    dmax = np.max(np.abs(diag)) if n else 0.0
    eps = np.finfo(float).eps
    if _is_diagonal(normal):
        if np.min(diag) <= n * eps * dmax:
            diag = _ridge_diag(diag, ridge)
        return rhs / diag
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", spla.MatrixRankWarning)
            lu = spla.splu(normal.tocsc())
            x = lu.solve(rhs)
        if np.all(np.isfinite(x)):
            return x
    except (RuntimeError, spla.MatrixRankWarning):
        pass
    shift = _ridge_diag(diag, ridge) - diag
    return spla.splu((normal + sp.diags(shift)).tocsc()).solve(rhs)


def _ridge_diag(diag, ridge):
    shift = ridge * np.sum(diag) / diag.size
    if shift <= 0:
        shift = ridge
    warnings.warn(
        f"normal operator numerically singular, adding ridge {shift:.3e}",
        RidgeFallbackWarning,
        stacklevel=3,
    )
    return diag + shift
