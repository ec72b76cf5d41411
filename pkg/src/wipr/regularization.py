"""Tikhonov-TV (TT) regularized model update with bound constraints.

The update solves::

    min_{m1, m2}  tv * TV(m1) + alpha * Tikh(m2) + fit * ||L (m1 + m2) - y||^2
    subject to    lower <= m1 + m2 <= upper

by variable splitting: ``p ~ grad m1`` (shrinkage), ``t ~ hess m2`` (closed
form) and ``w ~ m1 + m2`` (clamp), each with a running-sum dual variable.

Weights are applied in normalized units so that defaults are meaningful for
any frequency and model scale: the model is divided by the mean of the first
starting model, and the data misfit by the mean diagonal of ``Re(L^H L)``
times that scale squared.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import Bounds, Grid2D, ModelDecomposition
from .linalg import accumulate_normal, solve_normal

__all__ = [
    "TTConfig",
    "DifferenceOperators",
    "SplitState",
    "difference_operators",
    "tv_seminorm",
    "tikh2_seminorm",
    "isotropic_shrink",
    "project_bounds",
    "tt_objective",
    "tt_solve",
]

# fixes the constant offset that TV(m1) + Tikh(m2) cannot see
_COMPONENT_RIDGE = 1e-6


@dataclass(frozen=True)
class TTConfig:
    tv_weight: float = 0.1
    alpha: float = 1.0
    fit_weight: float = 1.0
    inner_iters: int = 10
    mu_tv: float = 1.0
    mu_tikh: float = 1.0
    mu_bound: float = 1.0
    use_bounds: bool = True

    def __post_init__(self):
        for name in ("tv_weight", "alpha", "fit_weight", "mu_tv", "mu_tikh", "mu_bound"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.inner_iters < 1:
            raise ValueError("inner_iters must be >= 1")
        if min(self.mu_tv, self.mu_tikh, self.mu_bound) <= 0:
            raise ValueError("splitting weights must be > 0")

    @property
    def is_trivial(self) -> bool:
        return self.tv_weight == 0 and self.alpha == 0


@dataclass(frozen=True, eq=False)
class DifferenceOperators:
    """Sparse first and second differences with replicate (Neumann) edges.

    Differences are taken in grid-index units (no division by ``h``).
    """

    dx: sp.csr_matrix
    dz: sp.csr_matrix
    dxx: sp.csr_matrix
    dxz: sp.csr_matrix
    dzz: sp.csr_matrix

    @property
    def gradient(self) -> sp.csr_matrix:
        return sp.vstack([self.dx, self.dz]).tocsr()

    @property
    def hessian(self) -> sp.csr_matrix:
        return sp.vstack([self.dxx, self.dxz, self.dzz]).tocsr()


def _forward_1d(n):
    # last row is zero: replicate edge
    d = sp.diags([-np.ones(n), np.ones(n - 1)], [0, 1], shape=(n, n)).tolil()
    d[n - 1, n - 1] = 0.0
    return d.tocsr()


def difference_operators(grid: Grid2D) -> DifferenceOperators:
    fx, fz = _forward_1d(grid.nx), _forward_1d(grid.nz)
    ix, iz = sp.identity(grid.nx), sp.identity(grid.nz)
    dx = sp.kron(fx, iz).tocsr()
    dz = sp.kron(ix, fz).tocsr()
    return DifferenceOperators(
        dx=dx,
        dz=dz,
        dxx=sp.kron(-(fx.T @ fx), iz).tocsr(),
        dxz=(dz @ dx).tocsr(),
        dzz=sp.kron(ix, -(fz.T @ fz)).tocsr(),
    )


def _ops(grid_or_ops):
    if isinstance(grid_or_ops, DifferenceOperators):
        return grid_or_ops
    return difference_operators(grid_or_ops)


def tv_seminorm(m, grid) -> float:
    """Isotropic TV: ``sum sqrt(dx m**2 + dz m**2)``."""
    ops = _ops(grid)
    m = np.asarray(m, dtype=float)
    return float(np.sum(np.hypot(ops.dx @ m, ops.dz @ m)))


def tikh2_seminorm(m, grid) -> float:
    """Second-order Tikhonov: ``sum dxx m**2 + 2 dxz m**2 + dzz m**2``."""
    ops = _ops(grid)
    m = np.asarray(m, dtype=float)
    return float(
        np.sum((ops.dxx @ m) ** 2 + 2.0 * (ops.dxz @ m) ** 2 + (ops.dzz @ m) ** 2)
    )


def isotropic_shrink(g, tau: float) -> np.ndarray:
    """Shrink each site's 2-vector ``g[:, i]`` in length by ``tau``."""
    if tau < 0:
        raise ValueError("threshold must be >= 0")
    g = np.asarray(g, dtype=float)
    r = np.hypot(g[0], g[1])
    scale = np.maximum(0.0, 1.0 - tau / np.where(r > 0, r, 1.0))
    return g * np.where(r > 0, scale, 0.0)


def project_bounds(m, bounds: Bounds | None):
    if bounds is None:
        return np.asarray(m, dtype=float)
    lo, hi = bounds.arrays()
    return np.clip(m, lo, hi)


@dataclass
class SplitState:
    """Auxiliary and dual variables of the splitting, in normalized units."""

    scale: float
    m1: np.ndarray
    p: np.ndarray
    t: np.ndarray
    w: np.ndarray
    dp: np.ndarray
    dt: np.ndarray
    dw: np.ndarray
    objective: list[float] = field(default_factory=list)
    # objective at each raw ADMM iterate, before the best-iterate safeguard
    raw_objective: list[float] = field(default_factory=list)

    @classmethod
    def fresh(cls, grid: Grid2D, m_init) -> "SplitState":
        n = grid.n
        scale = float(np.mean(m_init))
        return cls(
            scale=scale,
            m1=np.zeros(n),
            p=np.zeros((2, n)),
            t=np.zeros((3, n)),
            w=np.asarray(m_init, float) / scale,
            dp=np.zeros((2, n)),
            dt=np.zeros((3, n)),
            dw=np.zeros(n),
        )


_TIKH_WEIGHTS = np.array([1.0, 2.0, 1.0])[:, None]


def tt_objective(parts, m1, m2, config: TTConfig, grid, scale: float,
                 bounds: Bounds | None = None, fit_norm: float | None = None) -> float:
    """Composite objective in normalized units; ``inf`` if ``m1 + m2`` violates bounds."""
    ops = _ops(grid)
    m = m1 + m2
    if bounds is not None and config.use_bounds:
        lo, hi = bounds.arrays()
        if np.any(m < lo) or np.any(m > hi):
            return np.inf
    if fit_norm is None:
        normal, _ = accumulate_normal(parts)
        fit_norm = float(np.mean(normal.diagonal()))
    misfit = sum(float(np.sum(np.abs(L @ m - y) ** 2)) for L, y in parts)
    return (
        config.tv_weight * tv_seminorm(m1 / scale, ops)
        + config.alpha * tikh2_seminorm(m2 / scale, ops)
        + config.fit_weight * misfit / (scale**2 * fit_norm)
    )


def _recompose(m1, m, bounds, active):
    """Feasible ``m`` and ``m2`` with ``m1 + m2 == m`` bitwise."""
    # a constant moved from m1 to m2 changes neither seminorm
    m1 = m1 - np.mean(m1)
    if active:
        m = project_bounds(m, bounds)
    m2 = m - m1
    m = m1 + m2
    if active:
        # rounding can push a clamped entry one ulp outside; give it to m2
        bad = m != project_bounds(m, bounds)
        if np.any(bad):
            m = project_bounds(m, bounds)
            m1 = np.where(bad, 0.0, m1)
            m2 = np.where(bad, m, m2)
    return m1, m2, m


def tt_solve(parts, m_init, config: TTConfig, grid: Grid2D,
             bounds: Bounds | None = None, state: SplitState | None = None):
    """Regularized least-squares model update.

    Parameters
    ----------
    parts : list of (L, y)
        Complex operators and right-hand sides; the unknown model is real.
    m_init : array
        Current model (squared slowness); starting point of the smooth part.
    state : SplitState, optional
        Warm start.  Pass the same object across outer iterations to keep the
        dual variables; its ``objective`` list receives the inner trace.

    Returns
    -------
    m : ndarray
        Updated model, equal to ``m1 + m2`` and inside ``bounds`` if active.
    decomposition : ModelDecomposition
    """
    parts = list(parts)
    m_init = np.asarray(m_init, dtype=float)
    use_bounds = bounds is not None and config.use_bounds
    normal, rhs = accumulate_normal(parts)

    if config.is_trivial and not use_bounds:
        m = solve_normal(normal, rhs)
        m1 = np.zeros_like(m)
        if state is not None:
            state.objective = [tt_objective(parts, m1, m, config, grid, state.scale)]
        return m, ModelDecomposition(m1, m.copy())

    ops = _ops(grid)
    if state is None:
        state = SplitState.fresh(grid, m_init)
    s = state.scale
    fit_norm = float(np.mean(normal.diagonal()))
    if fit_norm <= 0:
        raise ValueError("data operators are identically zero")

    n = grid.n
    G, H = ops.gradient, ops.hessian
    F = 2.0 * config.fit_weight * normal / fit_norm
    rf = 2.0 * config.fit_weight * rhs / (s * fit_norm)
    eye = sp.identity(n)
    mu_w = config.mu_bound if use_bounds else 0.0
    cross = F + mu_w * eye
    top = F + config.mu_tv * (G.T @ G) + (mu_w + _COMPONENT_RIDGE) * eye
    bottom = F + config.mu_tikh * (H.T @ H) + mu_w * eye
    system = sp.bmat([[top, cross], [cross, bottom]], format="csc")
    lu = spla.splu(system)

    lo = hi = None
    if use_bounds:
        lo, hi = (np.asarray(b) / s for b in bounds.arrays())

    x1 = state.m1 / s
    x2 = m_init / s - x1

    def evaluate(x1, x2):
        m1, m2, m = _recompose(x1 * s, (x1 + x2) * s, bounds, use_bounds)
        f = tt_objective(parts, m1, m2, config, ops, s, bounds if use_bounds else None, fit_norm)
        return f, m1, m2, m

    best = evaluate(x1, x2)
    trace = [best[0]]
    raw = [best[0]]
    for _ in range(config.inner_iters):
        b1 = rf + config.mu_tv * (G.T @ (state.p - state.dp).ravel())
        b2 = rf + config.mu_tikh * (H.T @ (state.t - state.dt).ravel())
        if use_bounds:
            b1 = b1 + mu_w * (state.w - state.dw)
            b2 = b2 + mu_w * (state.w - state.dw)
        x = lu.solve(np.concatenate([b1, b2]))
        x1, x2 = x[:n], x[n:]

        g1 = (G @ x1).reshape(2, n)
        h2 = (H @ x2).reshape(3, n)
        state.p = isotropic_shrink(g1 + state.dp, config.tv_weight / config.mu_tv)
        v = h2 + state.dt
        state.t = config.mu_tikh * v / (2.0 * config.alpha * _TIKH_WEIGHTS + config.mu_tikh)
        state.dp = state.dp + g1 - state.p
        state.dt = state.dt + h2 - state.t
        if use_bounds:
            state.w = np.clip(x1 + x2 + state.dw, lo, hi)
            state.dw = state.dw + x1 + x2 - state.w

        cand = evaluate(x1, x2)
        raw.append(cand[0])
        # keep the best iterate so the reported objective never increases
        if cand[0] <= best[0]:
            best = cand
        trace.append(best[0])

    _, m1, m2, m = best
    state.m1 = m1
    state.objective = trace
    state.raw_objective = raw
    return m, ModelDecomposition(m1, m2)
