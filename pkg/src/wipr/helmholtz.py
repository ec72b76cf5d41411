"""Discrete 2D Helmholtz operator with PML and mass spreading.

The operator is ``A(m) = Lap + omega**2 * C diag(m) B`` where ``Lap`` is the
5-point Laplacian written in complex-stretched coordinates, ``C`` the diagonal
PML scaling of the mass term and ``B`` the mass-spreading (anti-lumped) matrix.

Stretched coordinates ``d/dx -> (1/sx) d/dx`` are multiplied through by
``sx * sz`` so the Laplacian part reads::

    d/dx (sz/sx d/dx u) + d/dz (sx/sz d/dz u)

and ``C = diag(sx * sz)``.  Nodes beyond the grid edge are treated as zero
(Dirichlet), which the PML makes irrelevant.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import Grid2D, ModelField

__all__ = [
    "PmlProfile",
    "StencilConfig",
    "HelmholtzSystem",
    "SolverError",
    "stretch_factors",
    "laplacian_operator",
    "mass_spreading",
    "assemble",
    "forward_solve",
    "apply",
    "apply_adjoint",
    "apply_laplacian_part",
]


class SolverError(RuntimeError):
    """Sparse factorization or solve failed."""


@dataclass(frozen=True)
class PmlProfile:
    """Quadratic PML of ``thickness`` cells on each of the four edges.

    The stretching factor at distance ``d`` cells into the layer is
    ``1 + 1j * amplitude * (d / thickness)**2``.
    """

    thickness: int = 10
    amplitude: float = 6.0

    def __post_init__(self):
        if self.thickness < 0:
            raise ValueError("PML thickness must be >= 0")
        if self.amplitude < 0:
            raise ValueError("PML amplitude must be >= 0")

    def factors(self, count: int, positions) -> np.ndarray:
        """Stretching factors at (possibly half-integer) node positions."""
        x = np.asarray(positions, dtype=float)
        if self.thickness == 0:
            return np.ones(x.shape, dtype=complex)
        t = self.thickness
        depth = np.maximum.reduce([np.zeros_like(x), t - x, x - (count - 1 - t)])
        return 1.0 + 1j * self.amplitude * (depth / t) ** 2


@dataclass(frozen=True)
class StencilConfig:
    """Mass spreading ``B u = wc * u_i + wn * (sum of 4 neighbours)``.

    ``lumped=True`` selects ``B = I`` regardless of the weights.
    """

    center_weight: float = 1.0
    lumped: bool = True

    def __post_init__(self):
        if not 0.0 < self.center_weight <= 1.0:
            raise ValueError("center weight must lie in (0, 1]")

    @classmethod
    def anti_lumped(cls, neighbor_weight: float = 1.0 / 12.0) -> "StencilConfig":
        return cls(center_weight=1.0 - 4.0 * neighbor_weight, lumped=False)

    @property
    def neighbor_weight(self) -> float:
        return 0.0 if self.lumped else (1.0 - self.center_weight) / 4.0


def stretch_factors(grid: Grid2D, pml: PmlProfile):
    """Per-axis stretching at nodes and at half points.

    Returns ``(sx, sx_half, sz, sz_half)``; the half arrays have one more
    entry than the node arrays and start at position ``-1/2``.
    """
    sx = pml.factors(grid.nx, np.arange(grid.nx))
    sz = pml.factors(grid.nz, np.arange(grid.nz))
    sx_half = pml.factors(grid.nx, np.arange(grid.nx + 1) - 0.5)
    sz_half = pml.factors(grid.nz, np.arange(grid.nz + 1) - 0.5)
    return sx, sx_half, sz, sz_half


def _check_pml(grid: Grid2D, pml: PmlProfile):
    if 2 * pml.thickness >= min(grid.nx, grid.nz):
        raise ValueError(
            f"PML thickness {pml.thickness} too large for a {grid.nx}x{grid.nz} grid"
        )


def laplacian_operator(grid: Grid2D, pml: PmlProfile) -> sp.csr_matrix:
    """Stretched 5-point Laplacian (the ``Lap`` part of ``A``)."""
    _check_pml(grid, pml)
    nx, nz, h2 = grid.nx, grid.nz, grid.h**2
    sx, sx_half, sz, sz_half = stretch_factors(grid, pml)

    # coefficient on each x-edge (ix +/- 1/2, iz) and z-edge (ix, iz +/- 1/2)
    ax = sz[None, :] / sx_half[:, None] / h2  # (nx+1, nz)
    az = sx[:, None] / sz_half[None, :] / h2  # (nx, nz+1)

    idx = np.arange(grid.n).reshape(nx, nz)
    diag = -(ax[:-1] + ax[1:] + az[:, :-1] + az[:, 1:])
    rows = [idx.ravel()]
    cols = [idx.ravel()]
    vals = [diag.ravel()]
    # x neighbours: edge ix+1/2 couples (ix, iz) <-> (ix+1, iz)
    e = ax[1:-1]
    rows += [idx[:-1].ravel(), idx[1:].ravel()]
    cols += [idx[1:].ravel(), idx[:-1].ravel()]
    vals += [e.ravel(), e.ravel()]
    e = az[:, 1:-1]
    rows += [idx[:, :-1].ravel(), idx[:, 1:].ravel()]
    cols += [idx[:, 1:].ravel(), idx[:, :-1].ravel()]
    vals += [e.ravel(), e.ravel()]
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(grid.n, grid.n),
    )


def mass_spreading(grid: Grid2D, stencil: StencilConfig) -> sp.csr_matrix:
    """The real mass-spreading matrix ``B``."""
    if stencil.lumped:
        return sp.identity(grid.n, format="csr")
    wn = stencil.neighbor_weight
    ex = sp.diags([1.0, 1.0], [-1, 1], shape=(grid.nx, grid.nx))
    ez = sp.diags([1.0, 1.0], [-1, 1], shape=(grid.nz, grid.nz))
    nbr = sp.kron(ex, sp.identity(grid.nz)) + sp.kron(sp.identity(grid.nx), ez)
    return (stencil.center_weight * sp.identity(grid.n) + wn * nbr).tocsr()


def pml_scaling(grid: Grid2D, pml: PmlProfile) -> np.ndarray:
    """Diagonal of ``C``: ``sx * sz`` at every node, z-fastest."""
    sx, _, sz, _ = stretch_factors(grid, pml)
    return np.outer(sx, sz).ravel()


class HelmholtzSystem:
    """Assembled ``A(m)`` for one angular frequency.

    The Laplacian and mass parts are kept separately; ``matrix`` is their sum.
    The sparse LU factorization is computed on first use and reused.
    """

    def __init__(self, model: ModelField, omega: float, pml: PmlProfile,
                 stencil: StencilConfig, laplacian=None, spreading=None):
        if not (np.isfinite(omega) and omega > 0):
            raise ValueError(f"angular frequency must be positive, got {omega}")
        self.model = model
        self.grid = model.grid
        self.omega = float(omega)
        self.pml = pml
        self.stencil = stencil
        self.laplacian = laplacian if laplacian is not None else laplacian_operator(self.grid, pml)
        self.spreading = spreading if spreading is not None else mass_spreading(self.grid, stencil)
        self.pml_scaling = pml_scaling(self.grid, pml)
        row_scale = self.omega**2 * self.pml_scaling * model.values
        self.mass = sp.csr_matrix(sp.diags(row_scale) @ self.spreading)
        self.matrix = (self.laplacian + self.mass).tocsr()

    @property
    def n(self) -> int:
        return self.grid.n

    @cached_property
    def adjoint_matrix(self) -> sp.csr_matrix:
        return self.matrix.conj().T.tocsr()

    @cached_property
    def lu(self):
        try:
            return spla.splu(self.matrix.tocsc())
        except RuntimeError as exc:
            raise SolverError(
                f"factorization of Helmholtz operator failed at omega={self.omega:g}: {exc}"
            ) from exc

    def virtual_source_diagonal(self, u) -> np.ndarray:
        """Diagonal of ``omega**2 * C diag(B u)``."""
        return self.omega**2 * self.pml_scaling * (self.spreading @ u)


def assemble(m: ModelField, omega: float, pml: PmlProfile | None = None,
             stencil: StencilConfig | None = None) -> HelmholtzSystem:
    """Assemble ``A(m)`` at angular frequency ``omega`` (rad/s)."""
    return HelmholtzSystem(m, omega, pml or PmlProfile(), stencil or StencilConfig())


def _check_vector(system, x):
    x = np.asarray(x)
    if x.shape[0] != system.n:
        raise ValueError(f"vector has length {x.shape[0]}, operator dimension is {system.n}")
    return x


def forward_solve(system: HelmholtzSystem, b, rtol: float = 1e-10, refine: int = 3):
    """Solve ``A u = b`` with the cached LU; ``b`` may hold several columns.

    A few steps of iterative refinement are taken if the first residual
    exceeds ``rtol``; failure to reach it raises :class:`SolverError`.
    """
    b = _check_vector(system, b).astype(complex)
    u = system.lu.solve(b)
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return np.zeros_like(b)
    for _ in range(refine + 1):
        r = b - system.matrix @ u
        rel = np.linalg.norm(r) / bnorm
        if not np.isfinite(rel):
            break
        if rel <= rtol:
            return u
        u = u + system.lu.solve(r)
    raise SolverError(
        f"Helmholtz solve did not converge at omega={system.omega:g}: "
        f"relative residual {rel:.3e} > {rtol:.1e}; operator is numerically singular"
    )


def apply(system: HelmholtzSystem, x):
    return system.matrix @ _check_vector(system, x)


def apply_adjoint(system: HelmholtzSystem, x):
    return system.adjoint_matrix @ _check_vector(system, x)


def apply_laplacian_part(system: HelmholtzSystem, u):
    return system.laplacian @ _check_vector(system, u)
