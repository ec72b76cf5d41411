"""Iteratively refined wavefield reconstruction inversion, with or without
phase retrieval in the model update.

One outer iteration for a batch of frequencies:

1. reconstruct wavefields from the augmented system
   ``(lam A^H A + P^H P) u = lam A^H (b + b_k) + P^H (d + d_k)``;
2. form virtual sources ``L(u) = omega**2 C diag(B u)`` and right-hand sides
   ``y = b + b_k - Lap u``;
3. update the real model from ``L m ~ y`` (least squares), from
   ``|L m| ~ |y|`` (one MM phase-retrieval step), optionally with TT
   regularization and bounds;
4. reassemble ``A`` and add the source and data residuals to the running-sum
   multipliers ``b_k`` and ``d_k``.
"""

from __future__ import annotations

import csv
import enum
import io
import logging
import time
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import Bounds, Grid2D, ModelField
from .helmholtz import (
    HelmholtzSystem,
    PmlProfile,
    SolverError,
    StencilConfig,
    assemble,
    forward_solve,
    laplacian_operator,
    mass_spreading,
    pml_scaling,
)
from .linalg import accumulate_normal, solve_normal
from .phase_retrieval import unit_phase
from .regularization import SplitState, TTConfig, project_bounds, tt_solve

__all__ = [
    "Mode",
    "AcquisitionSet",
    "Dataset",
    "MultiplierState",
    "InversionConfig",
    "LogRecord",
    "IterationLog",
    "ConfigurationError",
    "surface_acquisition",
    "ricker_spectrum",
    "simulate_data",
    "AugmentedSolver",
    "reconstruct_wavefield",
    "virtual_source",
    "update_model_ls",
    "phase_align",
    "update_model_pr",
    "update_multipliers",
    "stopping_check",
    "default_penalty",
    "run_batch",
    "run_inversion",
    "bilinear_recovery",
    "model_error",
]

log = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    """Inconsistent inversion setup, detected before any solve."""


class Mode(str, enum.Enum):
    IRWRI = "irwri"
    WIPR = "wipr"


# ---------------------------------------------------------------------------
# acquisition and data


@dataclass(frozen=True, eq=False)
class AcquisitionSet:
    """Point sources and receivers on grid nodes.

    ``sources`` and ``receivers`` are integer arrays of ``(ix, iz)`` rows.
    """

    grid: Grid2D
    sources: np.ndarray
    receivers: np.ndarray
    amplitudes: np.ndarray | None = None
    pml_thickness: int = 0

    def __post_init__(self):
        src = np.atleast_2d(np.asarray(self.sources, dtype=int))
        rec = np.atleast_2d(np.asarray(self.receivers, dtype=int))
        amp = (np.ones(len(src), dtype=complex) if self.amplitudes is None
               else np.asarray(self.amplitudes, dtype=complex).ravel())
        if amp.shape != (len(src),):
            raise ValueError("one amplitude per source is required")
        t = self.pml_thickness
        for name, pos in (("source", src), ("receiver", rec)):
            if pos.ndim != 2 or pos.shape[1] != 2 or len(pos) == 0:
                raise ValueError(f"{name} positions must be a nonempty (k, 2) array")
            ok = ((pos[:, 0] >= t) & (pos[:, 0] < self.grid.nx - t)
                  & (pos[:, 1] >= t) & (pos[:, 1] < self.grid.nz - t))
            if not np.all(ok):
                raise ValueError(f"{name} positions must lie inside the physical domain")
        object.__setattr__(self, "sources", src)
        object.__setattr__(self, "receivers", rec)
        object.__setattr__(self, "amplitudes", amp)

    @property
    def n_sources(self) -> int:
        return len(self.sources)

    @property
    def n_receivers(self) -> int:
        return len(self.receivers)

    @cached_property
    def sampling(self) -> sp.csr_matrix:
        """Sampling operator ``P`` (receivers x nodes)."""
        cols = self.grid.index(self.receivers[:, 0], self.receivers[:, 1])
        nr = self.n_receivers
        return sp.csr_matrix((np.ones(nr), (np.arange(nr), cols)), shape=(nr, self.grid.n))

    def source_vectors(self, scale=1.0) -> np.ndarray:
        """Right-hand sides ``b`` as columns, shape ``(n, n_sources)``."""
        b = np.zeros((self.grid.n, self.n_sources), dtype=complex)
        k = self.grid.index(self.sources[:, 0], self.sources[:, 1])
        b[k, np.arange(self.n_sources)] = self.amplitudes * scale
        return b


def surface_acquisition(grid: Grid2D, pml_thickness: int, src_spacing: int,
                        rec_spacing: int, src_depth: int = 1, rec_depth: int = 1,
                        amplitude: complex = 1.0) -> AcquisitionSet:
    """Sources and receivers along horizontal lines just below the top PML.

    Depths are counted in cells from the top of the physical domain.
    """
    t = pml_thickness
    xs = np.arange(t, grid.nx - t, src_spacing)
    xr = np.arange(t, grid.nx - t, rec_spacing)
    src = np.column_stack([xs, np.full(xs.size, t + src_depth)])
    rec = np.column_stack([xr, np.full(xr.size, t + rec_depth)])
    return AcquisitionSet(grid, src, rec, np.full(xs.size, amplitude, dtype=complex), t)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observed data ``values[f, s, r]`` at ascending ``frequencies`` (Hz)."""

    frequencies: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.frequencies, dtype=float).ravel()
        v = np.asarray(self.values, dtype=complex)
        if v.ndim != 3 or v.shape[0] != f.size:
            raise ValueError("values must have shape (n_freq, n_src, n_rec)")
        if np.any(np.diff(f) <= 0):
            raise ValueError("frequencies must be strictly ascending")
        object.__setattr__(self, "frequencies", f)
        object.__setattr__(self, "values", v)

    def index(self, freq: float) -> int:
        k = np.flatnonzero(np.isclose(self.frequencies, freq, rtol=0, atol=1e-9))
        if k.size == 0:
            raise KeyError(f"frequency {freq:g} Hz not in data")
        return int(k[0])

    def __contains__(self, freq) -> bool:
        return bool(np.any(np.isclose(self.frequencies, freq, rtol=0, atol=1e-9)))

    def at(self, freq: float) -> np.ndarray:
        """Data for one frequency as receiver x source columns."""
        return self.values[self.index(freq)].T


def ricker_spectrum(freq, peak: float) -> np.ndarray:
    """Amplitude spectrum of a Ricker wavelet with peak frequency ``peak``."""
    r = (np.asarray(freq, dtype=float) / peak) ** 2
    return 2.0 / np.sqrt(np.pi) * r / peak * np.exp(-r)


def _source_scale(freq, wavelet_peak):
    return 1.0 if wavelet_peak is None else float(ricker_spectrum(freq, wavelet_peak))


def simulate_data(m_true: ModelField, acq: AcquisitionSet, frequencies,
                  pml: PmlProfile | None = None, stencil: StencilConfig | None = None,
                  wavelet_peak: float | None = None) -> Dataset:
    """Sample ``A(m_true)^{-1} b`` at the receivers for every frequency and source."""
    frequencies = np.sort(np.asarray(frequencies, dtype=float))
    out = np.empty((frequencies.size, acq.n_sources, acq.n_receivers), dtype=complex)
    for k, f in enumerate(frequencies):
        system = assemble(m_true, 2 * np.pi * f, pml, stencil)
        try:
            u = forward_solve(system, acq.source_vectors(_source_scale(f, wavelet_peak)))
        except SolverError as exc:
            raise SolverError(f"forward modeling failed at {f:g} Hz: {exc}") from exc
        out[k] = (acq.sampling @ u).T
    return Dataset(frequencies, out)


# ---------------------------------------------------------------------------
# wavefield reconstruction and model updates


class AugmentedSolver:
    """Factorized ``lam A^H A + P^H P`` for one ``(m, omega, lam)``; reused across sources."""

    def __init__(self, system: HelmholtzSystem, sampling, lam: float):
        if not lam > 0:
            raise ValueError("penalty weight must be positive")
        self.system = system
        self.P = sp.csr_matrix(sampling)
        self.lam = float(lam)
        A = system.matrix
        K = self.lam * (system.adjoint_matrix @ A) + (self.P.T @ self.P)
        try:
            self.lu = spla.splu(sp.csc_matrix(K))
        except RuntimeError as exc:
            raise SolverError(f"augmented system factorization failed: {exc}") from exc

    def rhs(self, b_aug, d_aug):
        return self.lam * (self.system.adjoint_matrix @ b_aug) + self.P.T @ d_aug

    def solve(self, b_aug, d_aug, rtol: float = 1e-10, max_refine: int = 5):
        A = self.system.matrix
        rhs = self.rhs(b_aug, d_aug)
        scale = np.linalg.norm(rhs)
        u = self.lu.solve(rhs)
        if scale == 0:
            return u
        # refine with residuals computed from A and P, not the squared operator
        for _ in range(max_refine):
            r = (self.lam * (self.system.adjoint_matrix @ (b_aug - A @ u))
                 + self.P.T @ (d_aug - self.P @ u))
            if np.linalg.norm(r) <= rtol * scale:
                break
            u = u + self.lu.solve(r)
        return u


def reconstruct_wavefield(system: HelmholtzSystem, acq: AcquisitionSet, d_aug, b_aug,
                          lam: float) -> np.ndarray:
    """Wavefields fitting both ``A u = b_aug`` (weight ``lam``) and ``P u = d_aug``."""
    return AugmentedSolver(system, acq.sampling, lam).solve(
        np.asarray(b_aug, dtype=complex), np.asarray(d_aug, dtype=complex))


def virtual_source(system: HelmholtzSystem, u, b_aug):
    """``(L, y)`` with ``L = omega**2 C diag(B u)`` and ``y = b_aug - Lap u``.

    ``L @ system.model.values`` equals ``system.mass @ u``.
    """
    u = np.asarray(u)
    if u.shape != (system.n,):
        raise ValueError(f"wavefield must have shape ({system.n},)")
    L = sp.diags(system.virtual_source_diagonal(u), format="csr")
    return L, np.asarray(b_aug) - system.laplacian @ u


def update_model_ls(parts, bounds: Bounds | None = None) -> np.ndarray:
    """Real least-squares model ``argmin sum ||L_s m - y_s||^2``, then clamped to ``bounds``."""
    normal, rhs = accumulate_normal(parts)
    m = solve_normal(normal, rhs)
    return project_bounds(m, bounds)


def phase_align(L, m_k, y) -> np.ndarray:
    """``|y| exp(j angle(L m_k))``: magnitudes of ``y`` with the predicted phase."""
    y = np.asarray(y)
    pred = L @ np.asarray(m_k)
    if pred.shape != y.shape:
        raise ValueError("operator output and right-hand side differ in shape")
    return np.abs(y) * unit_phase(pred)


def update_model_pr(parts, m_k, bounds: Bounds | None = None) -> np.ndarray:
    """One MM phase-retrieval step on ``|L m| ~ |y|`` anchored at ``m_k``."""
    return update_model_ls([(L, phase_align(L, m_k, y)) for L, y in parts], bounds)


@dataclass(frozen=True, eq=False)
class MultiplierState:
    """Running sums ``b_k`` (n x sources) and ``d_k`` (receivers x sources) per frequency."""

    source: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)

    @classmethod
    def zeros(cls, frequencies, n: int, n_src: int, n_rec: int) -> "MultiplierState":
        return cls(
            {f: np.zeros((n, n_src), dtype=complex) for f in frequencies},
            {f: np.zeros((n_rec, n_src), dtype=complex) for f in frequencies},
        )

    def get(self, freq, n, n_src, n_rec):
        return (self.source.get(freq, np.zeros((n, n_src), dtype=complex)),
                self.data.get(freq, np.zeros((n_rec, n_src), dtype=complex)))


def update_multipliers(state: MultiplierState, freq: float, system: HelmholtzSystem, u,
                       b, d, sampling) -> MultiplierState:
    """Add ``b - A u`` and ``d - P u`` to the multipliers of ``freq``.

    ``system`` must already hold the updated model.
    """
    u = np.asarray(u)
    if u.shape[0] != system.n:
        raise ValueError("wavefield length does not match the operator")
    bk, dk = state.get(freq, system.n, u.shape[1] if u.ndim > 1 else 1, sampling.shape[0])
    src = dict(state.source)
    dat = dict(state.data)
    src[freq] = bk + (b - system.matrix @ u)
    dat[freq] = dk + (d - sampling @ u)
    return MultiplierState(src, dat)


def stopping_check(source_residual: float, data_residual: float, eps_source: float = 1e-3,
                   eps_data: float = 1e-5, iteration: int = 0, max_iters: int = 30) -> bool:
    """True when both residual norms are under their thresholds, or at the cap."""
    if iteration >= max_iters:
        return True
    return source_residual <= eps_source and data_residual <= eps_data


def model_error(m, m_true) -> float:
    """``100 * ||m - m_true||_1 / ||m_true||_1`` in percent."""
    m = m.values if isinstance(m, ModelField) else np.asarray(m, dtype=float)
    mt = m_true.values if isinstance(m_true, ModelField) else np.asarray(m_true, dtype=float)
    if m.shape != mt.shape:
        raise ValueError("models are on different grids")
    return 100.0 * float(np.sum(np.abs(m - mt)) / np.sum(np.abs(mt)))


# ---------------------------------------------------------------------------
# driver


@dataclass(frozen=True)
class InversionConfig:
    """Settings for :func:`run_batch` and :func:`run_inversion`.

    ``modes`` gives the update mode per batch; the last entry repeats, so
    ``(Mode.WIPR, Mode.IRWRI)`` runs phase retrieval on the first batch only.
    ``lam`` fixes the penalty weight; otherwise :func:`default_penalty` with
    ``penalty_rule`` is evaluated at the start of each batch.
    """

    schedule: Sequence[Sequence[float]]
    modes: Sequence[Mode] = (Mode.IRWRI,)
    lam0: float = 1e-2
    lam: float | None = None
    penalty_rule: str = "data-ratio"
    max_iters: int = 30
    eps_source: float = 1e-3
    eps_data: float = 1e-5
    regularization: TTConfig | None = None
    bounds: Bounds | None = None
    bounds_start: int = 1
    carry_multipliers: bool = False
    update_pml: bool = False
    pml: PmlProfile = field(default_factory=PmlProfile)
    stencil: StencilConfig = field(default_factory=StencilConfig)
    wavelet_peak: float | None = None

    def __post_init__(self):
        schedule = tuple(tuple(float(f) for f in batch) for batch in self.schedule)
        if not schedule or any(len(b) == 0 for b in schedule):
            raise ConfigurationError("frequency schedule must be a nonempty list of batches")
        if any(f <= 0 for b in schedule for f in b):
            raise ConfigurationError("frequencies must be positive")
        modes = tuple(Mode(m) for m in self.modes)
        if not modes:
            raise ConfigurationError("at least one mode is required")
        object.__setattr__(self, "schedule", schedule)
        object.__setattr__(self, "modes", modes)
        if not self.lam0 > 0 or (self.lam is not None and not self.lam > 0):
            raise ConfigurationError("penalty weight must be positive")
        if self.penalty_rule not in PENALTY_RULES:
            raise ConfigurationError(f"penalty_rule must be one of {PENALTY_RULES}")
        if not (self.eps_source > 0 and self.eps_data > 0):
            raise ConfigurationError("stopping tolerances must be positive")
        if self.max_iters < 1:
            raise ConfigurationError("max_iters must be >= 1")

    def mode_for(self, batch: int) -> Mode:
        return self.modes[min(batch, len(self.modes) - 1)]


@dataclass
class LogRecord:
    iter: int
    freq_batch: int
    mode: str
    data_residual: float
    source_residual: float
    model_error: float
    lam: float
    seconds: float


CSV_COLUMNS = ("iter", "freq_batch", "mode", "data_residual", "source_residual",
               "model_error", "lambda", "seconds")


class IterationLog(list):
    """Append-only list of :class:`LogRecord` with CSV round trip."""

    def to_csv(self, path=None, record_timing: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self:
            w.writerow([r.iter, r.freq_batch, r.mode, repr(r.data_residual),
                        repr(r.source_residual), repr(r.model_error), repr(r.lam),
                        repr(r.seconds) if record_timing else "0.0"])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "IterationLog":
        out = cls()
        with open(path, newline="") as fh:
            rows = csv.reader(fh)
            header = next(rows, None)
            if header is None or tuple(header) != CSV_COLUMNS:
                raise ValueError(f"{path}:1: expected header {','.join(CSV_COLUMNS)}")
            for lineno, row in enumerate(rows, start=2):
                try:
                    if len(row) != len(CSV_COLUMNS):
                        raise ValueError(f"expected {len(CSV_COLUMNS)} fields, got {len(row)}")
                    out.append(LogRecord(int(row[0]), int(row[1]), row[2], float(row[3]),
                                         float(row[4]), float(row[5]), float(row[6]),
                                         float(row[7])))
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno}: malformed row: {exc}") from None
        return out


@dataclass
class BatchResult:
    model: ModelField
    multipliers: MultiplierState
    log: IterationLog
    wavefields: dict
    # inner objective trace of every regularized update, in order
    tt_traces: list = field(default_factory=list)


PENALTY_RULES = ("data-ratio", "balanced")


def default_penalty(systems: dict, lam0: float, acq: AcquisitionSet | None = None,
                    data: Dataset | None = None, rule: str = "data-ratio",
                    wavelet_peak: float | None = None) -> float:
    """Penalty weight for one batch.

    ``"data-ratio"`` gives ``lam0 * ||P^H d||^2 / ||A^H b||^2`` summed over the
    batch (needs ``acq`` and ``data``).  ``"balanced"`` gives
    ``lam0 / max diag(A^H A)``, which weighs the wave equation against the
    unit diagonal of ``P^H P`` independently of grid spacing and data scale;
    with ``lam0 = 1e-2`` the data are fitted from the first iteration.
    """
    if rule == "balanced":
        peak = 0.0
        for system in systems.values():
            col_norms = np.asarray(abs(system.matrix).power(2).sum(axis=0)).ravel()
            peak = max(peak, float(col_norms.max()))
        return lam0 / peak
    if rule != "data-ratio":
        raise ConfigurationError(f"unknown penalty rule {rule!r}")
    if acq is None or data is None:
        raise ValueError("the data-ratio rule needs the acquisition and the data")
    num = den = 0.0
    P = acq.sampling
    for f, system in systems.items():
        num += np.linalg.norm(P.T @ data.at(f)) ** 2
        b = acq.source_vectors(_source_scale(f, wavelet_peak))
        den += np.linalg.norm(system.adjoint_matrix @ b) ** 2
    if not (num > 0 and den > 0):
        raise ConfigurationError("data-ratio penalty undefined for zero data or sources")
    return lam0 * num / den


def _positive(values, floor_ref):
    bad = ~(values > 0)
    if np.any(bad):
        warnings.warn(f"{int(bad.sum())} non-positive model values clamped", RuntimeWarning,
                      stacklevel=3)
        values = np.where(bad, 1e-6 * floor_ref, values)
    return values


class _UpdateDomain:
    """Cells whose model values are inverted for.

    With ``thickness > 0`` only the physical domain is updated; PML cells
    copy the nearest physical cell, since the absorbing layer constrains
    them poorly.
    """

    def __init__(self, grid: Grid2D, thickness: int):
        self.grid = grid
        self.t = int(thickness)
        if self.t:
            self.sub = Grid2D(grid.nx - 2 * self.t, grid.nz - 2 * self.t, grid.h)
            mask = np.zeros(grid.shape, dtype=bool)
            mask[self.t:-self.t, self.t:-self.t] = True
            self.index = np.flatnonzero(mask.ravel())
        else:
            self.sub = grid
            self.index = None

    def restrict(self, v):
        return v if self.index is None else np.asarray(v)[self.index]

    def restrict_parts(self, parts):
        if self.index is None:
            return parts
        k = self.index
        return [(sp.csr_matrix(L)[k][:, k], np.asarray(y)[k]) for L, y in parts]

    def restrict_bounds(self, bounds: Bounds | None):
        if bounds is None or self.index is None:
            return bounds
        lo, hi = bounds.arrays()
        pick = (lambda a: a[self.index] if np.ndim(a) else a)
        return Bounds(pick(np.asarray(lo)), pick(np.asarray(hi)))

    def embed(self, sub_values):
        if self.index is None:
            return sub_values
        return np.pad(np.asarray(sub_values).reshape(self.sub.shape), self.t,
                      mode="edge").ravel()


def run_batch(config: InversionConfig, m: ModelField, acq: AcquisitionSet, data: Dataset,
              frequencies, mode: Mode | str = Mode.IRWRI, m_true: ModelField | None = None,
              batch_index: int = 0, multipliers: MultiplierState | None = None,
              log_: IterationLog | None = None, iteration_offset: int = 0) -> BatchResult:
    """Run the iteratively refined outer loop on one batch of frequencies."""
    mode = Mode(mode)
    frequencies = [float(f) for f in frequencies]
    for f in frequencies:
        if f not in data:
            raise ConfigurationError(f"frequency {f:g} Hz not present in the data")
    grid = m.grid
    n, ns, nr = grid.n, acq.n_sources, acq.n_receivers
    P = acq.sampling
    lap = laplacian_operator(grid, config.pml)
    spread = mass_spreading(grid, config.stencil)
    b = {f: acq.source_vectors(_source_scale(f, config.wavelet_peak)) for f in frequencies}
    d = {f: data.at(f) for f in frequencies}
    mult = multipliers or MultiplierState.zeros(frequencies, n, ns, nr)
    log_ = IterationLog() if log_ is None else log_
    domain = _UpdateDomain(grid, 0 if config.update_pml else config.pml.thickness)
    split = SplitState.fresh(domain.sub, domain.restrict(m.values)) \
        if config.regularization else None
    ref = float(np.mean(m.values))

    def build(model):
        return {f: HelmholtzSystem(model, 2 * np.pi * f, config.pml, config.stencil, lap, spread)
                for f in frequencies}

    systems = build(m)
    lam = config.lam if config.lam is not None else default_penalty(
        systems, config.lam0, acq, data, config.penalty_rule, config.wavelet_peak)
    wavefields = {}
    tt_traces = []
    for k in range(1, config.max_iters + 1):
        t0 = time.perf_counter()
        parts = []
        for f in frequencies:
            bk, dk = mult.get(f, n, ns, nr)
            b_aug = b[f] + bk
            u = AugmentedSolver(systems[f], P, lam).solve(b_aug, d[f] + dk)
            wavefields[f] = u
            for s in range(ns):
                parts.append(virtual_source(systems[f], u[:, s], b_aug[:, s]))
        parts = domain.restrict_parts(parts)
        m_sub = domain.restrict(m.values)
        if mode is Mode.WIPR:
            parts = [(L, phase_align(L, m_sub, y)) for L, y in parts]
        bounds = config.bounds if (config.bounds is not None
                                   and iteration_offset + k >= config.bounds_start) else None
        bounds = domain.restrict_bounds(bounds)
        if config.regularization is not None:
            values, _ = tt_solve(parts, m_sub, config.regularization, domain.sub, bounds, split)
            tt_traces.append(list(split.objective))
        else:
            values = update_model_ls(parts, bounds)
        m = ModelField(grid, _positive(domain.embed(values), ref))

        systems = build(m)
        src_res = dat_res = 0.0
        for f in frequencies:
            u = wavefields[f]
            mult = update_multipliers(mult, f, systems[f], u, b[f], d[f], P)
            src_res += np.linalg.norm(systems[f].matrix @ u - b[f]) ** 2
            dat_res += np.linalg.norm(P @ u - d[f]) ** 2
        src_res, dat_res = float(np.sqrt(src_res)), float(np.sqrt(dat_res))
        me = model_error(m, m_true) if m_true is not None else float("nan")
        log_.append(LogRecord(k, batch_index, mode.value, dat_res, src_res, me, float(lam),
                              time.perf_counter() - t0))
        log.debug("batch %d iter %d %s: data %.3e source %.3e ME %.3f",
                  batch_index, k, mode.value, dat_res, src_res, me)
        if stopping_check(src_res, dat_res, config.eps_source, config.eps_data, k,
                          config.max_iters):
            break
    return BatchResult(m, mult, log_, wavefields, tt_traces)


def run_inversion(config: InversionConfig, acq: AcquisitionSet, data: Dataset,
                  m0: ModelField, m_true: ModelField | None = None, callback=None):
    """Frequency continuation over ``config.schedule``.

    ``callback(batch_index, model)`` is called after each batch.  Returns the
    final model and the full :class:`IterationLog`.
    """
    missing = sorted({f for batch in config.schedule for f in batch if f not in data})
    if missing:
        raise ConfigurationError(
            "schedule references frequencies missing from data: "
            + ", ".join(f"{f:g}" for f in missing))
    if data.values.shape[1:] != (acq.n_sources, acq.n_receivers):
        raise ConfigurationError(
            f"data has {data.values.shape[1]} sources x {data.values.shape[2]} receivers, "
            f"acquisition has {acq.n_sources} x {acq.n_receivers}")
    full = IterationLog()
    m = m0
    mult = None
    for i, batch in enumerate(config.schedule):
        carried = mult if config.carry_multipliers else None
        res = run_batch(config, m, acq, data, batch, config.mode_for(i), m_true, i,
                        carried, full)
        m, mult = res.model, res.multipliers
        if callback is not None:
            callback(i, m)
    return m, full


# ---------------------------------------------------------------------------
# bilinearity


def bilinear_recovery(u, b, omega: float, grid: Grid2D, pml: PmlProfile | None = None,
                      stencil: StencilConfig | None = None, magnitude_only: bool = False,
                      threshold: float = 1e-12) -> np.ma.MaskedArray:
    """Recover the model from a wavefield known everywhere.

    Full variant ``(b - Lap u) / (omega**2 C B u)``; the magnitude variant
    divides magnitudes instead.  With ``B = I`` and no PML this is
    ``(1/omega**2) (1/u) * (b - Lap u)``.  Nodes where ``|B u|`` is below
    ``threshold * max|B u|`` are masked.
    """
    pml = pml or PmlProfile(thickness=0)
    stencil = stencil or StencilConfig()
    u = np.asarray(u, dtype=complex)
    y = np.asarray(b, dtype=complex) - laplacian_operator(grid, pml) @ u
    denom = omega**2 * pml_scaling(grid, pml) * (mass_spreading(grid, stencil) @ u)
    if u.shape != (grid.n,):
        raise ValueError(f"wavefield must have shape ({grid.n},)")
    mag = np.abs(denom)
    mask = ~(mag > threshold * np.max(mag))
    safe = np.where(mask, 1.0, denom)
    if magnitude_only:
        m = np.abs(y) / np.abs(safe)
    else:
        m = (y / safe).real
    return np.ma.MaskedArray(np.where(mask, np.nan, m), mask=mask)
