"""Grid geometry, model containers, toy models and model file I/O.

All fields on the grid are stored as flat vectors of length ``nx * nz`` with
the depth index varying fastest, i.e. ``flat[ix * nz + iz]``.  Reshaping a
flat vector with ``values.reshape(nx, nz)`` therefore gives an array whose
rows are vertical logs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

__all__ = [
    "Grid2D",
    "ModelField",
    "Bounds",
    "ModelDecomposition",
    "ModelFormatError",
    "velocity_to_sq_slowness",
    "sq_slowness_to_velocity",
    "make_toy_model",
    "write_model",
    "read_model",
]

MODEL_MAGIC = b"WIPR"
MODEL_VERSION = 1
_MODEL_HEADER = struct.Struct("<4sIIId")


class ModelFormatError(ValueError):
    """Raised when a model file is malformed."""


@dataclass(frozen=True)
class Grid2D:
    """Regular 2D grid with ``nx`` columns, ``nz`` rows and spacing ``h`` (m)."""

    nx: int
    nz: int
    h: float

    def __post_init__(self):
        if int(self.nx) != self.nx or int(self.nz) != self.nz:
            raise ValueError("grid dimensions must be integers")
        if self.nx < 3 or self.nz < 3:
            raise ValueError(f"grid must be at least 3x3, got {self.nx}x{self.nz}")
        if not (np.isfinite(self.h) and self.h > 0):
            raise ValueError(f"grid spacing must be positive, got {self.h}")

    @property
    def n(self) -> int:
        return self.nx * self.nz

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.nz)

    def index(self, ix, iz):
        """Flat index of node ``(ix, iz)`` (z-fastest)."""
        return np.asarray(ix) * self.nz + np.asarray(iz)

    def unravel(self, k):
        return np.divmod(np.asarray(k), self.nz)

    def contains(self, ix, iz) -> bool:
        ix, iz = np.asarray(ix), np.asarray(iz)
        return bool(np.all((ix >= 0) & (ix < self.nx) & (iz >= 0) & (iz < self.nz)))


@dataclass(frozen=True, eq=False)
class ModelField:
    """Squared slowness (s^2/m^2) on a grid, stored z-fastest."""

    grid: Grid2D
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).ravel()
        if values.size != self.grid.n:
            raise ValueError(
                f"model has {values.size} values, grid expects {self.grid.n}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("model values must be finite")
        if not np.all(values > 0):
            raise ValueError("squared slowness must be strictly positive")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def as_array(self) -> np.ndarray:
        """Values reshaped to ``(nx, nz)``."""
        return self.values.reshape(self.grid.shape)

    def velocity(self) -> np.ndarray:
        return sq_slowness_to_velocity(self.values)

    def with_values(self, values) -> "ModelField":
        return ModelField(self.grid, values)


@dataclass(frozen=True)
class Bounds:
    """Box constraint ``lower <= m <= upper`` in squared-slowness units.

    Each side is either a scalar or an array broadcastable to the model.
    """

    lower: float | np.ndarray
    upper: float | np.ndarray

    def __post_init__(self):
        lo = np.asarray(self._raw(self.lower), dtype=float)
        hi = np.asarray(self._raw(self.upper), dtype=float)
        if not np.all(lo < hi):
            raise ValueError("bounds require lower < upper elementwise")

    @staticmethod
    def _raw(v):
        return v.values if isinstance(v, ModelField) else v

    @classmethod
    def from_velocity(cls, vmin, vmax) -> "Bounds":
        # slow velocities give large squared slowness
        return cls(lower=1.0 / np.square(vmax), upper=1.0 / np.square(vmin))

    def arrays(self):
        return (
            np.asarray(self._raw(self.lower), dtype=float),
            np.asarray(self._raw(self.upper), dtype=float),
        )


@dataclass(frozen=True, eq=False)
class ModelDecomposition:
    """Blocky (``m1``) plus smooth (``m2``) split of a model.

    The components are plain arrays because either may take negative values.
    """

    m1: np.ndarray
    m2: np.ndarray

    def compose(self) -> np.ndarray:
        return self.m1 + self.m2


def velocity_to_sq_slowness(v, grid: Grid2D | None = None):
    """Convert velocity (m/s) to squared slowness ``1 / v**2``.

    Returns a :class:`ModelField` when ``grid`` is given, otherwise an array.
    """
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)) or not np.all(v > 0):
        raise ValueError("velocity must be positive and finite")
    m = 1.0 / (v * v)
    if grid is None:
        return m
    return ModelField(grid, np.broadcast_to(m, grid.shape) if m.ndim == 0 else m)


def sq_slowness_to_velocity(m):
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)) or not np.all(m > 0):
        raise ValueError("squared slowness must be positive and finite")
    return 1.0 / np.sqrt(m)


def make_toy_model(kind: str, grid: Grid2D, **params) -> ModelField:
    """Build a desk-scale test model.

    Parameters
    ----------
    kind : {"homogeneous", "layered", "inclusion", "smooth"}
    grid : Grid2D
    **params
        homogeneous: ``v``.
        layered: ``velocities`` (top to bottom) and ``interfaces`` (z indices
        where each new layer starts, strictly increasing, inside the grid).
        inclusion: ``v_background``, ``v_anomaly`` and ``rect=(x0, x1, z0, z1)``
        with inclusive index ranges.
        smooth: ``vmin``, ``vmax``, ``seed`` and optional ``correlation``
        (Gaussian filter width in cells, default 3); white noise is smoothed
        and rescaled to span ``[vmin, vmax]`` exactly.
    """
    vel = np.empty(grid.shape)
    if kind == "homogeneous":
        vel[:] = params["v"]
    elif kind == "layered":
        velocities = list(params["velocities"])
        interfaces = [int(z) for z in params["interfaces"]]
        if len(velocities) != len(interfaces) + 1:
            raise ValueError("layered model needs one more velocity than interfaces")
        if any(z <= 0 or z >= grid.nz for z in interfaces) or sorted(
            set(interfaces)
        ) != interfaces:
            raise ValueError(f"interfaces {interfaces} must be increasing in (0, nz)")
        edges = [0] + interfaces + [grid.nz]
        for v, z0, z1 in zip(velocities, edges[:-1], edges[1:]):
            vel[:, z0:z1] = v
    elif kind == "inclusion":
        x0, x1, z0, z1 = (int(c) for c in params["rect"])
        if not (0 <= x0 <= x1 < grid.nx and 0 <= z0 <= z1 < grid.nz):
            raise ValueError(f"inclusion rectangle {params['rect']} outside grid")
        vel[:] = params["v_background"]
        vel[x0 : x1 + 1, z0 : z1 + 1] = params["v_anomaly"]
    elif kind == "smooth":
        vmin, vmax = float(params["vmin"]), float(params["vmax"])
        if not 0 < vmin < vmax:
            raise ValueError("smooth model needs 0 < vmin < vmax")
        noise = np.random.default_rng(params["seed"]).standard_normal(grid.shape)
        field_ = ndimage.gaussian_filter(noise, params.get("correlation", 3.0), mode="reflect")
        field_ = (field_ - field_.min()) / np.ptp(field_)
        vel[:] = np.clip(vmin + (vmax - vmin) * field_, vmin, vmax)
    else:
        raise ValueError(f"unknown toy model kind {kind!r}")
    return ModelField(grid, velocity_to_sq_slowness(vel).ravel())


def write_model(path, model: ModelField) -> None:
    g = model.grid
    header = _MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, g.nx, g.nz, g.h)
    Path(path).write_bytes(header + model.values.astype("<f8").tobytes())


def read_model(path) -> ModelField:
    raw = Path(path).read_bytes()
    if len(raw) < _MODEL_HEADER.size:
        raise ModelFormatError(f"{path}: file too short for header")
    magic, version, nx, nz, h = _MODEL_HEADER.unpack_from(raw)
    if magic != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: bad magic {magic!r}")
    if version != MODEL_VERSION:
        raise ModelFormatError(f"{path}: unsupported version {version}")
    payload = raw[_MODEL_HEADER.size :]
    if len(payload) != 8 * nx * nz:
        raise ModelFormatError(
            f"{path}: payload has {len(payload)} bytes, header implies {8 * nx * nz}"
        )
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise ModelFormatError(f"{path}: non-finite values in payload")
    return ModelField(Grid2D(nx, nz, h), values)
