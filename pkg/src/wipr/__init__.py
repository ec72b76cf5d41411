"""Frequency-domain wavefield inversion with phase retrieval (WIPR) and IR-WRI."""

from .grid import (
    Bounds,
    Grid2D,
    ModelDecomposition,
    ModelField,
    make_toy_model,
    read_model,
    sq_slowness_to_velocity,
    velocity_to_sq_slowness,
    write_model,
)
from .helmholtz import PmlProfile, StencilConfig, assemble, forward_solve
from .inversion import (
    AcquisitionSet,
    Dataset,
    PENALTY_RULES,
    InversionConfig,
    IterationLog,
    Mode,
    bilinear_recovery,
    default_penalty,
    model_error,
    run_batch,
    run_inversion,
    simulate_data,
    surface_acquisition,
)
from .datafile import read_data, write_data
from .phase_retrieval import PrProblem, mm_solve
from .regularization import TTConfig, tt_solve

__version__ = "0.1.0"
