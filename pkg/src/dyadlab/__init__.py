"""dyadlab: multi-parameter dyadic harmonic analysis on a finite torus."""

from dyadlab.grid import (
    TorusSpace,
    GridShift,
    DyadicCube,
    Box,
    sample_grid,
    standard_grid,
    realize_cube,
    torus_distance,
    is_good,
    exact_pi_good,
    estimate_pi_good,
)

__version__ = "0.1.0"
