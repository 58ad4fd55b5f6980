"""Travelling-wave finger solutions of the hysteretic Richards system."""

from .constitutive import ConstitutiveLaws, ParamBounds, paper_laws, pos_part, validate_bounds
from .continuation import (TYPE_I, TYPE_II, UNCLASSIFIED, SweepRecord, classify, eval_G1, eval_G2,
                           eval_G_general, find_wave_speed, sweep_c)
from .grid_fem import Grid, build_grid
from .tw_scheme import Params, Solution, fixed_point_solve

__version__ = "0.1.0"

__all__ = [
    "ConstitutiveLaws", "ParamBounds", "paper_laws", "pos_part", "validate_bounds",
    "TYPE_I", "TYPE_II", "UNCLASSIFIED", "SweepRecord", "classify", "eval_G1", "eval_G2",
    "eval_G_general", "find_wave_speed", "sweep_c", "Grid", "build_grid", "Params",
    "Solution", "fixed_point_solve",
]
