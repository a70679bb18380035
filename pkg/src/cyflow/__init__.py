"""Pseudospectral simulator and verification suite for the conformal
curvature-normalizing (Chern-Yamabe) flow on flat complex tori."""

from .fields import (CovectorField, ScalarField, TorusGrid, constant_field,
                     dealias, gradient, integrate, laplacian, pairing,
                     read_snapshot, write_snapshot, zero_covector)
from .geometry import (Background, canonical_initial, chern_laplacian,
                       chern_scalar, normalize_conformal, solve_poisson,
                       total_scalar)
from .flow import (FlowState, StepperConfig, Trajectory, TrajectoryRow,
                   cfl_dt, lower_bound_check, rhs, rhs_expanded, run,
                   scalar_evolution_residual, step, write_series_csv)
from .variational import (HessianReport, augmented_energy, dissipation,
                          energy, hessian_min_eigen, second_variation)
from .experiments import (BumpProfile, C0Certificate, SaddleReport,
                          SliceReport, SweepTable, bump_family,
                          bump_profile_radial, c0_certificate,
                          palais_smale_extract, saddle_experiment,
                          unboundedness_sweep, unit_ball_volume)

__version__ = "0.1.0"
