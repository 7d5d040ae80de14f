"""Conjugate times and accessibility-set boundary asymptotics along abnormal
trajectories of single-input affine control systems."""

from .boundary import (boundary_curve, calibrate_scalar_coefficient, compute_A,
                       gram_matrix, kernel_profile, martinet_closed_form,
                       solve_kernel_bvp)
from .expr import VectorFieldExpr, eval_jet, parse_expr, parse_field
from .geometry import (System, TrajectoryData, ad_sequence, adjoint_along,
                       check_assumptions, lie_bracket_at, reference_trajectory)
from .operators import (CoefficientField, assemble, eig_inequality_check,
                        operator_conjugate_time, quadratic_value, spectrum)
from .presets import chain_n3, const4, get_preset, martinet
from .reachset import (adapted_projection, empirical_envelope, fit_contact,
                       sample_affine, sample_sr, sector_perturbation,
                       sector_sweep)
from .secondvar import (RestrictionMode, conjugate_time_refined,
                        conjugate_time_search, fd_oracle,
                        first_variation_matrix, hessian_form,
                        restricted_smallest_eig)

__version__ = "0.1.0"
