"""Gevrey-class KAM normal forms: series algebra, Gevrey norms, small-divisor
arithmetic, rational approximation bases and an iterative KAM solver."""

__version__ = "0.1.0"

from .arithmetic import GOLDEN, Envelope, build_profile, classify, psi_of, select_Q0
from .gevrey import GevreyParams, norm_from_coeffs, norm_trig_poly
from .hamiltonians import BessiSpec, IntegrableSpec, bessi_hamiltonian, build_problem, condition_C_alpha
from .kam import (
    KamConfig,
    KamPreconditionError,
    KamResult,
    KamSchedule,
    KamWarning,
    NodeGrid,
    ParamHamiltonian,
    cohomological_solve,
    decompose,
    flow_map,
    invariance_residual,
    kam_iterate,
    kam_step,
)
from .rational_approx import ApproxBasis, RationalVector, simultaneous_approx
from .series import FourierTaylorSeries, poisson_bracket
