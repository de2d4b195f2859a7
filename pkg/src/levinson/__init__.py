"""Periodic solutions in distribution for stochastic time-periodic Newtonian systems.

Modules: ``model`` (systems and builtins), ``polysys`` (polynomial
constants), ``lyapunov`` (Lyapunov function, generator and grid
verification), ``sde`` (schemes and ensembles), ``stats`` (two-sample
distances and periodicity tests), ``cli`` (command line).
"""

from .errors import *  # noqa: F401,F403
from .lyapunov import (
    Grid,
    UF2Certificate,
    UFCertificate,
    calibrate_D,
    default_certificate,
    generator_apply,
    generator_psi,
    generator_psi_uf2,
    psi,
    psi_uf2,
    verify_hypotheses,
    verify_khasminskii,
)
from .model import SystemSpec, builtin, diffusion, drift
from .polysys import MultiPoly, min_on_sphere, uf1_constants
from .sde import PathState, SdeConfig, ensemble_snapshots, simulate_path
from .stats import energy_distance, periodicity_report, permutation_test, sliced_w1

__version__ = "0.1.0"
