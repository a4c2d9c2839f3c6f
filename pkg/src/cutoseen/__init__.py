"""Stabilized Nitsche cut finite element methods for Oseen and Navier-Stokes flow."""

import os as _os

# thread-count override for the BLAS backends; only effective before numpy loads
_threads = _os.environ.get("CUTOSEEN_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .cut_geometry import (  # noqa: E402
    CutQuadrature,
    CutTopology,
    ElementLabel,
    LevelSet,
    build_cut_quadrature,
    check_geometry_assumptions,
    circle_level_set,
    classify,
)
from .forms import (  # noqa: E402
    CutDiscretization,
    LinearSystem,
    OseenCoefficients,
    StabilizationConfig,
    assemble_system,
    discretize,
)
from .mesh import BackgroundMesh, InvalidInputError, build_structured_mesh  # noqa: E402
from .solver import SingularSystemError, SolutionField, estimate_condition, solve  # noqa: E402
from .spaces import FESpace, build_space  # noqa: E402
from .verification import (  # noqa: E402
    ManufacturedCase,
    compute_errors,
    cut_sweep,
    energy_norms,
    run_convergence,
    taylor_case,
)

__all__ = [
    "BackgroundMesh",
    "CutDiscretization",
    "CutQuadrature",
    "CutTopology",
    "ElementLabel",
    "FESpace",
    "InvalidInputError",
    "LevelSet",
    "LinearSystem",
    "ManufacturedCase",
    "OseenCoefficients",
    "SingularSystemError",
    "SolutionField",
    "StabilizationConfig",
    "assemble_system",
    "build_cut_quadrature",
    "build_space",
    "build_structured_mesh",
    "check_geometry_assumptions",
    "circle_level_set",
    "classify",
    "compute_errors",
    "cut_sweep",
    "discretize",
    "energy_norms",
    "estimate_condition",
    "run_convergence",
    "solve",
    "taylor_case",
]
