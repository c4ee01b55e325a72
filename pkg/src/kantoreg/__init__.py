"""Distribution-on-distribution regression through Kantorovich potentials."""
from ._kernels import BACKEND
from .grid import Cdf1D, Density1D, Grid1D, cdf, density_from_samples, quantile, truncated_normal
from .ot1d import (Potential1D, TransportMap1D, align_density, barycenter, ot_map,
                   potential_from_map, pushforward, w2)
from .model import (Dataset, FeasibilityConstants, ModelSpec, PsiParams, StepParams,
                    check_feasibility, estimate_constants, predict)
from .fit import FitConfig, FitResult, fit
from .objective import QuadraticObjective, empirical_loss

__version__ = "0.1.0"
