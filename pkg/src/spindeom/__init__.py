"""Two-level-system relaxation in a continuous spin environment.

Pipeline: describe the bath (``bath``), fit its exact time correlation
function to exponential sums (``expfit``), propagate the dissipaton
hierarchy (``deom``), extract observables (``observables``), orchestrate
runs from configs and presets (``runner``, ``cli``).
"""

__version__ = "0.1.0"

from .bath import BathSpec, QuadratureSpec, bath_tcf, effective_j, ohmic_j
from .expfit import ExponentialSeries, FitStrategy, fit_bath, prony_fit
from .deom import DDOStore, HierarchyParams, SystemSpec, propagate
from .observables import Trajectory, population, von_neumann_entropy
from .runner import RunConfig, preset, run

__all__ = [
    "BathSpec",
    "QuadratureSpec",
    "bath_tcf",
    "effective_j",
    "ohmic_j",
    "ExponentialSeries",
    "FitStrategy",
    "fit_bath",
    "prony_fit",
    "DDOStore",
    "HierarchyParams",
    "SystemSpec",
    "propagate",
    "Trajectory",
    "population",
    "von_neumann_entropy",
    "RunConfig",
    "preset",
    "run",
    "__version__",
]
