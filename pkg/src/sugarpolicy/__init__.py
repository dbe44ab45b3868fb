"""Policy design for a polluting Sugarscape economy with Gaussian-process tools.

The model lives in :mod:`sugarpolicy.sim`; :mod:`sugarpolicy.gp`,
:mod:`sugarpolicy.sensitivity` and :mod:`sugarpolicy.bo` supply the
surrogate, the additivity test and the optimiser; :mod:`sugarpolicy.runner`
wires them to replicate ensembles and :mod:`sugarpolicy.cli` to the shell.
"""

from .design import Bounds, latin_hypercube
from .metrics import ObjectiveKind, gini
from .sim import (ConfigError, PolicyVector, SimParams, SimResult, StateVector,
                  run_simulation)

__version__ = "0.1.0"

__all__ = [
    "Bounds", "ConfigError", "ObjectiveKind", "PolicyVector", "SimParams", "SimResult",
    "StateVector", "gini", "latin_hypercube", "run_simulation",
]
