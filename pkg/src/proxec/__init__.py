"""Proximal causal inference for external control arms with time-to-event outcomes.

Counterfactual placebo incidence ``P(T*(0) <= t | R=0)`` in a primary trial
(R=0) is identified from an external control cohort (R=1) through a
negative-control exposure Z and a negative-control outcome W. Estimators:
IPCW outcome bridge, treatment bridge and doubly robust; two-stage
regression; naive and oracle comparators. Inference uses stacked
estimating equations with sandwich variances on the cloglog scale.
"""

__version__ = "0.1.0"

from .dataset import ColumnMap, StudyDataset, complete_case, load_csv, summarize, write_csv
from .errors import (
    ConvergenceError,
    DataError,
    DegenerateFitError,
    EstimationError,
    InvalidEstimateError,
    ProxecError,
    SchemaError,
    SingularDesignError,
    WeakProxyError,
)
from .incidence import IncidenceEstimate, cloglog, inv_cloglog
from .inference import EfficacyResult, efficacy, efficacy_test, estimate, placebo_stack
from .ipcw import estimate_doubly_robust, estimate_outcome_bridge, estimate_treatment_bridge
from .naive import estimate_naive, estimate_oracle
from .sensitivity import gamma_bounds, proxy_strength
from .survival import fit_cox, fit_exponential, kaplan_meier, km_incidence
from .twostage import estimate_twostage

__all__ = [
    "ColumnMap", "StudyDataset", "complete_case", "load_csv", "summarize", "write_csv",
    "ConvergenceError", "DataError", "DegenerateFitError", "EstimationError", "InvalidEstimateError",
    "ProxecError", "SchemaError", "SingularDesignError", "WeakProxyError",
    "IncidenceEstimate", "cloglog", "inv_cloglog",
    "EfficacyResult", "efficacy", "efficacy_test", "estimate", "placebo_stack",
    "estimate_doubly_robust", "estimate_outcome_bridge", "estimate_treatment_bridge",
    "estimate_naive", "estimate_oracle", "gamma_bounds", "proxy_strength",
    "fit_cox", "fit_exponential", "kaplan_meier", "km_incidence", "estimate_twostage",
]
