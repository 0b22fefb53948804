"""Cox regression with time-varying effects and multiple imputation of missing covariates."""

__version__ = "0.1.0"

from .basis import TveSpec, basis, basis_matrix, select_knots, tve_eval
from .cox import CoxTveModel, fit, ph_wald_test, tve_curve
from .data import SurvivalDataset, breslow_baseline, nelson_aalen
from .errors import DataError, NumericalError

__all__ = [
    "TveSpec", "basis", "basis_matrix", "select_knots", "tve_eval", "CoxTveModel", "fit", "ph_wald_test",
    "tve_curve", "SurvivalDataset", "breslow_baseline", "nelson_aalen", "DataError", "NumericalError",
    "__version__",
]
