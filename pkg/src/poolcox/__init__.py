"""Cox models for pooled trials: stratified, fixed-effect and frailty fits plus a simulation harness."""

from .coxfit import DesignSpec, FitResult, newton_fit, wald_test
from .dataset import PooledDataset, Subject, build_risk_sets, validate
from .frailty import FrailtyFit, fit_frailty
from .simgen import Scenario, generate_dataset, solve_rate

__version__ = "0.1.0"

__all__ = [
    "DesignSpec", "FitResult", "FrailtyFit", "PooledDataset", "Scenario", "Subject",
    "build_risk_sets", "fit_frailty", "generate_dataset", "newton_fit", "solve_rate",
    "validate", "wald_test",
]
