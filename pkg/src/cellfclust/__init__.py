"""Robust fuzzy clustering with cellwise outlier flagging and imputation."""

from .core import (
    CellFclustError,
    ClusterParams,
    ConfigError,
    DataError,
    DataSet,
    DegenerateFitError,
    FitConfig,
    FitResult,
    NumericalDomainError,
    compute_h,
    log_density_subset,
    objective,
)
from .constraints import EigenSystem, check_ratio, truncate_eigenvalues
from .estimation import (
    compute_delta,
    concentration_step,
    conditional_moments,
    fit,
    fit_single,
    m_step,
    update_membership,
)
from .initialize import InitialState, initialize

__version__ = "0.1.0"
