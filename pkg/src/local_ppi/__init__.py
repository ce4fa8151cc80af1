"""Local linear prediction-powered inference for a regression function and its gradient."""

from .errors import (
    DegenerateResampling,
    EmptyNeighborhood,
    InputError,
    LocalPPIError,
    NotPositiveDefinite,
    NumericError,
    ParseError,
    PluginUnavailable,
    SchemaError,
    SingularDesign,
)
from .estimators import (
    Dataset,
    LocalFit,
    Rectifier,
    compute_rectifier,
    conventional_fit,
    hd_fit,
    hd_rectifier,
    make_fit_fn,
    ppi_fit,
)
from .kernels import KernelMoments, KernelSpec, compute_moments, default_bandwidth, kernel_eval
from .uncertainty import (
    BiasTerms,
    ConfidenceInterval,
    ConfidenceRegion,
    CovarianceEstimate,
    bootstrap_covariance,
    ci_value,
    region_gradient,
)

__version__ = "0.1.0"
