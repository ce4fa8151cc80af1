"""Exception hierarchy shared by all local_ppi modules."""


class LocalPPIError(Exception):
    """Base class for every error raised by this package."""


class InputError(LocalPPIError, ValueError):
    """Caller supplied arguments that violate a precondition."""


class SchemaError(InputError):
    """A config or spec document failed validation.

    ``field`` names the offending location, as a dotted path.
    """

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class ParseError(InputError):
    """A data file could not be parsed.

    Carries the 1-based data row and the column name when known.
    """

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class NumericError(LocalPPIError, ArithmeticError):
    """A numeric routine failed to converge."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class SingularDesign(LocalPPIError):
    """The weighted Gram matrix of a local fit is singular or ill-conditioned.

    ``condition`` is the estimated condition number (``inf`` when the
    smallest eigenvalue is not positive). ``dataset`` tags which input
    failed ("labeled", "unlabeled", "combined") when known.
    """

    def __init__(self, message, condition=float("inf"), dataset=None):
        super().__init__(message)
        self.condition = condition
        self.dataset = dataset

    def tagged(self, dataset):
        err = type(self)(f"{dataset} dataset: {self}", self.condition, dataset)
        return err


class EmptyNeighborhood(SingularDesign):
    """Total kernel weight around the target is numerically zero."""

    def __init__(self, message, mass=0.0, dataset=None):
        super().__init__(message, float("inf"), dataset)
        self.mass = mass

    def tagged(self, dataset):
        return type(self)(f"{dataset} dataset: {self}", self.mass, dataset)


class DegenerateResampling(LocalPPIError):
    """Too many bootstrap replicates hit a singular design."""

    def __init__(self, message, n_failed, n_boot):
        super().__init__(message)
        self.n_failed = n_failed
        self.n_boot = n_boot


class PluginUnavailable(LocalPPIError):
    """Plug-in bias terms cannot be estimated for this neighborhood."""


class NotPositiveDefinite(InputError):
    """A covariance matrix expected to be positive definite is not."""

    def __init__(self, message, min_eigenvalue):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue
