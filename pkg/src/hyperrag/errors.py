"""Exception hierarchy shared by all hyperrag modules.

Every error carries a short machine-readable ``category`` used by the CLI
to produce structured error records and exit codes.
"""


class HyperRagError(Exception):
    """Base class for all library errors."""

    category = "error"
    exit_code = 1


class ContractViolation(HyperRagError):
    """A documented precondition of an operation was violated by the caller."""

    category = "contract"
    exit_code = 2


class ConfigurationError(HyperRagError):
    """Invalid configuration: bad hyperparameter, unknown modality, shape mismatch."""

    category = "config"
    exit_code = 3


class InvalidPointError(HyperRagError):
    """A vector does not satisfy the hyperboloid (or tangency) constraint."""

    category = "invalid_point"
    exit_code = 4


class DivergenceError(HyperRagError):
    """An optimizer produced a non-finite loss or gradient."""

    category = "divergence"
    exit_code = 5

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class InfeasibleConstraintError(HyperRagError):
    """A constrained optimization problem has an empty feasible set."""

    category = "infeasible"
    exit_code = 6


class NumericalError(HyperRagError):
    """An iterative numerical method failed to converge within its budget."""

    category = "numerical"
    exit_code = 7


class DataFormatError(HyperRagError):
    """A data file does not conform to its documented format."""

    category = "data_format"
    exit_code = 8
