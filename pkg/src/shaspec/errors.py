"""Exception taxonomy shared across the package.

The CLI maps these onto stable exit codes: config/validation problems exit 2,
file-format and I/O problems exit 3, numerical aborts exit 4, verification
failures exit 5.
"""


class ShaSpecError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(ShaSpecError, ValueError):
    """Operands have incompatible shapes or dimensions."""


class ValidationError(ShaSpecError, ValueError):
    """An argument or configuration value violates its contract."""


class ContractError(ShaSpecError, RuntimeError):
    """An internal precondition was violated (e.g. incomplete feature bundle)."""


class ConfigError(ShaSpecError, ValueError):
    """A config file or CLI override could not be parsed or validated."""


class FormatError(ShaSpecError, ValueError):
    """A binary container (dataset or checkpoint) is malformed."""


class NonFiniteError(ShaSpecError, ArithmeticError):
    """An operation produced NaN or Inf; computation is aborted immediately."""


class TrainingAbort(NonFiniteError):
    """Training hit a non-finite value; carries the iteration diagnostic."""

    def __init__(self, iteration, detail):
        super().__init__(f"training aborted at iteration {iteration}: {detail}")
        self.iteration = iteration
        self.detail = detail


class GradCheckFailure(ShaSpecError, RuntimeError):
    """A gradient verification run exceeded its tolerance."""
