"""Exception types shared across the package."""


class OWSDError(Exception):
    """Base class for every error raised by owsd."""


class ShapeError(OWSDError, ValueError):
    """An array does not have the shape a layer or model expects."""


class InvalidArchitectureError(OWSDError, ValueError):
    """A layer chain whose shapes do not compose."""


class NonFiniteError(OWSDError, FloatingPointError):
    """NaN or Inf appeared in an activation or gradient."""


class MissingForwardError(OWSDError, RuntimeError):
    """backward() was called without a preceding training-mode forward()."""


class MissingGradientError(OWSDError, RuntimeError):
    """An optimizer step found a parameter without a gradient."""


class FormatError(OWSDError, ValueError):
    """A binary artifact is malformed (bad magic, truncated, wrong version)."""


class DatasetError(OWSDError, ValueError):
    """A dataset is too small, degenerate, or has inconsistent splits."""


class BudgetExhaustedError(OWSDError, RuntimeError):
    """The scrambling key has no submissions left."""

    error_code = "key_budget_exhausted"


class StaleIINError(OWSDError, RuntimeError):
    """The inference network was trained against a different key."""


class CloudUnreachableError(OWSDError, ConnectionError):
    """The cloud classifier could not be reached or returned an error.

    ``delivered`` counts submissions of the failed batch that the cloud did
    answer before the failure; only those are charged to the key budget.
    """

    error_code = "cloud_unreachable"

    def __init__(self, message: str = "", delivered: int = 0):
        super().__init__(message)
        self.delivered = delivered


class WireError(OWSDError, ValueError):
    """A request body that does not follow the wire format."""

    def __init__(self, message: str, status: int = 400, error_code: str = "bad_request"):
        super().__init__(message)
        self.status = status
        self.error_code = error_code
