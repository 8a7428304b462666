"""Exception types raised across the package."""


class CoFRKError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(CoFRKError, ValueError):
    pass


class EmptyFootprintError(CoFRKError, ValueError):
    def __init__(self, footprint_id):
        super().__init__(f"footprint {footprint_id!r} contains no BAU centroid")
        self.footprint_id = footprint_id


class ValidityError(CoFRKError, ValueError):
    """A covariance parameter lies outside its positive-definiteness region."""


class NumericalFailureError(CoFRKError, ArithmeticError):
    """A factorization failed. ``context`` carries the parameters in use."""

    def __init__(self, message, context=None):
        super().__init__(message)
        self.context = dict(context or {})

    def __str__(self):
        base = super().__str__()
        if not self.context:
            return base
        items = ", ".join(f"{k}={v}" for k, v in self.context.items())
        return f"{base} [{items}]"


class SingularDesignError(CoFRKError, ArithmeticError):
    pass


class SizeGuardError(CoFRKError, ValueError):
    """Refusal to build a dense oracle beyond its size limit."""


class NotApplicableError(CoFRKError, ValueError):
    pass


class ConfigError(CoFRKError, ValueError):
    pass


class ParseError(CoFRKError, ValueError):
    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno
