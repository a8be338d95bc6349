"""Exception hierarchy shared across the package."""


class RdifError(Exception):
    """Base class for all errors raised by rdif."""


class ParseError(RdifError, ValueError):
    """Input could not be parsed."""


class ValidationError(RdifError, ValueError):
    """Input parsed but violates a data-model invariant."""

    def __init__(self, message, item=None, field=None):
        self.item = item
        self.field = field
        if item is not None:
            where = f"item {item}" + (f", field {field}" if field else "")
            message = f"{where}: {message}"
        super().__init__(message)


class DegenerateSlopeError(RdifError, ValueError):
    pass


class NonPositiveVarianceError(RdifError, ValueError):
    pass


class AllWeightsZeroError(RdifError, RuntimeError):
    """Every item lies beyond its tuning constant; nothing to estimate from."""


class StationaryStartError(RdifError, ValueError):
    """Newton iteration started at a stationary point of the estimating equation."""


class VarianceOrderError(RdifError, ValueError):
    pass


class SingularCovarianceError(RdifError, ValueError):
    pass


class DegenerateItemError(RdifError, ValueError):
    """One or more response columns contain a single category."""

    def __init__(self, items):
        self.items = list(items)
        super().__init__(f"degenerate item(s) with a single response category: {self.items}")


class SingularInformationError(RdifError, ValueError):
    pass


class NoUsableStrataError(RdifError, ValueError):
    pass
