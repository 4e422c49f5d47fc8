"""Exception types raised across the package."""


class ParameterError(ValueError):
    """A distribution or model parameter is outside its valid range."""


class DomainError(ValueError):
    """An input point lies outside the domain of the operation."""


class CircularMeanUndefined(ValueError):
    """Sine and cosine sums both vanish, so no mean direction exists."""


class NumericalError(RuntimeError):
    """A numerical routine failed to reach its tolerance."""


class ConfigError(ValueError):
    """Invalid sensor, filter or experiment configuration.

    ``path`` is the dotted location of the offending field and ``line`` the
    1-based line in the source document when known.
    """

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path:
            where += f"{path}: "
        if line is not None:
            where = f"line {line}: " + where
        super().__init__(where + message)


class DegenerateLikelihood(RuntimeError):
    """Every particle received zero likelihood (all log-likelihoods -inf/NaN)."""

    def __init__(self, message, diagnostics=None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)
