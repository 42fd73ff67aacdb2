"""Exception hierarchy."""


class MetaPIError(Exception):
    """Base class for all package errors."""


class ParameterError(MetaPIError, ValueError):
    """Invalid distribution or method parameter."""


class DatasetError(MetaPIError, ValueError):
    """Meta-analysis input that no estimator can use."""


class InputError(MetaPIError, ValueError):
    """Malformed study file. ``row`` is the 1-based data row when known."""

    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class ConfigError(MetaPIError, ValueError):
    """Invalid simulation configuration. ``problems`` lists every offence."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class ConvergenceError(MetaPIError, RuntimeError):
    """An iterative estimator stopped without converging."""

    def __init__(self, message, last_iterate, iterations):
        self.last_iterate = last_iterate
        self.iterations = iterations
        super().__init__(f"{message} (last iterate {last_iterate!r} after {iterations} iterations)")


class NumericError(MetaPIError, ArithmeticError):
    """A numerical routine failed; ``diagnostics`` carries the context."""

    def __init__(self, message, **diagnostics):
        self.diagnostics = diagnostics
        if diagnostics:
            detail = ", ".join(f"{k}={v!r}" for k, v in diagnostics.items())
            message = f"{message} [{detail}]"
        super().__init__(message)


class ScenarioAbort(MetaPIError, RuntimeError):
    """Too many replicate failures within one scenario."""

    def __init__(self, message, failures):
        self.failures = failures
        super().__init__(message)
