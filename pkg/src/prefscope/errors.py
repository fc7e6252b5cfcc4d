"""Exception hierarchy shared across the package."""


class PrefscopeError(Exception):
    """Base class for all package errors."""


class ValidationError(PrefscopeError):
    """Input data or configuration violates a documented contract."""


class ParseError(ValidationError):
    """A record could not be parsed."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DependencyError(PrefscopeError):
    """A pipeline stage was run before the stage that produces its inputs."""


class TransportError(PrefscopeError):
    """An HTTP provider kept failing after bounded retries."""

    def __init__(self, message, attempts=0):
        self.attempts = attempts
        super().__init__(f"{message} (after {attempts} attempts)")


class ProviderContractError(PrefscopeError):
    """A provider returned a well-formed but contract-violating response."""


class NumericError(PrefscopeError):
    """Non-finite values or a failed numerical procedure."""


class ModelStateError(PrefscopeError):
    """A model was used before the state it needs was set."""


class DegenerateColumnError(NumericError):
    """A column has zero variance and cannot be standardized."""


class SeparationError(NumericError):
    """Logistic coefficients diverge because the classes are separable."""

    def __init__(self, message, columns=()):
        self.columns = list(columns)
        super().__init__(message)


class RankDeficiencyError(NumericError):
    """The design matrix does not have full column rank."""


class ConvergenceError(NumericError):
    """An iterative solver hit its iteration cap."""

    def __init__(self, message, grad_norm=float("nan")):
        self.grad_norm = grad_norm
        super().__init__(f"{message} (final gradient norm {grad_norm:.3g})")


class InsufficientDataError(PrefscopeError):
    """Too few rows, annotators or candidates for the requested estimate."""


class AnnotationError(PrefscopeError):
    """An LLM reply could not be parsed into a valid verdict."""


class FormatError(PrefscopeError):
    """An LLM description reply violated the expected output format."""

    def __init__(self, message, transcript=None):
        self.transcript = transcript
        super().__init__(message if transcript is None else f"{message} [transcript: {transcript}]")
