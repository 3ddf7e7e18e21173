"""Exception hierarchy. Each error contract maps to one class."""


class AdaptiveDepthError(Exception):
    pass


class DimensionError(AdaptiveDepthError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(AdaptiveDepthError, ValueError):
    """A numeric parameter is outside its allowed range."""


class InputError(AdaptiveDepthError, ValueError):
    """Input data (tokens, labels, records) is malformed."""


class EvaluationError(AdaptiveDepthError, ArithmeticError):
    """A function produced a non-finite value."""


class ConfigurationError(AdaptiveDepthError, ValueError):
    pass


class VersionError(AdaptiveDepthError):
    """Checkpoint written by an incompatible format version."""


class TrainingError(AdaptiveDepthError, RuntimeError):
    """Training hit a non-finite loss; message names phase and step."""
