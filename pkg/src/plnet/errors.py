"""Exception types raised across the package."""


class PLNetError(Exception):
    """Base class for every error raised by plnet."""


class ConfigurationError(PLNetError, ValueError):
    pass


class InputError(PLNetError, ValueError):
    pass


class UsageError(PLNetError, RuntimeError):
    pass


class DegenerateInputError(PLNetError, ValueError):
    pass


class EvaluationError(PLNetError, ValueError):
    pass


class IngestionError(PLNetError, OSError):
    pass


class ValidationError(PLNetError, ValueError):
    pass


class TrainingError(PLNetError, RuntimeError):
    pass
