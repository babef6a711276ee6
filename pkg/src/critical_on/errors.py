"""Exception hierarchy shared by every module of the package."""


class CriticalOnError(Exception):
    """Base class for all package errors."""


class DomainError(CriticalOnError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class SeriesOverflowError(CriticalOnError, OverflowError):
    """Series argument exceeds the configured safety threshold."""


class IntegrationError(CriticalOnError, RuntimeError):
    """Two internal quadrature estimates disagree beyond tolerance."""


class SizeMismatchError(CriticalOnError, ValueError):
    pass


class InstanceTooLargeError(CriticalOnError, ValueError):
    pass


class AssumptionViolated(CriticalOnError, AssertionError):
    """A potential fails one of the curvature/derivative inequalities.

    ``witness`` holds the offending point and directions.
    """

    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


class DegenerateConstantsError(CriticalOnError, ValueError):
    pass


class StepSizeError(CriticalOnError, RuntimeError):
    """A Langevin path left the configured stability box."""


class NestingBudgetError(CriticalOnError, ValueError):
    pass


class TailBudgetError(CriticalOnError, ValueError):
    pass


class BoundViolated(CriticalOnError, AssertionError):
    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


class ConfigError(CriticalOnError, ValueError):
    """Experiment configuration failed validation."""
