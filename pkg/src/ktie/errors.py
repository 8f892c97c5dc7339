"""Exception hierarchy shared by all modules."""


class KtieError(Exception):
    """Base class for library errors."""


class InvalidDomainError(KtieError):
    pass


class OutOfDomainError(KtieError):
    pass


class EscapedDomainError(KtieError):
    pass


class TrappedGeodesicError(KtieError):
    pass


class InvalidQuadratureError(KtieError):
    pass


class NotOnBoundaryError(KtieError):
    pass


class GridMismatchError(KtieError):
    pass


class CoefficientError(KtieError):
    pass


class NonConvergenceError(KtieError):
    def __init__(self, message, residual_history=()):
        super().__init__(message)
        self.residual_history = list(residual_history)


class DivergenceError(NonConvergenceError):
    pass


class SmallnessGateError(KtieError):
    pass


class JetOrderError(KtieError):
    pass


class HypothesisError(KtieError):
    def __init__(self, failures):
        super().__init__("; ".join(failures))
        self.failures = list(failures)


class ConfigError(KtieError):
    def __init__(self, violations):
        violations = list(violations)
        super().__init__("invalid configuration:\n  - " + "\n  - ".join(violations))
        self.violations = violations


class RecoveryError(KtieError):
    pass
