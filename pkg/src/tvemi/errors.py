"""Exception hierarchy; the CLI maps these onto exit codes."""


class DataError(ValueError):
    """Input data violate a documented invariant (exit code 2)."""


class NumericalError(RuntimeError):
    """A numerical routine failed (exit code 3)."""

    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class ConvergenceError(NumericalError):
    pass


class SingularInformationError(NumericalError):
    pass


class MonotoneLikelihoodError(NumericalError):
    pass


class SeparationError(NumericalError):
    pass


class ImputationError(NumericalError):
    pass
