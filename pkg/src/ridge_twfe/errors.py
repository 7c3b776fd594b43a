"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class RidgeTwfeError(Exception):
    exit_code = 3


class ConfigError(RidgeTwfeError):
    exit_code = 2


class GraphError(RidgeTwfeError):
    pass


class SbmError(RidgeTwfeError):
    pass


class EstimationError(RidgeTwfeError):
    pass


class SolverError(EstimationError):
    def __init__(self, message, residual_norm=float("nan"), method=""):
        super().__init__(message)
        self.residual_norm = residual_norm
        self.method = method

    def __str__(self):
        base = super().__str__()
        if self.method:
            return f"{base} (method={self.method}, residual={self.residual_norm:.3e})"
        return base


class DecompositionError(RidgeTwfeError):
    pass
