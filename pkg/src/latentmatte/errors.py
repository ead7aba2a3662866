"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, MissingArtifactError -> 2,
NumericalError (and subclasses) -> 3.
"""


class LatentMatteError(Exception):
    pass


class ConfigError(LatentMatteError):
    """Bad or unknown configuration key/value."""


class MissingArtifactError(LatentMatteError):
    """A prerequisite file (dataset, checkpoint, ...) does not exist."""


class NumericalError(LatentMatteError):
    """Non-finite loss, solver failure, or similar numerical breakdown."""


class DivergenceError(NumericalError):
    """Training or optimization produced a non-finite loss."""

    def __init__(self, step, message=""):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")


class SolverError(NumericalError):
    """Linear solver failed to converge; carries the final residual."""

    def __init__(self, residual, message=""):
        self.residual = residual
        super().__init__(message or f"solver did not converge, residual={residual:.3e}")


class FrozenModelError(LatentMatteError):
    """A model that must stay frozen had its parameters mutated."""


class DatasetError(LatentMatteError):
    """Dataset persistence problem; message names the offending key or path."""
