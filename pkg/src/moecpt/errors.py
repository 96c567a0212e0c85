"""Exception types; each maps to a distinct CLI exit code."""


class MoeCptError(Exception):
    exit_code = 1


class ConfigError(MoeCptError, ValueError):
    """Invalid configuration, shape mismatch, or out-of-range argument."""

    exit_code = 2


class AlignmentError(MoeCptError):
    """Two traces do not cover the same token sequence."""

    exit_code = 3

    def __init__(self, message: str, position: int | None = None) -> None:
        super().__init__(message)
        self.position = position


class NumericalAbort(MoeCptError):
    """Training produced a non-finite loss."""

    exit_code = 4

    def __init__(self, message: str, diagnostics: dict | None = None) -> None:
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class CheckpointError(MoeCptError):
    """Bad magic, unsupported version, or config-hash mismatch."""

    exit_code = 5


class GradCheckError(MoeCptError):
    """Finite-difference oracle could not evaluate the function."""


class EndOfData(MoeCptError):
    """A token stream ran out before the batch was filled."""


class UnsupportedMetric(MoeCptError):
    """Metric not defined for this model (e.g. co-activation with k=1)."""

    exit_code = 6
