"""Exception hierarchy. Anything derived from :class:`SteerkitError` is a domain
error and maps to exit code 1 on the command line."""


class SteerkitError(Exception):
    pass


class DimensionError(SteerkitError, ValueError):
    pass


class NumericError(SteerkitError, ArithmeticError):
    pass


class GradientStateError(SteerkitError, RuntimeError):
    pass


class FormatError(SteerkitError, ValueError):
    """Corrupt, truncated or unsupported file."""


class VersionError(FormatError):
    pass


class TokenError(SteerkitError, ValueError):
    pass


class ExtractionError(SteerkitError, RuntimeError):
    pass


class TrainingDivergedError(NumericError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step


class SignalError(SteerkitError, ValueError):
    pass
