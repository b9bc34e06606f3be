"""Exception hierarchy. The CLI maps each family onto an exit code."""


class ScoreDAError(Exception):
    pass


class ConfigError(ScoreDAError, ValueError):
    """Invalid configuration or arguments (exit code 2)."""


class DomainError(ScoreDAError, ValueError):
    """Input outside the domain of an operation."""


class NumericalError(ScoreDAError, ArithmeticError):
    """Non-finite values encountered during a computation (exit code 3)."""

    def __init__(self, message, *, step=None, tau=None):
        super().__init__(message)
        self.step = step
        self.tau = tau


class EnsembleError(NumericalError):
    """Some ensemble members failed; ``partial`` holds the ones that finished."""

    def __init__(self, failed_seeds, partial=None):
        super().__init__(f"{len(failed_seeds)} ensemble member(s) failed: seeds {list(failed_seeds)}")
        self.failed_seeds = list(failed_seeds)
        self.partial = partial


class IngestError(ScoreDAError):
    """Malformed input file (exit code 4)."""

    def __init__(self, message, *, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
