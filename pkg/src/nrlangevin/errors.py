"""Exception hierarchy for nrlangevin."""


class NrlError(Exception):
    """Base class for all library errors."""


class ConfigError(NrlError):
    """Invalid experiment configuration.

    Carries every offending field so the CLI can report them all at once.
    """

    def __init__(self, problems: list[tuple[str, str]]):
        self.problems = list(problems)
        lines = [f"{field}: {message}" for field, message in self.problems]
        super().__init__("invalid configuration:\n  " + "\n  ".join(lines))


class DomainError(NrlError, ValueError):
    """Invalid model parameters or evaluation outside the model's domain."""


class SolverError(NrlError, ArithmeticError):
    """A numerical solver's precondition or convergence check failed."""

    def __init__(self, message: str, achieved: float | None = None):
        super().__init__(message)
        self.achieved = achieved


class BlowupError(NrlError):
    """A discretised trajectory left the finite region."""

    def __init__(self, step: int, message: str = "trajectory blew up"):
        super().__init__(f"{message} at step {step}")
        self.step = step
