"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Raised when an input object violates its documented invariants."""


class ConfigError(ValueError):
    """Raised when a configuration file is malformed or inconsistent.

    ``problems`` lists every validation failure found, not just the first.
    """

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class FitError(RuntimeError):
    """Raised when posterior optimization fails to converge.

    Carries the per-grid-point diagnostics accumulated before the failure so
    callers can log or retry with different settings.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics
