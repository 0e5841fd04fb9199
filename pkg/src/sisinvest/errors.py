"""Exception types shared across the package."""


class SisInvestError(Exception):
    """Base class for all errors raised by this package."""


class InputError(SisInvestError):
    """Invalid user-supplied data (graphs, parameters, configs)."""


class ParseError(InputError):
    """Malformed text input; carries the offending line number."""

    def __init__(self, message, line_no=None):
        super().__init__(message)
        self.line_no = line_no


class GenerationError(SisInvestError):
    """Random graph generation failed within the retry budget."""

    def __init__(self, message, attempts=None):
        super().__init__(message)
        self.attempts = attempts


class NumericError(SisInvestError):
    """A numerical routine failed to converge; may carry the last iterate."""

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class SolverError(SisInvestError):
    """An optimization solver failed; carries method and stage labels."""

    def __init__(self, message, method=None, stage=None):
        super().__init__(message)
        self.method = method
        self.stage = stage
