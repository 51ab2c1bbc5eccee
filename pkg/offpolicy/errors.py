"""
Exception hierarchy for the off-policy evaluation library.
"""


class OPEError(Exception):
    """Base class for all library errors."""


class SupportViolationError(OPEError, ValueError):
    """Target policy puts mass on an action the behavior policy could not have logged."""


class SizeGuardError(OPEError, ValueError):
    """A generator or enumeration would exceed its configured size limit."""


class NotATreeError(OPEError, ValueError):
    """Input MDP is not a tree MDP (some state has more than one history)."""


class NotLayeredError(OPEError, ValueError):
    """Input MDP has a state reachable at two different time steps."""


class DatasetFormatError(OPEError, ValueError):
    """Malformed dataset file."""

    def __init__(self, message, line_number=None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class ConfigError(OPEError, ValueError):
    """Invalid experiment configuration."""

    def __init__(self, message, line_number=None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
