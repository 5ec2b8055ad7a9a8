"""Exception hierarchy shared by every msva module."""


class MSVAError(Exception):
    """Base class for all msva errors."""


class ConfigurationError(MSVAError, ValueError):
    """Invalid hyper-parameter, option or call configuration."""


class DimensionError(MSVAError, ValueError):
    """Tensor or array shapes do not agree."""


class InvalidMaskError(ConfigurationError):
    """An attention mask row has no admissible entry."""


class ContractError(MSVAError, RuntimeError):
    """A caller broke an operation's precondition (non-scalar loss, dropout during a gradient check)."""


class BundleError(MSVAError, ValueError):
    """A feature bundle is inconsistent with the requested computation."""


class ValidationError(BundleError):
    """A bundle violates one or more of its invariants.

    ``violations`` holds the individual rule messages.
    """

    def __init__(self, violations, where=None):
        self.violations = list(violations)
        self.where = where
        prefix = f"{where}: " if where else ""
        super().__init__(prefix + "; ".join(self.violations))


class FormatError(MSVAError, ValueError):
    """A file on disk is corrupt, truncated or written by an incompatible version."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")
