"""Shared exception types."""


class AspanelError(Exception):
    """Base class for all library errors."""


class EmptyPanelError(AspanelError):
    """Ingestion produced no agents after filtering."""


class DegenerateChangeError(AspanelError):
    """The total macro change is (numerically) zero, so shares are undefined."""


class InfeasibleError(AspanelError):
    """Exact coalition enumeration requested above the hard agent-count guard."""


class NonzeroBaselineError(AspanelError):
    """Closed-form attribution requested with a baseline other than zero."""
