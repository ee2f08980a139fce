class ResolvlabError(Exception):
    """Base class for all library errors."""


class DomainError(ResolvlabError, ValueError):
    """An argument lies outside the domain of the function."""


class InfeasibleReference(ResolvlabError):
    """No input distribution synthesizes the reference measure exactly."""


class BudgetExceeded(ResolvlabError):
    """An exact enumeration would exceed its configured work budget."""


class TruncationError(ResolvlabError):
    """Too much probability mass lies beyond the truncation horizon."""


class InequalityViolation(ResolvlabError):
    """A verified inequality failed, or a structural invariant was broken."""
