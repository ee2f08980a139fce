"""Variable-length channel resolvability with feedback over the BSC.

Exact stopping-time laws, output-divergence measurement and numerical
evaluators for the associated rate, exponent and converse formulas.
"""

from .errors import (
    BudgetExceeded,
    DomainError,
    InequalityViolation,
    InfeasibleReference,
    ResolvlabError,
    TruncationError,
)

__version__ = "0.1.0"

__all__ = [
    "BudgetExceeded",
    "DomainError",
    "InequalityViolation",
    "InfeasibleReference",
    "ResolvlabError",
    "TruncationError",
]
