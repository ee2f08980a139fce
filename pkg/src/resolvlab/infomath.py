"""Scalar binary information functions (all in bits).

Conventions: logarithms are base 2 and ``0 log 0 = 0``.  Natural logarithms
only enter through :func:`beta_bound`, where they are converted explicitly.
"""

import math
import warnings

from .errors import DomainError

LN2 = math.log(2.0)

_BISECTION_TOL = 1e-12


class BetaDomainWarning(UserWarning):
    """beta_bound was evaluated outside the region where it is increasing."""


def _check_prob(x, name="q"):
    if not (0.0 <= x <= 1.0) or math.isnan(x):
        raise DomainError(f"{name}={x!r} is not a probability")


def _xlog2x(x):
    return 0.0 if x == 0.0 else x * math.log2(x)


def binary_entropy(q):
    """h2(q) = q log(1/q) + (1-q) log(1/(1-q))."""
    _check_prob(q)
    return -_xlog2x(q) - _xlog2x(1.0 - q)


def binary_capacity(q):
    """c2(q) = 1 - h2(q), the capacity of a BSC with crossover q."""
    return 1.0 - binary_entropy(q)


def binary_divergence(q, p):
    """d2(q||p) in bits.

    ``p`` on the boundary is accepted only when ``q`` coincides with it, in
    which case the divergence is zero.
    """
    _check_prob(q)
    _check_prob(p, "p")
    if p in (0.0, 1.0):
        if q == p:
            return 0.0
        raise DomainError(f"d2({q}||{p}) is infinite")
    out = 0.0
    if q > 0.0:
        out += q * math.log2(q / p)
    if q < 1.0:
        out += (1.0 - q) * math.log2((1.0 - q) / (1.0 - p))
    return max(out, 0.0)


def f2(q, p):
    """f2(q||p) = 1 + q log p + (1-q) log(1-p).

    Equals c2(q) - d2(q||p); the exponent of ``2^n p^{nq} (1-p)^{n(1-q)}``.
    """
    _check_prob(q)
    _check_prob(p, "p")
    if p in (0.0, 1.0):
        raise DomainError("f2 requires p in (0, 1)")
    return 1.0 + q * math.log2(p) + (1.0 - q) * math.log2(1.0 - p)


def capacity_inverse(y):
    """The unique q in [0, 1/2] with c2(q) = y, by bisection."""
    if not (0.0 <= y <= 1.0) or math.isnan(y):
        raise DomainError(f"y={y!r} outside [0, 1]")
    if y == 1.0:
        return 0.0
    if y == 0.0:
        return 0.5
    lo, hi = 0.0, 0.5  # c2(lo) >= y >= c2(hi)
    while hi - lo > _BISECTION_TOL:
        mid = 0.5 * (lo + hi)
        if binary_capacity(mid) > y:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def capacity_derivatives(q):
    """Return (c2'(q), c2''(q))."""
    _check_prob(q)
    if q in (0.0, 1.0):
        raise DomainError("c2 is not differentiable at the endpoints")
    return math.log2(q / (1.0 - q)), 1.0 / (LN2 * q * (1.0 - q))


def beta_increasing(delta, out_size):
    """Whether beta_bound is increasing at ``delta``."""
    return math.sqrt(2.0 * LN2 * delta) <= out_size / math.e


def beta_bound(delta, out_size=2):
    """Entropy-continuity penalty s log(|V|/s) with s = sqrt(2 ln2 delta).

    Emits :class:`BetaDomainWarning` when ``s > |V|/e``, beyond which the
    function is no longer increasing in ``delta``.
    """
    if delta < 0 or math.isnan(delta):
        raise DomainError(f"delta={delta!r} must be >= 0")
    if out_size < 2:
        raise DomainError("output alphabet needs at least two letters")
    if delta == 0:
        return 0.0
    s = math.sqrt(2.0 * LN2 * delta)
    if not beta_increasing(delta, out_size):
        warnings.warn(
            f"beta evaluated at delta={delta:g} where it is decreasing",
            BetaDomainWarning,
            stacklevel=2,
        )
    return s * math.log2(out_size / s)
