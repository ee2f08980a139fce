"""Stopping time of the feedback encoder.

The encoder sends codeword bits until the empirical capacity of the flip
pattern catches up with the rate: with ``y(n) = k / (alpha n)`` it stops at
the first ``n >= ceil(k/alpha)`` with ``c2(weight/n) >= y(n)``.  Over the
integers this is ``weight <= t(n)`` or ``weight >= n - t(n)`` with
``t(n) = floor(n c2^{-1}(y(n)))``.

The law of the stopping time only depends on the flips, so everything here is
codebook free.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property

import numpy as np

from .errors import BudgetExceeded, DomainError, InequalityViolation, TruncationError
from .infomath import LN2, binary_capacity, capacity_inverse

HORIZON_CAP = 1 << 20
DEFAULT_RESIDUAL = 1e-9
EXACT_COUNT_MAX_K = 12


def _fraction(x):
    return Fraction(repr(float(x))) if not isinstance(x, (int, Fraction)) else Fraction(x)


@dataclass(frozen=True)
class StoppingProfile:
    """Stopping rule for word length k, rate multiplier alpha and BSC crossover p."""

    k: int
    alpha: float
    p: float
    n_max: int | None = None

    def __post_init__(self):
        if self.k < 1:
            raise DomainError("k must be a positive integer")
        if not self.alpha > 0:
            raise DomainError("alpha must be positive")
        if not 0.0 < self.p < 1.0 or self.p == 0.5:
            raise DomainError(f"crossover {self.p} must lie in (0,1) minus {{1/2}}")
        if self.n_max is None:
            n_max = math.ceil(20 * self.k / (self.alpha * binary_capacity(self.p)))
            object.__setattr__(self, "n_max", min(max(n_max, self.n_min), HORIZON_CAP))
        elif not self.n_min <= self.n_max <= HORIZON_CAP:
            raise DomainError(f"n_max must lie in [{self.n_min}, {HORIZON_CAP}]")

    @cached_property
    def n_min(self):
        return math.ceil(Fraction(self.k) / _fraction(self.alpha))

    def target(self, n):
        """k / (alpha n), the empirical capacity needed to stop at time n."""
        return float(Fraction(self.k) / (_fraction(self.alpha) * n))

    def threshold(self, n):
        """t(n) = floor(n q*(n)); the stop region is weight <= t or >= n - t."""
        if n < self.n_min:
            raise DomainError(f"no threshold below n_min={self.n_min} (n={n})")
        if n <= self.n_max:
            return int(self.thresholds[n - self.n_min])
        return self._threshold(n)

    def _threshold(self, n):
        y = min(1.0, self.target(n))
        t = math.floor(n * capacity_inverse(y))
        # bisection lands within 1e-12 of q*; settle the floor on the exact test
        while 2 * (t + 1) <= n and binary_capacity((t + 1) / n) >= y:
            t += 1
        while t >= 0 and binary_capacity(t / n) < y:
            t -= 1
        return t

    @cached_property
    def thresholds(self):
        t = np.array([self._threshold(n) for n in range(self.n_min, self.n_max + 1)], dtype=np.int64)
        t.setflags(write=False)
        return t

    def q_star(self, n):
        return capacity_inverse(min(1.0, self.target(n)))

    def stops(self, n, weight):
        if n < self.n_min:
            return False
        t = self.threshold(n)
        return weight <= t or weight >= n - t

    @cached_property
    def alive_intervals(self):
        """(lo[m], hi[m]) for m = 0..n_max: weights reachable without stopping."""
        lo = np.zeros(self.n_max + 1, dtype=np.int64)
        hi = np.zeros(self.n_max + 1, dtype=np.int64)
        a, b = 0, 0
        for m in range(1, self.n_max + 1):
            a, b = a, b + 1
            if m >= self.n_min:
                t = self.threshold(m)
                a, b = max(a, t + 1), min(b, m - t - 1)
            lo[m], hi[m] = a, b
        return lo, hi

    def rate_limit(self):
        """alpha c2(p), the limit of k / E[N]."""
        return self.alpha * binary_capacity(self.p)


def walk_stop(profile, flips):
    """First (n, weight) at which the flip walk stops, or None if still alive.

    Raises InequalityViolation if a stop lands strictly inside the stop region
    instead of exactly on its boundary.
    """
    flips = np.asarray(flips, dtype=np.int64)
    m = flips.size
    if m > profile.n_max:
        raise DomainError(f"{m} flips exceed n_max={profile.n_max}")
    if m < profile.n_min:
        return None
    w = np.cumsum(flips)[profile.n_min - 1:]
    n = np.arange(profile.n_min, m + 1)
    t = profile.thresholds[: n.size]
    hit = np.flatnonzero((w <= t) | (w >= n - t))
    if hit.size == 0:
        return None
    i = hit[0]
    n_stop, w_stop, t_stop = int(n[i]), int(w[i]), int(t[i])
    if w_stop not in (t_stop, n_stop - t_stop):
        raise InequalityViolation(
            f"stop at n={n_stop} with weight {w_stop} off the boundary {{{t_stop}, {n_stop - t_stop}}}"
        )
    return n_stop, w_stop


def rho(n, t, p):
    """Posterior weight of the low-weight stopping class given N = n."""
    if p == 0.5:
        return 0.5
    r = (p / (1.0 - p)) ** (n - 2 * t)
    return 1.0 / (1.0 + r)


@dataclass(frozen=True)
class StopLaw:
    """Exact law of the stopping time truncated at profile.n_max.

    Arrays are indexed by support position and hold: time ``n``, threshold
    ``t``, ``log2_count_b1 = log2 |B_n^1|`` (= log2 |B_n^2|), the masses of
    the low and high stopping classes, ``prob = Pr{N=n}`` and ``rho``.
    """

    profile: StoppingProfile
    n: np.ndarray
    t: np.ndarray
    log2_count_b1: np.ndarray
    prob_low: np.ndarray
    prob_high: np.ndarray
    residual_mass: float
    counts_b1: tuple | None = None
    counts_b2: tuple | None = None
    extra: dict = field(default_factory=dict)

    @property
    def prob(self):
        return self.prob_low + self.prob_high

    @property
    def rho(self):
        return np.array([rho(int(n), int(t), self.profile.p) for n, t in zip(self.n, self.t)])

    @property
    def support(self):
        return [int(n) for n in self.n]

    def index(self, n):
        i = int(np.searchsorted(self.n, n))
        if i >= self.n.size or self.n[i] != n:
            raise DomainError(f"n={n} is not in the support of N_k")
        return i

    def entry(self, n):
        i = self.index(n)
        return {
            "n": int(self.n[i]),
            "t": int(self.t[i]),
            "log2CountB1": float(self.log2_count_b1[i]),
            "prob": float(self.prob[i]),
            "rho": rho(int(self.n[i]), int(self.t[i]), self.profile.p),
        }

    def count_b(self, n):
        """|B_n| as a float (both classes)."""
        return 2.0 * 2.0 ** float(self.log2_count_b1[self.index(n)])

    def prob_of(self, n):
        try:
            return float(self.prob[self.index(n)])
        except DomainError:
            return 0.0

    def _states(self):
        """Stopped states as arrays (n, weight, mass)."""
        n = np.concatenate([self.n, self.n]).astype(float)
        w = np.concatenate([self.t, self.n - self.t]).astype(float)
        mass = np.concatenate([self.prob_low, self.prob_high])
        return n, w, mass

    @cached_property
    def moments(self):
        n, w, mass = self._states()
        s = w - n * self.profile.p
        return {
            "mass": float(mass.sum()),
            "E[N]": float((mass * n).sum()),
            "E[S_N]": float((mass * s).sum()),
            "E[S_N^2/N]": float((mass * s * s / n).sum()),
            "E[1+ln N]": float((mass * (1.0 + np.log(n))).sum()),
        }

    @property
    def expected_length(self):
        return self.moments["E[N]"]

    def rate(self):
        return self.profile.k / self.expected_length

    def to_rows(self):
        cum = np.cumsum(self.prob)
        rhos = self.rho
        return [
            {"n": int(self.n[i]), "t": int(self.t[i]), "log2_countB1": float(self.log2_count_b1[i]),
             "prob": float(self.prob[i]), "rho": float(rhos[i]), "cumulative": float(cum[i])}
            for i in range(self.n.size)
        ]

    def to_csv(self):
        buf = io.StringIO()
        cols = ["n", "t", "log2_countB1", "prob", "rho", "cumulative"]
        writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        for row in self.to_rows():
            writer.writerow({c: (repr(v) if isinstance(v, float) else v) for c, v in row.items()})
        return buf.getvalue()


def stop_law_dp(profile, residual_bound=DEFAULT_RESIDUAL, exact_counts=None):
    """Exact law of N_k by a forward DP over (time, weight) with absorbing boundaries.

    Probabilities are propagated in the linear domain and pattern counts in
    the log2 domain.  With ``exact_counts`` (default: k <= 12) counts are also
    carried as Python integers.
    """
    p = profile.p
    q = 1.0 - p
    if exact_counts is None:
        exact_counts = profile.k <= EXACT_COUNT_MAX_K
    prob = np.array([1.0])
    lc = np.array([0.0])
    ints = [1] if exact_counts else None
    out_n, out_t, out_lc, out_lo, out_hi = [], [], [], [], []
    c1s, c2s = [], []
    for n in range(1, profile.n_max + 1):
        new = np.empty(n + 1)
        new[:-1] = q * prob
        new[-1] = 0.0
        new[1:] += p * prob
        nlc = np.full(n + 1, -np.inf)
        nlc[:-1] = lc
        nlc[1:] = np.logaddexp2(nlc[1:], lc)
        if ints is not None:
            nint = [0] * (n + 1)
            for w, c in enumerate(ints):
                if c:
                    nint[w] += c
                    nint[w + 1] += c
            ints = nint
        prob, lc = new, nlc
        if n < profile.n_min:
            continue
        t = profile.threshold(n)
        hi_w = n - t
        # boundary-hit: nothing may be absorbed strictly inside the stop region
        if np.any(np.isfinite(lc[:t])) or np.any(np.isfinite(lc[hi_w + 1:])):
            raise InequalityViolation(f"stopping region entered off its boundary at n={n}")
        if np.isfinite(lc[t]):
            if not math.isclose(lc[t], lc[hi_w], rel_tol=0, abs_tol=1e-9):
                raise InequalityViolation(f"|B_n^1| != |B_n^2| at n={n}")
            out_n.append(n)
            out_t.append(t)
            out_lc.append(float(lc[t]))
            out_lo.append(float(prob[t]))
            out_hi.append(float(prob[hi_w]))
            if ints is not None:
                if ints[t] != ints[hi_w]:
                    raise InequalityViolation(f"|B_n^1| != |B_n^2| at n={n}")
                c1s.append(ints[t])
                c2s.append(ints[hi_w])
        elif np.isfinite(lc[hi_w]):
            raise InequalityViolation(f"|B_n^1| != |B_n^2| at n={n}")
        prob[: t + 1] = 0.0
        prob[hi_w:] = 0.0
        lc[: t + 1] = -np.inf
        lc[hi_w:] = -np.inf
        if ints is not None:
            for w in list(range(t + 1)) + list(range(hi_w, n + 1)):
                ints[w] = 0
    residual = float(prob.sum())
    if residual > residual_bound:
        raise TruncationError(
            f"residual mass {residual:.3g} beyond n_max={profile.n_max} exceeds {residual_bound:g}; "
            "increase n_max"
        )
    return StopLaw(
        profile=profile,
        n=np.array(out_n, dtype=np.int64),
        t=np.array(out_t, dtype=np.int64),
        log2_count_b1=np.array(out_lc),
        prob_low=np.array(out_lo),
        prob_high=np.array(out_hi),
        residual_mass=residual,
        counts_b1=tuple(c1s) if exact_counts else None,
        counts_b2=tuple(c2s) if exact_counts else None,
    )


def enumerate_stop_patterns(profile, n, cap=1 << 24, law=None):
    """Explicit stopping sets (B_n^1, B_n^2) as packed uint64 arrays (n <= 64).

    Patterns are generated backwards from the stopping states through the
    alive intervals of the walk, so the work is proportional to |B_n|.
    """
    if n > 64:
        raise DomainError("explicit enumeration is limited to n <= 64")
    if n < profile.n_min or n > profile.n_max:
        raise DomainError(f"n={n} outside [{profile.n_min}, {profile.n_max}]")
    if law is not None:
        est = law.count_b(n) if n in set(law.support) else 0.0
        if est > cap:
            raise BudgetExceeded(
                f"|B_{n}| ~ {est:.3g} exceeds cap {cap}; use stop_law_dp counts instead"
            )
    lo, hi = profile.alive_intervals
    t = profile.threshold(n)
    ends = list(range(0, t + 1)) + list(range(n - t, n + 1))
    pats = np.zeros(len(ends), dtype=np.uint64)
    wts = np.array(ends, dtype=np.int64)
    for m in range(n, 0, -1):
        bit = np.uint64(1) << np.uint64(m - 1)
        # predecessor via flip 0 keeps the weight, via flip 1 lowers it
        w0, w1 = wts, wts - 1
        prev_ok0 = (w0 >= lo[m - 1]) & (w0 <= hi[m - 1])
        prev_ok1 = (w1 >= lo[m - 1]) & (w1 <= hi[m - 1])
        pats = np.concatenate([pats[prev_ok0], pats[prev_ok1] | bit])
        wts = np.concatenate([w0[prev_ok0], w1[prev_ok1]])
        if pats.size > cap:
            raise BudgetExceeded(f"|B_{n}| exceeds cap {cap}; use stop_law_dp counts instead")
    weights = np.bitwise_count(pats).astype(np.int64)
    low = weights <= t
    b1, b2 = np.sort(pats[low]), np.sort(pats[~low])
    bad = (weights != t) & (weights != n - t)
    if np.any(bad):
        raise InequalityViolation(f"stopping pattern at n={n} off the boundary weights")
    return b1, b2


def lemma1_bounds(profile):
    """Finite-k bounds (lower, upper) on k / E[N_k] in bits per channel use.

    lower = alpha c2(p) - alpha^2 / k
    upper = alpha c2(p) + alpha (1/ln 2) (1 + ln(k/alpha)) / (k/alpha)
    """
    k, alpha = profile.k, profile.alpha
    if k < alpha:
        raise DomainError("the bounds need k >= alpha")
    base = profile.rate_limit()
    x = k / alpha
    return base - alpha**2 / k, base + alpha / LN2 * (1.0 + math.log(x)) / x
