"""Monte Carlo execution of the feedback encoder over a simulated BSC.

Randomness is counter based: run ``r`` of an experiment with seed ``s`` uses
noise seed ``chain(RUNSEED_TAG, s, r)``, flips
``B_i = [chain(NOISE_TAG, noiseSeed, i) >> 11 < floor(p 2^53)]`` and input
word ``chain(WORD_TAG, s, r, j)`` limbs masked to k bits.  Results therefore
do not depend on execution order or on how runs are split across workers.
"""

from __future__ import annotations

import math
import warnings
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .codebook import (
    NOISE_TAG,
    RUNSEED_TAG,
    WORD_TAG,
    chain,
    chain_array,
    mix64,
    pack_bits,
)
from .errors import DomainError, InequalityViolation, TruncationError
from .stopping import StopLaw, StoppingProfile, stop_law_dp, walk_stop

TRUNC_WARN = 1e-6
TRUNC_ERROR = 1e-3


class TruncationWarning(UserWarning):
    pass


def flip_threshold(p):
    return int(p * (1 << 53))


def run_noise_seed(seed, run_index):
    return chain(RUNSEED_TAG, seed, run_index)


def run_word(seed, run_index, k):
    """Uniform word in [0, 2^k) for run `run_index` (masking, no rejection)."""
    out = 0
    for j in range((k + 63) // 64):
        out |= chain(WORD_TAG, seed, run_index, j) << (64 * j)
    return out & ((1 << k) - 1)


def run_words_array(seed, run_indices, k):
    if k > 64:
        raise DomainError("vectorized word draws need k <= 64")
    h = chain_array(np.uint64(mix64(mix64(WORD_TAG) ^ seed)), np.asarray(run_indices, dtype=np.uint64))
    h = chain_array(h, np.uint64(0))
    return h & np.uint64((1 << k) - 1) if k < 64 else h


def noise_seeds_array(seed, run_indices):
    return chain_array(np.uint64(mix64(mix64(RUNSEED_TAG) ^ seed)), np.asarray(run_indices, dtype=np.uint64))


def flips(noise_seed, n, p, start=1):
    """Flip bits B_start .. B_{start+n-1} of one noise stream."""
    h0 = np.uint64(mix64(mix64(NOISE_TAG) ^ noise_seed))
    pos = np.arange(start, start + n, dtype=np.uint64)
    return ((chain_array(h0, pos) >> np.uint64(11)) < np.uint64(flip_threshold(p))).astype(np.uint8)


def _flip_states(noise_seeds):
    return chain_array(np.uint64(mix64(NOISE_TAG)), noise_seeds)


@dataclass
class RunRecord:
    """One encoder run: word, stopping time, flip weight and channel output."""

    word: int
    stop_time: int
    flip_weight: int
    output: np.ndarray
    truncated: bool
    log_likelihood_ratio: float | None = None

    def output_bits(self):
        from .codebook import unpack_bits

        return unpack_bits(self.output, self.stop_time)


def run_once(book, profile, word, noise_seed):
    """Run the encoder: send u_n(w) until k/n <= alpha c2(dist(u^n, V^n)/n)."""
    if not 0 <= word < book.size:
        raise DomainError(f"word {word} outside [0, 2^{book.k})")
    if book.k != profile.k:
        raise DomainError("codebook and profile disagree on k")
    chunk = 256
    u = np.zeros(0, dtype=np.uint8)
    b = np.zeros(0, dtype=np.uint8)
    dist = 0
    n = 0
    outputs = []
    stopped = False
    while n < profile.n_max and not stopped:
        m = min(chunk, profile.n_max - n)
        u_new = book.prefix_bits(word, n + m)[n:]
        b_new = flips(noise_seed, m, profile.p, start=n + 1)
        u = np.concatenate([u, u_new])
        b = np.concatenate([b, b_new])
        for i in range(m):
            v = int(u_new[i]) ^ int(b_new[i])
            outputs.append(v)
            n += 1
            dist += v ^ int(u_new[i])  # the encoder only sees V through feedback
            if profile.stops(n, dist):
                stopped = True
                break
    check = walk_stop(profile, b[:n])
    if stopped:
        if check != (n, dist):
            raise InequalityViolation("encoder stop disagrees with the flip-stream walk")
    elif check is not None:
        raise InequalityViolation("flip-stream walk stopped but the encoder did not")
    return RunRecord(word=word, stop_time=n, flip_weight=dist, output=pack_bits(outputs),
                     truncated=not stopped)


def simulate_stops(profile, noise_seeds):
    """Vectorized stopping times for many noise streams.

    Returns (stop_time, weight, truncated) arrays; truncated runs report
    ``n_max`` and their weight there.
    """
    noise_seeds = np.asarray(noise_seeds, dtype=np.uint64)
    r = noise_seeds.size
    h = _flip_states(noise_seeds)
    thr = np.uint64(flip_threshold(profile.p))
    weight = np.zeros(r, dtype=np.int64)
    stop = np.zeros(r, dtype=np.int64)
    alive = np.arange(r)
    for n in range(1, profile.n_max + 1):
        if alive.size == 0:
            break
        f = (chain_array(h[alive], np.uint64(n)) >> np.uint64(11)) < thr
        weight[alive] += f
        if n < profile.n_min:
            continue
        t = profile.threshold(n)
        w = weight[alive]
        hit = (w <= t) | (w >= n - t)
        if np.any(hit):
            ws = w[hit]
            if np.any((ws != t) & (ws != n - t)):
                raise InequalityViolation(f"simulated stop off the boundary at n={n}")
            stop[alive[hit]] = n
            alive = alive[~hit]
    truncated = np.zeros(r, dtype=bool)
    truncated[alive] = True
    stop[alive] = profile.n_max
    return stop, weight, truncated


def _stops_chunk(args):
    profile, seed, start, stop_ = args
    seeds = noise_seeds_array(seed, np.arange(start, stop_, dtype=np.uint64))
    n, w, tr = simulate_stops(profile, seeds)
    return Counter(zip(n.tolist(), w.tolist(), tr.tolist()))


def _stop_histogram(profile, runs, seed, workers=1):
    """Counter over (stop_time, weight, truncated) for runs 0..runs-1."""
    bounds = np.linspace(0, runs, max(workers, 1) * 4 + 1).astype(int) if workers > 1 else [0, runs]
    tasks = [(profile, seed, int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    total = Counter()
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            for c in ex.map(_stops_chunk, tasks):
                total.update(c)
    else:
        for task in tasks:
            total.update(_stops_chunk(task))
    return total


def _mean_stderr(values_counts):
    """Mean and standard error from (value, count) pairs, summed exactly."""
    total = sum(c for _, c in values_counts)
    mean = math.fsum(v * c for v, c in values_counts) / total
    if total < 2:
        return mean, 0.0
    var = math.fsum(c * (v - mean) ** 2 for v, c in values_counts) / (total - 1)
    return mean, math.sqrt(var / total)


def run_many(book, profile, runs, seed, workers=1):
    """Stopping statistics over ``runs`` independent encoder runs.

    Stopping times depend only on the flips, so the codebook enters only
    through k (words are drawn but do not affect the summary).
    """
    if runs < 1:
        raise DomainError("runs must be at least 1")
    if book is not None and book.k != profile.k:
        raise DomainError("codebook and profile disagree on k")
    hist = _stop_histogram(profile, runs, seed, workers)
    trunc = sum(c for (n, w, tr), c in hist.items() if tr)
    frac = trunc / runs
    if frac > TRUNC_ERROR:
        raise TruncationError(f"truncated fraction {frac:.3g} exceeds {TRUNC_ERROR}")
    if frac > TRUNC_WARN:
        warnings.warn(f"truncated fraction {frac:.3g}", TruncationWarning, stacklevel=2)
    ok = sorted((n, w, c) for (n, w, tr), c in hist.items() if not tr)
    by_n = Counter()
    for n, w, c in ok:
        by_n[n] += c
    mean_n, se_n = _mean_stderr([(n, c) for n, c in sorted(by_n.items())])
    s_vals = [(w - n * profile.p, c) for n, w, c in ok]
    mean_s, se_s = _mean_stderr(s_vals)
    return {
        "runs": runs,
        "seed": seed,
        "k": profile.k,
        "alpha": profile.alpha,
        "p": profile.p,
        "meanN": mean_n,
        "stderrN": se_n,
        "rate": profile.k / mean_n,
        "meanS": mean_s,
        "stderrS": se_s,
        "truncationFraction": frac,
        "histogram": {str(n): c for n, c in sorted(by_n.items())},
        "stopStates": [[n, w, c] for n, w, c in ok],
    }


def histogram_csv(summary):
    lines = ["n,count"]
    for n, c in summary["histogram"].items():
        lines.append(f"{n},{c}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class FixedTime:
    """Test fixture: a stopping rule that always stops at time m."""

    m: int
    p: float

    @property
    def n_min(self):
        return self.m

    @property
    def n_max(self):
        return self.m


def _fixed_time_sides(rule):
    from scipy.stats import binom

    m, p = rule.m, rule.p
    w = np.arange(m + 1)
    pmf = binom.pmf(w, m, p)
    s = w - m * p
    return float((pmf * s * s / m).sum()), p * (1 - p) * (1 + math.log(m))


def martingale_check(profile, runs, seed, law=None):
    """Both sides of E[S_N^2/N] <= p(1-p) E[1 + ln N], by Monte Carlo and exactly."""
    if runs < 1:
        raise DomainError("runs must be at least 1")
    p = profile.p
    var = p * (1 - p)
    if isinstance(profile, FixedTime):
        seeds = noise_seeds_array(seed, np.arange(runs, dtype=np.uint64))
        h = _flip_states(seeds)
        thr = np.uint64(flip_threshold(p))
        w = np.zeros(runs, dtype=np.int64)
        for i in range(1, profile.m + 1):
            w += (chain_array(h, np.uint64(i)) >> np.uint64(11)) < thr
        states = Counter((profile.m, int(x)) for x in w)
        exact_lhs, exact_rhs = _fixed_time_sides(profile)
    else:
        hist = _stop_histogram(profile, runs, seed)
        states = Counter()
        for (n, w, tr), c in hist.items():
            states[(n, w)] += c
        law = law if law is not None else stop_law_dp(profile)
        mom = law.moments
        exact_lhs, exact_rhs = mom["E[S_N^2/N]"], var * mom["E[1+ln N]"]
    items = sorted(states.items())
    lhs, lhs_se = _mean_stderr([((w - n * p) ** 2 / n, c) for (n, w), c in items])
    rhs, rhs_se = _mean_stderr([(var * (1 + math.log(n)), c) for (n, w), c in items])
    return {
        "lhs": lhs,
        "lhsStderr": lhs_se,
        "rhs": rhs,
        "rhsStderr": rhs_se,
        "exactLhs": exact_lhs,
        "exactRhs": exact_rhs,
        "holds": bool(exact_lhs <= exact_rhs),
    }


def law_histogram_deviation(law: StopLaw, summary):
    """Max over n with prob >= 10/runs of |empirical - exact| / sqrt(prob(1-prob)/runs)."""
    runs = summary["runs"]
    worst = 0.0
    for n, prob in zip(law.n.tolist(), law.prob.tolist()):
        if prob < 10 / runs:
            continue
        emp = summary["histogram"].get(str(n), 0) / runs
        worst = max(worst, abs(emp - prob) / math.sqrt(prob * (1 - prob) / runs))
    return worst


__all__ = [
    "FixedTime",
    "RunRecord",
    "StoppingProfile",
    "flips",
    "law_histogram_deviation",
    "martingale_check",
    "run_many",
    "run_noise_seed",
    "run_once",
    "run_word",
    "simulate_stops",
]

