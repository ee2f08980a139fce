"""Expected output divergence of the feedback scheme, exact and by Monte Carlo.

Given ``N = n`` the output law is a two-class mixture over the stopping sets
B_n^1, B_n^2 shifted by the codewords; against the uniform reference its
likelihood ratio is

    L(v) = 2^{n-k} / |B_n^1| * (rho_n Omega_1(v) + (1 - rho_n) Omega_2(v)),

with ``Omega_i(v) = #{w : u^n(w) xor v in B_n^i}``.  The exact routine
accumulates the output distribution by enumerating (word, pattern) pairs;
``omega_counts`` recomputes the class counts by walking each shifted
codeword, which is an independent route to the same numbers.
"""

from __future__ import annotations

import functools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .codebook import RandomCodebook, chain_array, unpack_bits
from .errors import BudgetExceeded, DomainError, InequalityViolation
from .infomath import LN2, binary_capacity, binary_entropy, f2
from .simulator import (
    _flip_states,
    flip_threshold,
    noise_seeds_array,
    run_words_array,
    simulate_stops,
)
from .stopping import StopLaw, StoppingProfile, enumerate_stop_patterns, rho, stop_law_dp

DEFAULT_BUDGET = 100_000_000
DENSE_MAX_N = 24
CHUNK_EVENTS = 1 << 22
SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# stop-class membership by walking


def _prefix_masks(n):
    return np.array([(1 << m) - 1 for m in range(n + 1)], dtype=np.uint64)


def stop_classes_packed(profile, patterns, n):
    """Membership of packed length-n patterns (n <= 64) in B_n^1 and B_n^2."""
    x = np.asarray(patterns, dtype=np.uint64)
    masks = _prefix_masks(n)
    alive = np.ones(x.shape, dtype=bool)
    for m in range(profile.n_min, n):
        t = profile.threshold(m)
        w = np.bitwise_count(x & masks[m])
        alive &= (w > t) & (w < m - t)
    w = np.bitwise_count(x & masks[n]).astype(np.int64)
    t = profile.threshold(n)
    return alive & (w <= t), alive & (w >= n - t)


def stop_classes_bits(profile, bits):
    """Membership of unpacked patterns (rows of a 0/1 matrix of width n)."""
    bits = np.atleast_2d(np.asarray(bits, dtype=np.int64))
    n = bits.shape[1]
    w = np.cumsum(bits, axis=1)
    alive = np.ones(bits.shape[0], dtype=bool)
    for m in range(profile.n_min, n):
        t = profile.threshold(m)
        wm = w[:, m - 1]
        alive &= (wm > t) & (wm < m - t)
    t = profile.threshold(n)
    return alive & (w[:, -1] <= t), alive & (w[:, -1] >= n - t)


@functools.lru_cache(maxsize=64)
def _cached_bits(book, n):
    return np.stack([book.prefix_bits(w, n) for w in range(book.size)])


@functools.lru_cache(maxsize=256)
def _cached_table(book, n):
    return book.prefix_table(n)


def _codeword_bits(book, n):
    """(2^k, n) matrix of codeword prefix bits."""
    # only plain random codebooks are cached: fixtures carry state outside the hash
    if type(book) is RandomCodebook:
        return _cached_bits(book, n)
    return np.stack([book.prefix_bits(w, n) for w in range(book.size)])


def _prefix_table(book, n):
    if type(book) is RandomCodebook:
        return _cached_table(book, n)
    return book.prefix_table(n)


def _as_packed_int(v, n):
    if isinstance(v, (int, np.integer)):
        return int(v)
    v = np.asarray(v)
    if v.dtype == np.uint64:
        return sum(int(x) << (64 * i) for i, x in enumerate(v.tolist())) & ((1 << n) - 1)
    return sum(int(b) << i for i, b in enumerate(v[:n].tolist()))


def omega_counts(book, profile, v, n):
    """(Omega_1, Omega_2): codewords whose length-n prefix xor v stops in each class.

    ``v`` is a packed integer, a packed uint64 word array or a 0/1 sequence.
    """
    if n < profile.n_min:
        raise DomainError(f"n={n} cannot be a stopping time (n_min={profile.n_min})")
    v = _as_packed_int(v, n)
    if n <= 64:
        x = _prefix_table(book, n) ^ np.uint64(v)
        c1, c2 = stop_classes_packed(profile, x, n)
    else:
        vb = np.array([(v >> i) & 1 for i in range(n)], dtype=np.uint8)
        c1, c2 = stop_classes_bits(profile, _codeword_bits(book, n) ^ vb[None, :])
    return int(c1.sum()), int(c2.sum())


def _log2_l(n, k, log2_b1, r, om1, om2):
    q = r * np.asarray(om1, dtype=float) + (1.0 - r) * np.asarray(om2, dtype=float)
    with np.errstate(divide="ignore"):
        return (n - k - log2_b1) + np.log2(q)


def log2_likelihood_ratio(book, profile, law, v, n):
    """log2 L(v) at a stopping time n; -inf off the support."""
    e = law.entry(n)
    om1, om2 = omega_counts(book, profile, v, n)
    return float(_log2_l(n, book.k, e["log2CountB1"], e["rho"], om1, om2))


def likelihood_ratio(book, profile, law, v, n):
    """L(v) = P(v | N=n) / 2^{-n}."""
    return 2.0 ** log2_likelihood_ratio(book, profile, law, v, n)


# ---------------------------------------------------------------------------
# exact divergence


@dataclass
class DivergenceReport:
    """Per-n divergences D(P_{V^n|N=n} || uniform) and their Pr{N=n}-average.

    For exact reports ``total`` covers n <= horizon; ``tail_bound`` is a
    rigorous upper bound on the omitted terms (so the true value lies in
    ``[total, total + tail_bound]``).  Monte Carlo reports carry ``stderr``.
    """

    method: str
    total: float
    per_n: dict = field(default_factory=dict)
    stderr: float = 0.0
    truncated_mass: float = 0.0
    tail_bound: float = 0.0
    horizon: int | None = None
    runs: int | None = None
    descriptor: dict | None = None

    @property
    def upper(self):
        return self.total + self.tail_bound

    def to_dict(self):
        d = asdict(self)
        d["per_n"] = {str(n): v for n, v in sorted(self.per_n.items())}
        d["upper"] = self.upper
        return {
            "method": d["method"],
            "total": d["total"],
            "upper": d["upper"],
            "stderr": d["stderr"],
            "truncatedMass": d["truncated_mass"],
            "tailBound": d["tail_bound"],
            "horizon": d["horizon"],
            "runs": d["runs"],
            "codebook": d["descriptor"],
            "perN": d["per_n"],
        }


@functools.lru_cache(maxsize=4096)
def _stop_sets(profile, n):
    b1, b2 = enumerate_stop_patterns(profile, n, cap=DEFAULT_BUDGET)
    b1.setflags(write=False)
    b2.setflags(write=False)
    return b1, b2


def events_at(law, n, k):
    return (1 << k) * law.count_b(n)


def feasible_horizon(law, k, budget=DEFAULT_BUDGET, n_cap=64):
    """Largest h such that every support point n <= h is enumerable within budget."""
    h = None
    for n in law.support:
        if n > n_cap or events_at(law, n, k) > budget:
            break
        h = n
    return h


def prefix_entropy(book, n):
    """Entropy (bits) of the length-n codeword prefix under a uniform word."""
    n = min(n, 64)
    _, counts = np.unique(_prefix_table(book, n), return_counts=True)
    pr = counts / counts.sum()
    return float(-(pr * np.log2(pr)).sum())


def divergence_upper_bound(book, law, n):
    """Code-specific bound D_n <= n - max(H(B^n | N=n), H(u^n(W)))."""
    e = law.entry(n)
    h_flips = binary_entropy(e["rho"]) + e["log2CountB1"]
    h_code = prefix_entropy(book, n) if book.k <= 24 else 0.0
    return min(float(n), max(0.0, n - max(h_flips, h_code)))


def _accumulate_counts(prefixes, patterns, n):
    """Histogram of prefix xor pattern over all pairs, as (keys, counts)."""
    rows = max(1, CHUNK_EVENTS // max(patterns.size, 1))
    if n <= DENSE_MAX_N:
        acc = np.zeros(1 << n, dtype=np.int64)
        for i in range(0, prefixes.size, rows):
            keys = (prefixes[i:i + rows, None] ^ patterns[None, :]).ravel()
            acc += np.bincount(keys.astype(np.int64), minlength=1 << n)
        keys = np.flatnonzero(acc).astype(np.uint64)
        return keys, acc[keys.astype(np.int64)]
    parts_k, parts_c = [], []
    for i in range(0, prefixes.size, rows):
        keys = (prefixes[i:i + rows, None] ^ patterns[None, :]).ravel()
        uk, uc = np.unique(keys, return_counts=True)
        parts_k.append(uk)
        parts_c.append(uc)
    keys = np.concatenate(parts_k)
    counts = np.concatenate(parts_c)
    order = np.argsort(keys, kind="stable")
    keys, counts = keys[order], counts[order]
    starts = np.flatnonzero(np.concatenate([[True], keys[1:] != keys[:-1]]))
    return keys[starts], np.add.reduceat(counts, starts)


def output_law(book, profile, law, n):
    """Exact P(v | N=n) on its support as (packed keys, probabilities)."""
    b1, b2 = _stop_sets(profile, n)
    u = _prefix_table(book, n)
    e = law.entry(n)
    pi1 = e["rho"] / b1.size
    pi2 = (1.0 - e["rho"]) / b2.size
    k1, c1 = _accumulate_counts(u, b1, n)
    k2, c2 = _accumulate_counts(u, b2, n)
    keys = np.union1d(k1, k2)
    mass = np.zeros(keys.size)
    mass[np.searchsorted(keys, k1)] += pi1 * c1
    mass[np.searchsorted(keys, k2)] += pi2 * c2
    return keys, mass / book.size


def _kl_uniform(mass, n):
    terms = mass * (n + np.log2(mass))
    return max(math.fsum(terms.tolist()), 0.0)


def divergence_at(book, profile, law, n):
    """D(P_{V^n|N=n} || uniform) by direct accumulation of the output law."""
    _, mass = output_law(book, profile, law, n)
    return _kl_uniform(mass, n)


def divergence_at_via_l(book, profile, law, n, keys=None):
    """Same quantity as sum_v 2^{-n} L(v) log2 L(v), with Omega counted by walks."""
    if keys is None:
        keys, _ = output_law(book, profile, law, n)
    e = law.entry(n)
    u = _prefix_table(book, n)
    rows = max(1, CHUNK_EVENTS // u.size)
    vals = []
    for i in range(0, keys.size, rows):
        x = keys[i:i + rows, None] ^ u[None, :]
        in1, in2 = stop_classes_packed(profile, x, n)
        ll = _log2_l(n, book.k, e["log2CountB1"], e["rho"], in1.sum(axis=1), in2.sum(axis=1))
        vals.append(np.exp2(ll - n) * ll)
    return max(math.fsum(np.concatenate(vals).tolist()), 0.0)


def exact_divergence(book, profile, law, budget=DEFAULT_BUDGET, horizon=None, cross_check=False,
                     max_tail=None):
    """Exact expected divergence over the support up to a horizon.

    The horizon defaults to the longest prefix of the support whose per-n
    enumeration (2^k |B_n| events) fits the budget.  Omitted terms are bounded
    by ``sum Pr{N=n} bound_n`` with ``bound_n`` from
    :func:`divergence_upper_bound`, plus ``n_max * residual_mass``.
    """
    k = book.k
    if k > 24:
        raise DomainError("exact divergence needs k <= 24")
    auto = feasible_horizon(law, k, budget)
    if horizon is None:
        horizon = auto
        if horizon is None:
            raise BudgetExceeded("first stopping time already exceeds the budget; use mc_divergence")
    else:
        for n in law.support:
            if n <= horizon and (n > 64 or events_at(law, n, k) > budget):
                raise BudgetExceeded(f"n={n} needs {events_at(law, n, k):.3g} events; use mc_divergence")
    per_n = {}
    parts = []
    tail = 0.0
    tail_mass = law.residual_mass
    for n, prob in zip(law.support, law.prob.tolist()):
        if n > horizon:
            tail += prob * divergence_upper_bound(book, law, n)
            tail_mass += prob
            continue
        keys, mass = output_law(book, profile, law, n)
        d = _kl_uniform(mass, n)
        if d > n + 1e-9:
            raise InequalityViolation(f"D_{n} = {d} exceeds n")
        entry = {"divergence": d, "prob": prob}
        if cross_check:
            d_l = divergence_at_via_l(book, profile, law, n, keys)
            entry["divergenceViaL"] = d_l
            if abs(d_l - d) > 1e-9:
                raise InequalityViolation(f"n={n}: accumulation {d!r} vs L-formula {d_l!r}")
        per_n[n] = entry
        parts.append(d * prob)
    tail += law.residual_mass * law.profile.n_max
    if max_tail is not None and tail > max_tail:
        raise BudgetExceeded(f"tail bound {tail:.3g} exceeds {max_tail:g} at horizon {horizon}; "
                             "raise the budget or use mc_divergence")
    return DivergenceReport(method="exact", total=math.fsum(parts), per_n=per_n,
                            truncated_mass=tail_mass, tail_bound=tail, horizon=horizon,
                            descriptor=book.descriptor())


# ---------------------------------------------------------------------------
# Monte Carlo divergence


def _pack_rows(bits):
    weights = np.uint64(1) << np.arange(bits.shape[1], dtype=np.uint64)
    return (bits.astype(np.uint64) * weights[None, :]).sum(axis=1, dtype=np.uint64)


def simulate_log_likelihoods(book, profile, law, runs, seed, start=0, horizon=None):
    """log2 L(V^N) for runs start .. start+runs-1 of the encoder.

    Returns (stop_times, log2_l) arrays; truncated runs raise.  With
    ``horizon`` set, runs stopping later contribute 0 (their log2 L is not
    evaluated), which estimates the horizon-limited sum exactly.
    """
    k = book.k
    idx = np.arange(start, start + runs, dtype=np.uint64)
    seeds = noise_seeds_array(seed, idx)
    n_stop, _, truncated = simulate_stops(profile, seeds)
    if np.any(truncated):
        raise DomainError(f"{int(truncated.sum())} runs truncated at n_max={profile.n_max}")
    words = run_words_array(seed, idx, k).astype(np.int64)
    h = _flip_states(seeds)
    thr = np.uint64(flip_threshold(profile.p))
    out = np.zeros(runs)
    for n in np.unique(n_stop).tolist():
        sel = np.flatnonzero(n_stop == n)
        if horizon is not None and n > horizon:
            continue
        e = law.entry(n)
        pos = np.arange(1, n + 1, dtype=np.uint64)
        fb = ((chain_array(h[sel, None], pos[None, :]) >> np.uint64(11)) < thr).astype(np.uint8)
        if n <= 64:
            u = _prefix_table(book, n)
            v = _pack_rows(fb) ^ u[words[sel]]
            rows = max(1, CHUNK_EVENTS // u.size)
            for i in range(0, sel.size, rows):
                x = v[i:i + rows, None] ^ u[None, :]
                in1, in2 = stop_classes_packed(profile, x, n)
                out[sel[i:i + rows]] = _log2_l(n, k, e["log2CountB1"], e["rho"],
                                               in1.sum(axis=1), in2.sum(axis=1))
        else:
            cw = _codeword_bits(book, n)
            for j, r in enumerate(sel.tolist()):
                v = cw[words[r]] ^ fb[j]
                in1, in2 = stop_classes_bits(profile, cw ^ v[None, :])
                out[r] = _log2_l(n, k, e["log2CountB1"], e["rho"], in1.sum(), in2.sum())
    bad = np.flatnonzero(out > n_stop + 1e-9)
    if bad.size:
        raise InequalityViolation("sampled log2 L exceeds the stopping time")
    if not np.all(np.isfinite(out)):
        raise InequalityViolation("sampled output has zero likelihood")
    return n_stop, out


def mc_divergence(book, profile, law, runs, seed, horizon=None):
    """Unbiased Monte Carlo estimate of the expected divergence (mean of log2 L)."""
    if runs < 1:
        raise DomainError("runs must be at least 1")
    n_stop, ll = simulate_log_likelihoods(book, profile, law, runs, seed, horizon=horizon)
    mean = math.fsum(ll.tolist()) / runs
    se = float(np.std(ll, ddof=1) / math.sqrt(runs)) if runs > 1 else 0.0
    per_n = {}
    for n in np.unique(n_stop).tolist():
        sel = n_stop == n
        per_n[n] = {"divergence": float(ll[sel].mean()), "prob": float(sel.mean()), "runs": int(sel.sum())}
    return DivergenceReport(method="monte-carlo", total=mean, per_n=per_n, stderr=se, runs=runs,
                            horizon=horizon, descriptor=book.descriptor())


# ---------------------------------------------------------------------------
# ensembles


def _one_code(args):
    profile, code_id, master_seed, method, opts = args
    book = RandomCodebook(profile.k, master_seed, code_id)
    law = opts["law"]
    if method == "exact":
        r = exact_divergence(book, profile, law, budget=opts["budget"], horizon=opts["horizon"])
    else:
        r = mc_divergence(book, profile, law, opts["runs"], opts["seed"] + code_id)
    return r


def ensemble_divergence(profile, codes, master_seed, method="exact", law=None, budget=DEFAULT_BUDGET,
                        horizon=None, runs=1000, seed=0, workers=1):
    """Expected divergence across codeIds 0..codes-1 under one master seed."""
    if codes < 1:
        raise DomainError("codes must be at least 1")
    if method not in ("exact", "mc"):
        raise DomainError(f"unknown method {method!r}")
    law = law if law is not None else stop_law_dp(profile)
    if method == "exact" and horizon is None:
        horizon = feasible_horizon(law, profile.k, budget)
        if horizon is None:
            raise BudgetExceeded("first stopping time already exceeds the budget; use mc_divergence")
    opts = {"law": law, "budget": budget, "horizon": horizon, "runs": runs, "seed": seed}
    tasks = [(profile, c, master_seed, method, opts) for c in range(codes)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            reports = list(ex.map(_one_code, tasks))
    else:
        reports = [_one_code(t) for t in tasks]
    totals = np.array([r.total for r in reports])
    uppers = np.array([r.upper for r in reports])
    mean = math.fsum(totals.tolist()) / codes
    mean_upper = math.fsum(uppers.tolist()) / codes
    se = float(np.std(totals, ddof=1) / math.sqrt(codes)) if codes > 1 else 0.0
    return {
        "method": method,
        "codes": codes,
        "masterSeed": master_seed,
        "horizon": horizon,
        "perCode": totals.tolist(),
        "perCodeUpper": uppers.tolist(),
        "perCodeStderr": [r.stderr for r in reports],
        "mean": mean,
        "meanUpper": mean_upper,
        "stderr": se,
        "fractionBelowTwiceMean": float(np.mean(totals <= 2 * mean)),
        "expectedLength": law.expected_length,
    }


# ---------------------------------------------------------------------------
# analytic bound chain


@dataclass
class BoundReport:
    k: int
    alpha: float
    p: float
    kappa1: float
    kappa2: float
    kappa3: float
    tau_k: float
    tau_inf: float
    per_n_bound: dict
    total_bound: float
    half_codes_bound: float

    def to_dict(self):
        return {
            "k": self.k, "alpha": self.alpha, "p": self.p,
            "kappa1": self.kappa1, "kappa2": self.kappa2, "kappa3": self.kappa3,
            "tauK": self.tau_k, "tauInf": self.tau_inf,
            "perNBound": {str(n): v for n, v in sorted(self.per_n_bound.items())},
            "totalBound": self.total_bound, "halfCodesBound": self.half_codes_bound,
        }


def tau(k, p):
    """Crossover with f2(tau||p) = log2(1 - 1/k)."""
    return (math.log2(1 - 1 / k) - 1 - math.log2(1 - p)) / (math.log2(p) - math.log2(1 - p))


def tau_inf(p):
    return (math.log2(1 - p) + 1) / (math.log2(1 - p) - math.log2(p))


def kappa1(p):
    return 4.0 / LN2 * p / (1.0 - p)


def kappa2(k, alpha, p):
    return k / (alpha * binary_capacity(tau_inf(p)))


def total_bound(k, alpha, p):
    return 2 * kappa1(p) * kappa2(k, alpha, p) * 2.0 ** (-k * max(alpha - 1.0, 0.0) / alpha)


def per_n_prob_bound(profile, n):
    """kappa1 n 2^{n f2(q*(n)||p)} 2^{-k max(1, 1/alpha)} (ensemble bound on D_n Pr{N=n})."""
    k, a, p = profile.k, profile.alpha, profile.p
    return kappa1(p) * n * 2.0 ** (n * f2(profile.q_star(n), p)) * 2.0 ** (-k * max(1.0, 1.0 / a))


def bound_report(profile, law=None):
    k, a, p = profile.k, profile.alpha, profile.p
    if not 0.0 < p < 0.5:
        raise DomainError("the bound chain needs p in (0, 1/2)")
    if k < 2:
        raise DomainError("the bound chain needs k >= 2")
    law = law if law is not None else stop_law_dp(profile)
    per_n = {}
    for n, lb in zip(law.support, law.log2_count_b1.tolist()):
        per_n[n] = min(float(n), 2.0 / LN2 * 2.0 ** (n - k - (lb + 1.0)))
    k1, k2 = kappa1(p), kappa2(k, a, p)
    tb = total_bound(k, a, p)
    return BoundReport(k=k, alpha=a, p=p, kappa1=k1, kappa2=k2, kappa3=2 * k1 * k2,
                       tau_k=tau(k, p), tau_inf=tau_inf(p), per_n_bound=per_n,
                       total_bound=tb, half_codes_bound=2 * tb)


def exponent_curve(ks, alpha, p, codes, master_seed, method="exact", budget=DEFAULT_BUDGET, runs=1000,
                   seed=0, workers=1):
    """Rows (k, E[N], mean D_k, -log2(mean D_k)/E[N], totalBound) for plotting."""
    rows = []
    for k in ks:
        prof = StoppingProfile(k, alpha, p)
        law = stop_law_dp(prof)
        ens = ensemble_divergence(prof, codes, master_seed, method=method, law=law, budget=budget,
                                  runs=runs, seed=seed, workers=workers)
        m = ens["mean"]
        rows.append({
            "k": k,
            "E[N]": law.expected_length,
            "meanD": m,
            "exponent": -math.log2(m) / law.expected_length if m > 0 else math.inf,
            "totalBound": total_bound(k, alpha, p),
        })
    return rows


def dumps(obj):
    return json.dumps(obj, sort_keys=True, indent=2)


__all__ = [
    "BoundReport",
    "DivergenceReport",
    "StopLaw",
    "bound_report",
    "divergence_at",
    "divergence_at_via_l",
    "divergence_upper_bound",
    "ensemble_divergence",
    "exact_divergence",
    "exponent_curve",
    "likelihood_ratio",
    "log2_likelihood_ratio",
    "mc_divergence",
    "omega_counts",
    "output_law",
    "rho",
    "unpack_bits",
]
