import itertools
import json
import math

import numpy as np
import pytest

from resolvlab.codebook import ConstantCodebook, RandomCodebook, bits_to_int
from resolvlab.divergence import (
    bound_report,
    divergence_at,
    divergence_at_via_l,
    ensemble_divergence,
    exact_divergence,
    exponent_curve,
    likelihood_ratio,
    log2_likelihood_ratio,
    mc_divergence,
    omega_counts,
    output_law,
    per_n_prob_bound,
    tau,
    total_bound,
)
from resolvlab.errors import BudgetExceeded, DomainError
from resolvlab.infomath import LN2, binary_capacity, f2
from resolvlab.stopping import StoppingProfile, enumerate_stop_patterns, stop_law_dp, walk_stop

P = 0.11


class TableCodebook(RandomCodebook):
    """Fixture with explicit codeword prefixes (packed integers)."""

    def __init__(self, k, prefixes):
        super().__init__(k)
        object.__setattr__(self, "prefixes", tuple(prefixes))

    def prefix_bits(self, w, n):
        return np.array([(self.prefixes[w] >> i) & 1 for i in range(n)], dtype=np.uint8)

    def bit(self, w, i):
        return (self.prefixes[w] >> (i - 1)) & 1

    def prefix_table(self, n, words=None):
        mask = (1 << n) - 1
        return np.array([x & mask for x in self.prefixes], dtype=np.uint64)


def brute_force_output(book, profile, n):
    """P(v | N=n) by summing p^|b| (1-p)^(n-|b|) over every (w, b) with a stop at n."""
    p = profile.p
    mass = {}
    for b in itertools.product((0, 1), repeat=n):
        if walk_stop(profile, b) != (n, sum(b)):
            continue
        pb = p ** sum(b) * (1 - p) ** (n - sum(b))
        for w in range(book.size):
            v = bits_to_int(np.array(b) ^ book.prefix_bits(w, n))
            mass[v] = mass.get(v, 0.0) + pb / book.size
    total = sum(mass.values())
    return {v: m / total for v, m in mass.items()}


def kl_uniform(mass, n):
    return sum(m * (n + math.log2(m)) for m in mass.values() if m > 0)


@pytest.mark.parametrize("k,alpha", [(1, 2.0), (2, 1.0), (3, 2.0), (4, 2.0)])
def test_exact_matches_brute_force(k, alpha):
    prof = StoppingProfile(k, alpha, P)
    law = stop_law_dp(prof)
    book = RandomCodebook(k, 8, 1)
    for n in law.support:
        if n > 12:
            break
        oracle = brute_force_output(book, prof, n)
        keys, mass = output_law(book, prof, law, n)
        assert dict(zip(keys.tolist(), mass.tolist())) == pytest.approx(oracle, abs=1e-15)
        assert divergence_at(book, prof, law, n) == pytest.approx(kl_uniform(oracle, n), abs=1e-12)


def test_degenerate_k1_hand_value():
    prof = StoppingProfile(1, 2.0, P)
    law = stop_law_dp(prof)
    assert law.support == [1]
    # two identical codewords: V = u0 xor B, so D_1 = 1 - h2(p)
    d = divergence_at(ConstantCodebook(1), prof, law, 1)
    assert d == pytest.approx(binary_capacity(P), abs=1e-12)
    assert d == pytest.approx(kl_uniform(brute_force_output(ConstantCodebook(1), prof, 1), 1), abs=1e-12)


def test_uniform_fixture_has_zero_divergence():
    prof = StoppingProfile(2, 2.0, P)
    law = stop_law_dp(prof)
    book = TableCodebook(2, [0, 1, 0, 1])
    rep = exact_divergence(book, prof, law)
    assert rep.total == pytest.approx(0.0, abs=1e-15)
    mc = mc_divergence(book, prof, law, 500, 3)
    assert mc.total == pytest.approx(0.0, abs=1e-12) and mc.stderr == pytest.approx(0.0, abs=1e-12)


def test_omega_counts_examples():
    prof = StoppingProfile(4, 2.0, P)
    law = stop_law_dp(prof)
    const = ConstantCodebook(4, pattern=0b10)
    b1, b2 = enumerate_stop_patterns(prof, 2)
    for v in range(4):
        om1, om2 = omega_counts(const, prof, v, 2)
        assert om1 == 16 * int((0b10 ^ v) in b1.tolist())
        assert om2 == 16 * int((0b10 ^ v) in b2.tolist())
    book = RandomCodebook(4, 2)
    assert sum(omega_counts(book, prof, v, 2)[0] for v in range(4)) == 16 * b1.size
    u0 = int(book.prefix_table(6)[5])
    b6, _ = enumerate_stop_patterns(prof, 6)
    assert omega_counts(book, prof, u0 ^ int(b6[0]), 6)[0] >= 1
    with pytest.raises(DomainError):
        omega_counts(book, prof, 0, 1)


def _sample_stop_pattern(profile, n, low, rng):
    """Random flip pattern stopping at n, built backwards through the alive intervals."""
    lo, hi = profile.alive_intervals
    t = profile.threshold(n)
    while True:
        w = t if low else n - t
        bits = []
        for m in range(n, 0, -1):
            opts = [b for b in (0, 1) if lo[m - 1] <= w - b <= hi[m - 1]]
            if not opts:
                break
            b = int(rng.choice(opts))
            bits.append(b)
            w -= b
        else:
            return np.array(bits[::-1], dtype=np.uint8)


def test_omega_counts_long_sequences():
    prof = StoppingProfile(3, 2.0, 0.3, n_max=4000)
    law = stop_law_dp(prof)
    book = RandomCodebook(3, 5)
    n = next(n for n in law.support if n > 64)
    rng = np.random.default_rng(1)
    flips = _sample_stop_pattern(prof, n, True, rng)
    assert walk_stop(prof, flips) == (n, prof.threshold(n))
    v = book.prefix_bits(2, n) ^ flips
    om1, om2 = omega_counts(book, prof, v, n)
    walks = [walk_stop(prof, book.prefix_bits(w, n) ^ v) for w in range(book.size)]
    t = prof.threshold(n)
    assert om1 == sum(r == (n, t) for r in walks) >= 1
    assert om2 == sum(r == (n, n - t) for r in walks)


def test_likelihood_ratio_examples():
    prof = StoppingProfile(4, 2.0, P)
    law = stop_law_dp(prof)
    const = ConstantCodebook(4, pattern=0)
    e = law.entry(6)
    b1, _ = enumerate_stop_patterns(prof, 6)
    half = 2 ** e["log2CountB1"]
    assert likelihood_ratio(const, prof, law, int(b1[0]), 6) == pytest.approx(2**6 * e["rho"] / half, rel=1e-12)
    assert likelihood_ratio(const, prof, law, 0b010101, 6) == 0.0
    assert log2_likelihood_ratio(const, prof, law, 0b010101, 6) == -math.inf


def test_ensemble_mean_of_l_is_one():
    prof = StoppingProfile(6, 2.0, P)
    law = stop_law_dp(prof)
    n, v = 8, 0b10110010
    vals = np.array([likelihood_ratio(RandomCodebook(6, 31, c), prof, law, v, n) for c in range(500)])
    se = vals.std(ddof=1) / math.sqrt(vals.size)
    assert abs(vals.mean() - 1.0) <= 4 * se
    assert np.all(vals <= 2**n)


def test_k6_golden_and_cross_check():
    prof = StoppingProfile(6, 2.0, P)
    law = stop_law_dp(prof)
    rep = exact_divergence(RandomCodebook(6, 0, 0), prof, law, horizon=22, cross_check=True)
    assert rep.total == pytest.approx(0.3678012729385986, rel=1e-12)
    assert rep.total > 0
    for n, e in rep.per_n.items():
        assert 0.0 <= e["divergence"] <= n
        assert abs(e["divergence"] - e["divergenceViaL"]) <= 1e-9
    assert rep.total == pytest.approx(math.fsum(e["divergence"] * e["prob"] for e in rep.per_n.values()), abs=1e-12)
    assert 0 < rep.tail_bound < 0.05
    assert rep.truncated_mass == pytest.approx(1 - sum(e["prob"] for e in rep.per_n.values()), abs=1e-9)
    d = rep.to_dict()
    assert json.loads(json.dumps(d))["perN"]["3"]["prob"] == pytest.approx(law.prob_of(3))


def test_l_route_wide_n():
    prof = StoppingProfile(4, 2.0, P)
    law = stop_law_dp(prof)
    book = RandomCodebook(4, 1, 1)
    for n in law.support[:8]:
        assert divergence_at_via_l(book, prof, law, n) == pytest.approx(divergence_at(book, prof, law, n), abs=1e-9)


def test_budget_errors_name_monte_carlo():
    prof = StoppingProfile(10, 2.0, P)
    law = stop_law_dp(prof)
    with pytest.raises(BudgetExceeded, match="mc_divergence"):
        exact_divergence(RandomCodebook(10), prof, law, budget=10)
    with pytest.raises(BudgetExceeded, match="mc_divergence"):
        exact_divergence(RandomCodebook(10), prof, law, budget=2**20, horizon=30)


def test_tail_bound_is_rigorous():
    prof = StoppingProfile(4, 2.0, P)
    law = stop_law_dp(prof)
    book = RandomCodebook(4, 6)
    full = exact_divergence(book, prof, law, horizon=22)
    short = exact_divergence(book, prof, law, horizon=12)
    assert short.total <= full.total <= short.upper
    assert full.per_n[15]["divergence"] == pytest.approx(short.per_n.get(15, full.per_n[15])["divergence"])


def test_mc_agrees_with_exact():
    prof = StoppingProfile(4, 2.0, P)
    law = stop_law_dp(prof)
    book = RandomCodebook(4, 7)
    exact = exact_divergence(book, prof, law, horizon=25)
    mc = mc_divergence(book, prof, law, 40_000, 11, horizon=25)
    assert abs(mc.total - exact.total) <= 4 * mc.stderr
    assert sum(e["runs"] for e in mc.per_n.values()) == 40_000


def test_mc_stderr_scaling():
    prof = StoppingProfile(6, 2.0, P)
    law = stop_law_dp(prof)
    book = RandomCodebook(6)
    small = np.mean([mc_divergence(book, prof, law, 2000, s).stderr for s in range(10)])
    large = np.mean([mc_divergence(book, prof, law, 8000, 100 + s).stderr for s in range(10)])
    assert small / large == pytest.approx(2.0, rel=0.2)


def test_ensemble_basic():
    prof = StoppingProfile(6, 2.0, P)
    law = stop_law_dp(prof)
    one = ensemble_divergence(prof, 1, 0, law=law, budget=2**20)
    single = exact_divergence(RandomCodebook(6, 0, 0), prof, law, budget=2**20)
    assert one["mean"] == pytest.approx(single.total, abs=1e-15)
    ens = ensemble_divergence(prof, 8, 0, law=law, budget=2**20)
    assert ens["fractionBelowTwiceMean"] >= 0.5 - 4 * math.sqrt(1 / (4 * 8))
    assert ens["perCode"][0] == one["perCode"][0]
    again = ensemble_divergence(prof, 8, 0, law=law, budget=2**20)
    assert json.dumps(again, sort_keys=True) == json.dumps(ens, sort_keys=True)
    with pytest.raises(DomainError):
        ensemble_divergence(prof, 0, 0, law=law)


def test_ensemble_mean_decreases_in_k():
    means = []
    for k in (6, 8, 10):
        prof = StoppingProfile(k, 2.0, P)
        means.append(ensemble_divergence(prof, 6, 0, method="mc", runs=4000, seed=1)["mean"])
    assert means[0] > means[1] > means[2]


def test_bound_report_values():
    rep = bound_report(StoppingProfile(6, 2.0, P))
    assert rep.kappa1 == pytest.approx(4 / LN2 * 0.11 / 0.89, rel=1e-12)
    assert rep.kappa1 == pytest.approx(0.7133, abs=1e-4)
    assert rep.tau_inf == pytest.approx(0.27580, abs=1e-5)
    assert rep.kappa3 == pytest.approx(2 * rep.kappa1 * rep.kappa2, rel=1e-15)
    assert rep.kappa2 == pytest.approx(6 / (2 * binary_capacity(rep.tau_inf)), rel=1e-12)
    assert rep.total_bound == pytest.approx(rep.kappa3 * 2 ** (-3), rel=1e-12)
    assert rep.half_codes_bound == pytest.approx(2 * rep.total_bound, rel=1e-15)
    taus = [tau(k, P) for k in range(2, 200)]
    assert all(a > b for a, b in zip(taus, taus[1:]))
    # log2(1 - 1/k) lies below f2(1/2 || p) only for k = 2, where tau exceeds 1/2
    assert taus[0] > 0.5
    assert all(P < t < 0.5 for t in taus[1:])
    for k in (2, 6, 50):
        assert f2(tau(k, P), P) == pytest.approx(math.log2(1 - 1 / k), abs=1e-12)
    low = bound_report(StoppingProfile(6, 1.0, P))
    assert low.total_bound == pytest.approx(low.kappa3, rel=1e-15)
    assert total_bound(6, 0.5, P) == pytest.approx(bound_report(StoppingProfile(6, 0.5, P)).kappa3)
    with pytest.raises(DomainError):
        bound_report(StoppingProfile(6, 2.0, 0.7))
    with pytest.raises(DomainError):
        bound_report(StoppingProfile(1, 2.0, P))
    assert json.loads(json.dumps(rep.to_dict()))["tauInf"] == rep.tau_inf


def test_per_n_bounds_on_the_ensemble():
    """Ensemble-average per-n divergence respects both per-n bounds (20 codes, 4 stderr)."""
    for k in (4, 6, 8):
        prof = StoppingProfile(k, 2.0, P)
        law = stop_law_dp(prof)
        rep = bound_report(prof, law)
        reps = [exact_divergence(RandomCodebook(k, 0, c), prof, law, budget=2**21) for c in range(20)]
        for n in reps[0].per_n:
            d = np.array([r.per_n[n]["divergence"] for r in reps])
            se = d.std(ddof=1) / math.sqrt(d.size)
            assert d.mean() <= rep.per_n_bound[n] + 4 * se
            dp = d * law.prob_of(n)
            assert dp.mean() <= per_n_prob_bound(prof, n) + 4 * se * law.prob_of(n) + 1e-9
            if k >= 6:
                assert np.all(dp <= per_n_prob_bound(prof, n) + 1e-9)


def test_exponent_curve_rows():
    rows = exponent_curve([6, 8], 2.0, P, codes=2, master_seed=0, budget=2**21)
    assert [r["k"] for r in rows] == [6, 8]
    for r in rows:
        assert r["exponent"] == pytest.approx(-math.log2(r["meanD"]) / r["E[N]"])
        assert r["totalBound"] == pytest.approx(total_bound(r["k"], 2.0, P))
