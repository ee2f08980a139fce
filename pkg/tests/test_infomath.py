import math
import warnings

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resolvlab.errors import DomainError
from resolvlab.infomath import (
    LN2,
    BetaDomainWarning,
    beta_bound,
    beta_increasing,
    binary_capacity,
    binary_divergence,
    binary_entropy,
    capacity_derivatives,
    capacity_inverse,
    f2,
)

probs = st.floats(min_value=0.0, max_value=1.0, allow_nan=False)
inner = st.floats(min_value=1e-6, max_value=1 - 1e-6, allow_nan=False)


def test_entropy_values():
    assert binary_entropy(0.5) == 1.0
    assert binary_entropy(0.0) == 0.0
    assert binary_entropy(1.0) == 0.0
    assert binary_entropy(0.11) == pytest.approx(0.49992, abs=1e-5)


def test_capacity_values():
    assert binary_capacity(0.5) == 0.0
    assert binary_capacity(0.0) == 1.0
    assert binary_capacity(0.11) == pytest.approx(0.50008, abs=1e-5)


@pytest.mark.parametrize("bad", [-0.1, 1.1, float("nan")])
def test_domain_errors(bad):
    with pytest.raises(DomainError):
        binary_entropy(bad)
    with pytest.raises(DomainError):
        binary_capacity(bad)
    with pytest.raises(DomainError):
        capacity_inverse(bad)


def test_divergence_values():
    assert binary_divergence(0.11, 0.11) == 0.0
    p = 0.11
    assert binary_divergence(0.0, p) == pytest.approx(math.log2(1 / (1 - p)), abs=1e-14)
    d = binary_divergence(0.3, p)
    assert d > 0
    assert d == pytest.approx(binary_capacity(0.3) - f2(0.3, p), abs=1e-12)


def test_divergence_boundary_p():
    assert binary_divergence(0.0, 0.0) == 0.0
    assert binary_divergence(1.0, 1.0) == 0.0
    with pytest.raises(DomainError):
        binary_divergence(0.5, 0.0)
    with pytest.raises(DomainError):
        f2(0.5, 1.0)


def test_f2_at_tau():
    p = 0.11
    for k in (2, 6, 10, 100):
        target = math.log2(1 - 1 / k)
        tau = (target - 1 - math.log2(1 - p)) / (math.log2(p) - math.log2(1 - p))
        assert f2(tau, p) == pytest.approx(target, abs=1e-12)


def test_capacity_inverse_values():
    assert capacity_inverse(0.5) == pytest.approx(0.110028, abs=1e-6)
    assert capacity_inverse(1.0) == 0.0
    assert capacity_inverse(0.0) == 0.5


def test_capacity_derivatives():
    d1, d2 = capacity_derivatives(0.25)
    assert d1 == pytest.approx(math.log2(1 / 3), abs=1e-12)
    _, d2 = capacity_derivatives(0.11)
    assert d2 * 0.11 * 0.89 == pytest.approx(1 / LN2, abs=1e-12)
    with pytest.raises(DomainError):
        capacity_derivatives(0.0)


def test_derivatives_match_finite_differences():
    h = 1e-5
    for q in (0.05, 0.2, 0.4, 0.7):
        d1, d2 = capacity_derivatives(q)
        fd1 = (binary_capacity(q + h) - binary_capacity(q - h)) / (2 * h)
        fd2 = (binary_capacity(q + h) - 2 * binary_capacity(q) + binary_capacity(q - h)) / h**2
        assert fd1 == pytest.approx(d1, rel=1e-6)
        assert fd2 == pytest.approx(d2, rel=1e-3)


def test_beta_values():
    s = math.sqrt(2 * LN2 * 1e-4)
    assert beta_bound(1e-4, 2) == pytest.approx(s * math.log2(2 / s), abs=1e-15)
    # s = 0.0117741, log2(2/s) = 7.40823
    assert beta_bound(1e-4, 2) == pytest.approx(0.0872254, abs=1e-6)
    with pytest.warns(BetaDomainWarning):
        assert beta_bound(1 / (2 * LN2), 2) == pytest.approx(1.0, abs=1e-14)
    assert beta_bound(0.0) == 0.0
    with pytest.raises(DomainError):
        beta_bound(-1e-3)


def test_beta_warns_when_decreasing():
    big = (2 / math.e) ** 2 / (2 * LN2) * 1.5
    assert not beta_increasing(big, 2)
    with pytest.warns(BetaDomainWarning):
        beta_bound(big, 2)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        beta_bound(1e-3, 2)


@given(probs)
def test_entropy_symmetric_and_bounded(q):
    h = binary_entropy(q)
    assert 0.0 <= h <= 1.0
    assert h == pytest.approx(binary_entropy(1 - q), abs=1e-12)


@given(probs, inner)
def test_divergence_nonnegative_and_identity(q, p):
    d = binary_divergence(q, p)
    assert d >= 0.0
    assert f2(q, p) == pytest.approx(binary_capacity(q) - d, abs=1e-9)


@settings(max_examples=300)
@given(st.floats(min_value=0.0, max_value=1.0))
def test_capacity_inverse_round_trip(y):
    q = capacity_inverse(y)
    assert 0.0 <= q <= 0.5
    assert binary_capacity(q) == pytest.approx(y, abs=1e-10)


@given(inner, st.floats(min_value=0.0, max_value=1.0))
def test_parabola_sandwich(p, frac):
    eps = -p + frac * 1.0
    if not -p < eps < 1 - p:
        return
    d1, d2 = capacity_derivatives(p)
    c = binary_capacity(p + eps)
    assert binary_capacity(p) + eps * d1 <= c + 1e-10
    assert c <= binary_capacity(p) + eps * d1 + eps * eps * d2 + 1e-10


@given(inner, inner, st.floats(min_value=0.0, max_value=1.0))
def test_capacity_convex(p1, p2, lam):
    mid = lam * p1 + (1 - lam) * p2
    assert binary_capacity(mid) <= lam * binary_capacity(p1) + (1 - lam) * binary_capacity(p2) + 1e-12


def test_capacity_inverse_monotone():
    ys = [i / 200 for i in range(201)]
    qs = [capacity_inverse(y) for y in ys]
    assert all(a >= b for a, b in zip(qs, qs[1:]))
