import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resolvlab.codebook import (
    ConstantCodebook,
    RandomCodebook,
    bits_to_int,
    chain,
    mix64,
    pack_bits,
    unpack_bits,
    weight,
)
from resolvlab.errors import DomainError

# (masterSeed, codeId, word, position, bit); frozen so results stay comparable across versions
GOLDEN = [
    (0, 0, 0, 1, 0),
    (0, 0, 5, 1, 0),
    (0, 0, 5, 64, 0),
    (1, 0, 0, 1, 0),
    (12345, 0, 17, 3, 1),
    (12345, 2, 17, 3, 1),
    (2**64 - 1, 0, 1, 100, 1),
    (7, 1, 1023, 7, 0),
    (42, 0, (1 << 70) + 3, 9, 1),
    (999, 3, 2, 2**20, 0),
]


def test_mix64_reference_outputs():
    # first outputs of the reference SplitMix64 generator seeded with 0 and 1
    assert mix64(0) == 0xE220A8397B1DCDAF
    assert mix64(1) == 0x910A2DEC89025CC1
    assert chain(1, 2, 3) == 0xD0734750FDE362B3


@pytest.mark.parametrize("seed,code,w,i,bit", GOLDEN)
def test_golden_bits(seed, code, w, i, bit):
    book = RandomCodebook(max(w.bit_length(), 1), seed, code)
    assert book.bit(w, i) == bit


def test_validation():
    book = RandomCodebook(4)
    with pytest.raises(DomainError):
        book.bit(16, 1)
    with pytest.raises(DomainError):
        book.bit(0, 0)
    with pytest.raises(DomainError):
        book.prefix_bits(0, 2**20 + 1)
    with pytest.raises(DomainError):
        RandomCodebook(0)


def test_prefix_basics():
    book = RandomCodebook(8, 3, 1)
    assert book.prefix_bits(5, 0).size == 0
    assert np.array_equal(book.prefix_bits(5, 5), book.prefix_bits(5, 9)[:5])
    bits = book.prefix_bits(200, 130)
    assert [book.bit(200, i) for i in range(1, 131)] == bits.tolist()
    assert np.array_equal(unpack_bits(book.prefix(200, 130), 130), bits)


def test_prefix_table_matches_scalar():
    book = RandomCodebook(6, 11, 4)
    table = book.prefix_table(40)
    for w in (0, 1, 33, 63):
        assert int(table[w]) == bits_to_int(book.prefix_bits(w, 40))


def test_bit_balance_and_distance():
    book = RandomCodebook(10, 2024)
    bits = book.prefix_bits(7, 10**6)
    assert abs(bits.mean() - 0.5) < 0.01
    a, b = book.prefix_bits(1, 1000), book.prefix_bits(2, 1000)
    assert abs(int((a ^ b).sum()) - 500) <= 50


def test_ensemble_position_means():
    means = np.zeros(64)
    for code in range(1000):
        means += unpack_bits(np.array([RandomCodebook(4, 9, code).prefix_table(64, [3])[0]]), 64)
    means /= 1000
    assert np.all(np.abs(means - 0.5) <= 0.06)


def test_descriptor_round_trip():
    book = RandomCodebook(12, 77, 5)
    assert book.descriptor() == {"k": 12, "masterSeed": 77, "codeId": 5}
    assert RandomCodebook.from_descriptor(book.descriptor()) == book


def test_constant_codebook():
    book = ConstantCodebook(3, pattern=0b1011)
    assert book.prefix_bits(6, 4).tolist() == [1, 1, 0, 1]
    assert set(book.prefix_table(4).tolist()) == {0b1011}


def test_pack_weight():
    bits = np.array([1, 0, 1, 1] + [0] * 60 + [1, 1])
    packed = pack_bits(bits)
    assert packed.size == 2
    assert weight(packed) == 5
    assert np.array_equal(unpack_bits(packed, bits.size), bits)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**64 - 1), st.integers(0, 255), st.integers(0, 300))
def test_determinism_and_prefix_property(seed, w, n):
    a = RandomCodebook(8, seed).prefix_bits(w, n + 1)
    b = RandomCodebook(8, seed).prefix_bits(w, n)
    assert np.array_equal(a[:n], b)
