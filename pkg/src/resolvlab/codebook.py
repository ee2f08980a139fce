"""Seed-reproducible i.i.d. uniform binary codebooks with lazy infinite codewords.

Mixing function
---------------
Every random bit in the package comes from a keyed chain of the SplitMix64
finalizer::

    mix64(z):  z = (z + 0x9E3779B97F4A7C15) mod 2^64
               z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 mod 2^64
               z = (z ^ (z >> 27)) * 0x94D049BB133111EB mod 2^64
               return z ^ (z >> 31)

    chain(tag, x1, ..., xm):  h = mix64(tag); h = mix64(h ^ x_j) for each j

Integers wider than 64 bits enter the chain as their little-endian 64-bit
limbs (at least one limb).  Codeword bit ``i >= 1`` of word ``w`` in code
``codeId`` under ``masterSeed`` is the top bit of
``chain(CODEBOOK_TAG, masterSeed, codeId, w, i)``.  Noise and word draws use
their own tags (see :mod:`resolvlab.simulator`), so the streams never
collide.

Bit sequences are packed little-endian: position ``i`` (1-based) is bit
``(i - 1) % 64`` of word ``(i - 1) // 64``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
M1 = 0xBF58476D1CE4E5B9
M2 = 0x94D049BB133111EB

CODEBOOK_TAG = 0x436F6465626F6F6B  # "Codebook"
NOISE_TAG = 0x4E6F697365537472  # "NoiseStr"
RUNSEED_TAG = 0x52756E5365656421  # "RunSeed!"
WORD_TAG = 0x576F726444726177  # "WordDraw"

HORIZON_CAP = 1 << 20


def mix64(z):
    z = (z + GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * M1) & MASK64
    z = ((z ^ (z >> 27)) * M2) & MASK64
    return z ^ (z >> 31)


def limbs(x):
    if x < 0:
        raise DomainError("only nonnegative integers can be hashed")
    out = [x & MASK64]
    x >>= 64
    while x:
        out.append(x & MASK64)
        x >>= 64
    return out


def chain(tag, *fields):
    h = mix64(tag)
    for f in fields:
        for limb in limbs(f):
            h = mix64(h ^ limb)
    return h


_G = np.uint64(GOLDEN)
_M1 = np.uint64(M1)
_M2 = np.uint64(M2)
_S30, _S27, _S31 = np.uint64(30), np.uint64(27), np.uint64(31)


def mix64_array(z):
    """Vectorized mix64 on a uint64 array (wrapping arithmetic)."""
    z = np.asarray(z, dtype=np.uint64) + _G
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def chain_array(h, field):
    """One chain step ``mix64(h ^ field)`` for 64-bit fields, broadcasting."""
    return mix64_array(np.asarray(h, dtype=np.uint64) ^ np.asarray(field, dtype=np.uint64))


def pack_bits(bits):
    """Pack a 0/1 sequence into little-endian uint64 words."""
    bits = np.asarray(bits, dtype=np.uint8)
    n = bits.size
    nwords = (n + 63) // 64
    padded = np.zeros(nwords * 64, dtype=np.uint8)
    padded[:n] = bits
    weights = np.uint64(1) << np.arange(64, dtype=np.uint64)
    return (padded.reshape(nwords, 64).astype(np.uint64) * weights).sum(axis=1, dtype=np.uint64)


def unpack_bits(words, n):
    words = np.asarray(words, dtype=np.uint64)
    shifts = np.arange(64, dtype=np.uint64)
    bits = ((words[:, None] >> shifts[None, :]) & np.uint64(1)).astype(np.uint8).ravel()
    return bits[:n]


def weight(words):
    """Hamming weight of a packed sequence."""
    return int(np.bitwise_count(np.asarray(words, dtype=np.uint64)).sum())


def bits_to_int(bits):
    """Little-endian integer of a 0/1 sequence (bit i-1 <- position i)."""
    out = 0
    for i, b in enumerate(bits):
        if b:
            out |= 1 << i
    return out


@dataclass(frozen=True)
class RandomCodebook:
    """Codebook C_k of 2^k lazy codewords u^inf(w) with i.i.d. uniform bits."""

    k: int
    master_seed: int = 0
    code_id: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise DomainError("k must be at least 1")
        if not 0 <= self.master_seed <= MASK64:
            raise DomainError("master seed must be an unsigned 64-bit integer")
        if self.code_id < 0:
            raise DomainError("code id must be nonnegative")

    @property
    def size(self):
        return 1 << self.k

    def _check_word(self, w):
        if not 0 <= w < self.size:
            raise DomainError(f"word {w} outside [0, 2^{self.k})")

    def _word_state(self, w):
        h = mix64(CODEBOOK_TAG)
        for f in (self.master_seed, self.code_id):
            h = mix64(h ^ f)
        for limb in limbs(w):
            h = mix64(h ^ limb)
        return h

    def bit(self, w, i):
        self._check_word(w)
        if i < 1:
            raise DomainError("positions start at 1")
        return mix64(self._word_state(w) ^ (i & MASK64)) >> 63

    def prefix_bits(self, w, n):
        """Unpacked (u_1(w), ..., u_n(w)) as a uint8 array."""
        self._check_word(w)
        if not 0 <= n <= HORIZON_CAP:
            raise DomainError(f"prefix length {n} outside [0, {HORIZON_CAP}]")
        if n == 0:
            return np.zeros(0, dtype=np.uint8)
        pos = np.arange(1, n + 1, dtype=np.uint64)
        h = chain_array(np.uint64(self._word_state(w)), pos)
        return (h >> np.uint64(63)).astype(np.uint8)

    def prefix(self, w, n):
        """Packed prefix of codeword w (ceil(n/64) uint64 words)."""
        return pack_bits(self.prefix_bits(w, n))

    def prefix_table(self, n, words=None):
        """Codeword prefixes of length n <= 64 for every word, one uint64 each."""
        if n > 64:
            raise DomainError("prefix tables hold at most 64 positions")
        if words is None:
            if self.k > 24:
                raise DomainError("explicit codeword tables are limited to k <= 24")
            words = np.arange(self.size, dtype=np.uint64)
        words = np.asarray(words, dtype=np.uint64)
        if self.k > 64:
            raise DomainError("prefix_table takes 64-bit word indices")
        h0 = mix64(CODEBOOK_TAG)
        h0 = mix64(h0 ^ self.master_seed)
        h0 = mix64(h0 ^ self.code_id)
        state = chain_array(np.uint64(h0), words)
        out = np.zeros(words.shape, dtype=np.uint64)
        for i in range(1, n + 1):
            b = chain_array(state, np.uint64(i)) >> np.uint64(63)
            out |= b << np.uint64(i - 1)
        return out

    def descriptor(self):
        return {"k": self.k, "masterSeed": self.master_seed, "codeId": self.code_id}

    @classmethod
    def from_descriptor(cls, d):
        return cls(int(d["k"]), int(d.get("masterSeed", 0)), int(d.get("codeId", 0)))


class ConstantCodebook(RandomCodebook):
    """Degenerate test fixture: every word maps to the codeword of word 0 of
    the underlying random codebook (or to an explicit bit pattern)."""

    def __init__(self, k, pattern=None, master_seed=0):
        super().__init__(k, master_seed, 0)
        object.__setattr__(self, "pattern", pattern)

    def bit(self, w, i):
        self._check_word(w)
        if self.pattern is not None:
            return (self.pattern >> (i - 1)) & 1
        return RandomCodebook.bit(self, 0, i)

    def prefix_bits(self, w, n):
        self._check_word(w)
        if self.pattern is not None:
            return np.array([(self.pattern >> i) & 1 for i in range(n)], dtype=np.uint8)
        return RandomCodebook.prefix_bits(self, 0, n)

    def prefix_table(self, n, words=None):
        if words is None:
            words = np.arange(self.size, dtype=np.uint64)
        words = np.asarray(words, dtype=np.uint64)
        value = bits_to_int(self.prefix_bits(0, n))
        return np.full(words.shape, value, dtype=np.uint64)

    def descriptor(self):
        return {"k": self.k, "masterSeed": self.master_seed, "codeId": self.code_id,
                "constant": True}
