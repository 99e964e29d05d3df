"""PRINCE 64-bit block cipher and the tweak-into-key derivation used by the flash scrambler.

The round functions are table driven: the nibble-wise S-box layer is folded
into byte-indexed lookup tables together with the linear layer, so one
forward round costs eight lookups and a handful of XORs.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import List

MASK64 = (1 << 64) - 1

SBOX = (0xB, 0xF, 0x3, 0x2, 0xA, 0xC, 0x9, 0x1, 0x6, 0x7, 0x8, 0x0, 0xE, 0x5, 0xD, 0x4)
SBOX_INV = tuple(SBOX.index(i) for i in range(16))

# nibble i of the output (counted from the least significant nibble) is taken
# from nibble SHIFT_ROWS[i] of the input
SHIFT_ROWS = (0x4, 0x9, 0xE, 0x3, 0x8, 0xD, 0x2, 0x7, 0xC, 0x1, 0x6, 0xB, 0x0, 0x5, 0xA, 0xF)
SHIFT_ROWS_INV = tuple(SHIFT_ROWS.index(i) for i in range(16))

ROUND_CONSTANTS = (
    0x0000000000000000,
    0x13198A2E03707344,
    0xA4093822299F31D0,
    0x082EFA98EC4E6C89,
    0x452821E638D01377,
    0xBE5466CF34E90C6C,
    0x7EF84F78FD955CB1,
    0x85840851F1AC43AA,
    0xC882D32F25323C54,
    0x64A51195E0E3610D,
    0xD3B5A399CA0C2399,
    0xC0AC29B7C97C50DD,
)

# RC[i] ^ RC[11 - i] for every i
ALPHA = 0xC0AC29B7C97C50DD

_M_ROWS = (0x7BDE, 0xBDE7, 0xDE7B, 0xE7BD)


class RoundConfig(enum.Enum):
    """Supported round configurations.

    ``FULL`` is the 12-round reference cipher (five forward rounds, the
    middle layer, five backward rounds). ``REDUCED5`` keeps two rounds on
    each side of the middle layer, i.e. five non-linear layers in total.
    """

    FULL = "full"
    REDUCED5 = "reduced5"

    @property
    def half_rounds(self) -> int:
        return 5 if self is RoundConfig.FULL else 2


@dataclass(frozen=True)
class PrinceKey:
    k0: int
    k1: int

    def __post_init__(self) -> None:
        if not (0 <= self.k0 <= MASK64 and 0 <= self.k1 <= MASK64):
            raise ValueError("key halves must be 64-bit unsigned values")

    @property
    def k0_prime(self) -> int:
        return rotr64(self.k0, 1) ^ (self.k0 >> 63)

    @classmethod
    def from_hex(cls, text: str) -> "PrinceKey":
        text = text.lower().removeprefix("0x")
        if len(text) != 32:
            raise ValueError(f"key must be 32 hex digits, got {len(text)}")
        value = int(text, 16)
        return cls(value >> 64, value & MASK64)

    def hex(self) -> str:
        return f"{self.k0:016x}{self.k1:016x}"


@dataclass(frozen=True)
class ScrambleParams:
    """Flash scramble key plus the byte-address window where tweaks apply.

    ``range_hi`` is stored as the address of the last granule covered; a
    bound ending on a granule's last byte (e.g. ``0x7fff``) is normalised.
    """

    key: PrinceKey
    range_lo: int
    range_hi: int
    rounds: RoundConfig = RoundConfig.REDUCED5
    address_mix: bool = False

    def __post_init__(self) -> None:
        if self.range_hi % 8 == 7:
            object.__setattr__(self, "range_hi", self.range_hi & ~7)
        if self.range_lo % 8 or self.range_hi % 8:
            raise ValueError("scramble range bounds must be 8-byte aligned")
        if self.range_lo > self.range_hi:
            raise ValueError("range_lo must not exceed range_hi")

    def in_range(self, addr: int) -> bool:
        return self.range_lo <= addr <= self.range_hi

    def with_rounds(self, rounds: RoundConfig) -> "ScrambleParams":
        return replace(self, rounds=rounds)


def rotr64(x: int, n: int) -> int:
    return ((x >> n) | (x << (64 - n))) & MASK64


def _sbox_layer(x: int, box) -> int:
    out = 0
    for i in range(16):
        out |= box[(x >> (4 * i)) & 0xF] << (4 * i)
    return out


def _m_prime(x: int) -> int:
    out = 0
    for blk in range(4):
        chunk = (x >> (16 * blk)) & 0xFFFF
        start = 0 if blk in (0, 3) else 1
        for nib in range(4):
            m = chunk & _M_ROWS[(start + 3 - nib) % 4]
            red = (m ^ (m >> 4) ^ (m >> 8) ^ (m >> 12)) & 0xF
            out |= red << (16 * blk + 4 * nib)
    return out


def _shift_rows(x: int, perm) -> int:
    out = 0
    for i in range(16):
        out |= ((x >> (4 * perm[i])) & 0xF) << (4 * i)
    return out


def _byte_tables(fn) -> List[List[int]]:
    return [[fn(b << (8 * i)) for b in range(256)] for i in range(8)]


_SBOX_BYTE = [SBOX[b & 0xF] | (SBOX[b >> 4] << 4) for b in range(256)]
_SBOX_INV_BYTE = [SBOX_INV[b & 0xF] | (SBOX_INV[b >> 4] << 4) for b in range(256)]

# forward round linear part: SR(M'(.)) with the S-box folded in
_FWD = [[_shift_rows(_m_prime(_SBOX_BYTE[b] << (8 * i)), SHIFT_ROWS) for b in range(256)] for i in range(8)]
# backward round linear part: M'(SR^-1(.)), S^-1 applied afterwards
_BWD = _byte_tables(lambda x: _m_prime(_shift_rows(x, SHIFT_ROWS_INV)))
# middle layer: M'(S(.)), S^-1 applied afterwards
_MID = [[_m_prime(_SBOX_BYTE[b] << (8 * i)) for b in range(256)] for i in range(8)]


def _apply(tables, x: int) -> int:
    t0, t1, t2, t3, t4, t5, t6, t7 = tables
    return (
        t0[x & 0xFF]
        ^ t1[(x >> 8) & 0xFF]
        ^ t2[(x >> 16) & 0xFF]
        ^ t3[(x >> 24) & 0xFF]
        ^ t4[(x >> 32) & 0xFF]
        ^ t5[(x >> 40) & 0xFF]
        ^ t6[(x >> 48) & 0xFF]
        ^ t7[(x >> 56) & 0xFF]
    )


def _sinv(x: int) -> int:
    s = _SBOX_INV_BYTE
    return (
        s[x & 0xFF]
        | s[(x >> 8) & 0xFF] << 8
        | s[(x >> 16) & 0xFF] << 16
        | s[(x >> 24) & 0xFF] << 24
        | s[(x >> 32) & 0xFF] << 32
        | s[(x >> 40) & 0xFF] << 40
        | s[(x >> 48) & 0xFF] << 48
        | s[(x >> 56) & 0xFF] << 56
    )


def _core_forward(x: int, k1: int, half: int) -> int:
    x ^= k1 ^ ROUND_CONSTANTS[0]
    for i in range(1, half + 1):
        x = _apply(_FWD, x) ^ ROUND_CONSTANTS[i] ^ k1
    x = _sinv(_apply(_MID, x))
    for i in range(11 - half, 11):
        x = _sinv(_apply(_BWD, x ^ ROUND_CONSTANTS[i] ^ k1))
    return x ^ ROUND_CONSTANTS[11] ^ k1


def _core_backward(x: int, k1: int, half: int) -> int:
    x ^= ROUND_CONSTANTS[11] ^ k1
    for i in range(10, 10 - half, -1):
        x = _apply(_FWD, x) ^ ROUND_CONSTANTS[i] ^ k1
    x = _sinv(_apply(_MID, x))
    for i in range(half, 0, -1):
        x = _sinv(_apply(_BWD, x ^ ROUND_CONSTANTS[i] ^ k1))
    return x ^ k1 ^ ROUND_CONSTANTS[0]


def encrypt_whitened(block: int, k0: int, k0_prime: int, k1: int, rounds: RoundConfig = RoundConfig.FULL) -> int:
    """Encrypt with explicit pre- and post-whitening keys."""
    return _core_forward(block ^ k0, k1, rounds.half_rounds) ^ k0_prime


def encrypt(block: int, key: PrinceKey, rounds: RoundConfig = RoundConfig.FULL) -> int:
    if not 0 <= block <= MASK64:
        raise ValueError("block must be a 64-bit unsigned value")
    return encrypt_whitened(block, key.k0, key.k0_prime, key.k1, rounds)


def decrypt(block: int, key: PrinceKey, rounds: RoundConfig = RoundConfig.FULL) -> int:
    if not 0 <= block <= MASK64:
        raise ValueError("block must be a 64-bit unsigned value")
    return _core_backward(block ^ key.k0_prime, key.k1, rounds.half_rounds) ^ key.k0


def effective_key(base: PrinceKey, tweak: int, addr: int, params: ScrambleParams) -> PrinceKey:
    """Key used for the granule at ``addr`` while ``tweak`` is active.

    Inside the scramble range the tweak is zero-extended and XORed into
    ``k1``; outside it the base key is used unchanged.
    """
    if addr % 8:
        raise ValueError(f"granule address {addr:#x} is not 8-byte aligned")
    if not params.in_range(addr):
        return base
    k0 = base.k0 ^ addr if params.address_mix else base.k0
    return PrinceKey(k0, base.k1 ^ tweak)


# (plaintext, k0, k1, ciphertext) from the cipher designers' published test vectors
TEST_VECTORS = (
    (0x0000000000000000, 0x0000000000000000, 0x0000000000000000, 0x818665AA0D02DFDA),
    (0xFFFFFFFFFFFFFFFF, 0x0000000000000000, 0x0000000000000000, 0x604AE6CA03C20ADA),
    (0x0000000000000000, 0xFFFFFFFFFFFFFFFF, 0x0000000000000000, 0x9FB51935FC3DF524),
    (0x0000000000000000, 0x0000000000000000, 0xFFFFFFFFFFFFFFFF, 0x78A54CBE737BB7EF),
    (0x0123456789ABCDEF, 0x0000000000000000, 0xFEDCBA9876543210, 0xAE25AD3CA8FA9CCF),
)


def self_test() -> List[str]:
    """Check the full-round cipher against TEST_VECTORS; returns failure descriptions."""
    failures = []
    for pt, k0, k1, ct in TEST_VECTORS:
        key = PrinceKey(k0, k1)
        got = encrypt(pt, key, RoundConfig.FULL)
        if got != ct:
            failures.append(f"encrypt({pt:016x}, {k0:016x}{k1:016x}) = {got:016x}, expected {ct:016x}")
        back = decrypt(ct, key, RoundConfig.FULL)
        if back != pt:
            failures.append(f"decrypt({ct:016x}, {k0:016x}{k1:016x}) = {back:016x}, expected {pt:016x}")
    return failures
