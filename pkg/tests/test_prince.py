import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import reference_prince as ref
from scfi.prince import (
    ALPHA,
    TEST_VECTORS,
    PrinceKey,
    RoundConfig,
    ScrambleParams,
    decrypt,
    effective_key,
    encrypt,
    encrypt_whitened,
    self_test,
)

u64 = st.integers(0, 2**64 - 1)
rounds = st.sampled_from(list(RoundConfig))


@pytest.mark.parametrize("pt,k0,k1,ct", TEST_VECTORS)
def test_published_vectors(pt, k0, k1, ct):
    key = PrinceKey(k0, k1)
    assert encrypt(pt, key, RoundConfig.FULL) == ct
    assert decrypt(ct, key, RoundConfig.FULL) == pt


def test_vector_table_is_the_published_one():
    # checked against the textbook reference, which shares no code with the package
    for pt, k0, k1, ct in TEST_VECTORS:
        assert ref.encrypt(pt, k0, k1) == ct
    assert (0, 0, 0, 0x818665AA0D02DFDA) in TEST_VECTORS
    assert (0xFFFFFFFFFFFFFFFF, 0, 0, 0x604AE6CA03C20ADA) in TEST_VECTORS


def test_self_test_passes():
    assert self_test() == []


@settings(max_examples=60, deadline=None)
@given(u64, u64, u64, rounds)
def test_matches_reference(block, k0, k1, cfg):
    key = PrinceKey(k0, k1)
    assert encrypt(block, key, cfg) == ref.encrypt(block, k0, k1, cfg.half_rounds)
    assert decrypt(block, key, cfg) == ref.decrypt(block, k0, k1, cfg.half_rounds)


@settings(max_examples=300, deadline=None)
@given(u64, u64, u64, rounds)
def test_round_trip(block, k0, k1, cfg):
    key = PrinceKey(k0, k1)
    assert decrypt(encrypt(block, key, cfg), key, cfg) == block


@settings(max_examples=100, deadline=None)
@given(u64, u64, u64, rounds)
def test_alpha_reflection(block, k0, k1, cfg):
    key = PrinceKey(k0, k1)
    swapped = encrypt_whitened(block, key.k0_prime, k0, k1 ^ ALPHA, cfg)
    assert decrypt(block, key, cfg) == swapped


def test_reduced_differs_from_full():
    rng = random.Random(7)
    pairs = [(rng.getrandbits(64), PrinceKey(rng.getrandbits(64), rng.getrandbits(64))) for _ in range(100)]
    assert any(encrypt(b, k, RoundConfig.FULL) != encrypt(b, k, RoundConfig.REDUCED5) for b, k in pairs)


def test_only_two_round_configs():
    assert {r.value for r in RoundConfig} == {"full", "reduced5"}
    with pytest.raises(ValueError):
        RoundConfig("reduced7")


def test_key_hex_round_trip():
    key = PrinceKey.from_hex("00112233445566778899aabbccddeeff")
    assert key.k0 == 0x0011223344556677 and key.k1 == 0x8899AABBCCDDEEFF
    assert key.hex() == "00112233445566778899aabbccddeeff"
    with pytest.raises(ValueError):
        PrinceKey.from_hex("1234")


PARAMS = ScrambleParams(PrinceKey(0x0123456789ABCDEF, 0), 0x2000, 0x7FF8)


def test_effective_key_outside_range_is_base():
    for addr in (0x0, 0x1FF8, 0x8000, 0xFFF8):
        assert effective_key(PARAMS.key, 0x1F, addr, PARAMS) == PARAMS.key


def test_effective_key_zero_tweak_is_base():
    assert effective_key(PARAMS.key, 0, 0x2000, PARAMS) == PARAMS.key


def test_effective_key_xors_into_k1():
    k = effective_key(PARAMS.key, 0x1F, 0x2000, PARAMS)
    assert k.k1 == 0x000000000000001F
    assert k.k0 == PARAMS.key.k0


def test_effective_key_range_is_inclusive():
    assert effective_key(PARAMS.key, 3, 0x7FF8, PARAMS).k1 == 3
    assert effective_key(PARAMS.key, 3, 0x2000, PARAMS).k1 == 3


def test_effective_key_rejects_misaligned_address():
    with pytest.raises(ValueError):
        effective_key(PARAMS.key, 1, 0x2004, PARAMS)


def test_address_mix_is_off_by_default():
    assert PARAMS.address_mix is False
    mixed = ScrambleParams(PARAMS.key, 0x2000, 0x7FF8, address_mix=True)
    assert effective_key(mixed.key, 1, 0x2008, mixed).k0 == PARAMS.key.k0 ^ 0x2008


def test_scramble_params_validation():
    with pytest.raises(ValueError):
        ScrambleParams(PARAMS.key, 0x2004, 0x7FF8)
    with pytest.raises(ValueError):
        ScrambleParams(PARAMS.key, 0x8000, 0x2000)
    # a bound on the last byte of a granule names that granule
    assert ScrambleParams(PARAMS.key, 0x2000, 0x7FFF).range_hi == 0x7FF8


def test_wrong_tweak_garbles_every_sample():
    rng = random.Random(11)
    params = ScrambleParams(PrinceKey(rng.getrandbits(64), rng.getrandbits(64)), 0x2000, 0x7FF8)
    for _ in range(10_000):
        b = rng.getrandbits(64)
        t1 = rng.getrandbits(20)
        t2 = rng.getrandbits(20)
        while t2 == t1:
            t2 = rng.getrandbits(20)
        c = encrypt(b, effective_key(params.key, t1, 0x2000, params), params.rounds)
        assert decrypt(c, effective_key(params.key, t2, 0x2000, params), params.rounds) != b
