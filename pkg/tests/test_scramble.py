import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scfi.instrument import FuncRecord, MetadataFile
from scfi.prince import PrinceKey, RoundConfig, ScrambleParams, encrypt
from scfi.scramble import (
    FlashImage,
    ScrambleError,
    VmemError,
    build_flash,
    descramble_word,
    emit_vmem,
    parse_vmem,
    parse_vmem_words,
)

import reference_prince as ref

KEY = PrinceKey(0x0011223344556677, 0x8899AABBCCDDEEFF)
PARAMS = ScrambleParams(KEY, 0x2000, 0x7FFF)


def meta_for(addrs, tweak_of):
    return MetadataFile(tuple(FuncRecord(f"f{a:x}", a, ((0, tweak_of(a)),)) for a in addrs))


def test_vmem_line_format():
    assert emit_vmem({0x2000: 0xDEADBEEFCAFEF00D}) == "@00000400 deadbeefcafef00d\n"
    assert parse_vmem_words("@00000400 deadbeefcafef00d\n") == {0x2000: 0xDEADBEEFCAFEF00D}


@pytest.mark.parametrize(
    "text,line",
    [
        ("@00000400 deadbeefcafef00\n", 1),
        ("@0000400 deadbeefcafef00d\n", 1),
        ("@00000400 DEADBEEFCAFEF00D\n", 1),
        ("@00000400  deadbeefcafef00d\n", 1),
        ("@00000401 0000000000000000\n@00000400 0000000000000000\n", 2),
        ("@00000400 0000000000000000\n@00000400 0000000000000000\n", 2),
        ("@00000400 0000000000000000\n\n", 2),
        ("# comment\n", 1),
    ],
)
def test_vmem_errors(text, line):
    with pytest.raises(VmemError) as e:
        parse_vmem_words(text)
    assert e.value.line == line


def test_orphan_code_word():
    with pytest.raises(ScrambleError):
        build_flash({0x2000: 1, 0x2008: 2}, meta_for([0x2000], lambda a: 1), PARAMS)


def test_words_outside_flash_rejected():
    with pytest.raises(ScrambleError):
        build_flash({0x10000: 1}, MetadataFile(), PARAMS)
    with pytest.raises(ScrambleError):
        build_flash({0x2004: 1}, meta_for([0x2000], lambda a: 1), PARAMS)


def test_outside_range_uses_base_key():
    flash = build_flash({0x1000: 0x1234, 0x8000: 0x5678}, MetadataFile(), PARAMS)
    assert flash.words[0x1000] == encrypt(0x1234, KEY, PARAMS.rounds)
    assert flash.words[0x8000] == encrypt(0x5678, KEY, PARAMS.rounds)
    # independent cipher: reduced rounds are two forward and two backward
    assert flash.words[0x1000] == ref.encrypt(0x1234, KEY.k0, KEY.k1, half_rounds=2)


def test_in_range_word_uses_tweaked_k1():
    flash = build_flash({0x2000: 42}, meta_for([0x2000], lambda a: 0x1B), PARAMS)
    assert flash.words[0x2000] == ref.encrypt(42, KEY.k0, KEY.k1 ^ 0x1B, half_rounds=2)
    assert descramble_word(flash, 0x2000, 0x1B) == 42
    assert descramble_word(flash, 0x2000, 0x1A) != 42


def test_single_block_tweak_change_is_local():
    addrs = [0x2000 + 8 * i for i in range(16)]
    words = {a: a * 0x9E3779B97F4A7C15 % 2**64 for a in addrs}
    a = build_flash(words, meta_for(addrs, lambda x: 3), PARAMS)
    b = build_flash(words, meta_for(addrs, lambda x: 4 if x == 0x2040 else 3), PARAMS)
    diff = [x for x in addrs if a.words[x] != b.words[x]]
    assert diff == [0x2040]


def test_address_mix_changes_ciphertext():
    mixed = ScrambleParams(KEY, 0x2000, 0x7FFF, address_mix=True)
    words = {0x2000: 7, 0x2008: 7}
    m = meta_for(words, lambda a: 1)
    plain_ct = build_flash(words, m, PARAMS)
    mixed_ct = build_flash(words, m, mixed)
    assert plain_ct.words[0x2000] == plain_ct.words[0x2008]
    assert mixed_ct.words[0x2000] != mixed_ct.words[0x2008]
    assert descramble_word(mixed_ct, 0x2008, 1) == 7


images = st.dictionaries(
    st.integers(0x400, 0xFFF).map(lambda i: 8 * i),
    st.tuples(st.integers(0, 2**64 - 1), st.integers(0, 2**20 - 1)),
    max_size=24,
)


@settings(max_examples=100, deadline=None)
@given(images, st.sampled_from(list(RoundConfig)), st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1))
def test_round_trip(image, rounds, k0, k1):
    params = ScrambleParams(PrinceKey(k0, k1), 0x2000, 0x7FFF, rounds)
    words = {a: w for a, (w, _) in image.items()}
    meta = meta_for(sorted(a for a in image if params.in_range(a)), lambda a: image[a][1])
    flash = build_flash(words, meta, params)
    text = emit_vmem(flash)
    again = parse_vmem(text, params)
    assert again == flash
    assert emit_vmem(again) == text
    for a, (w, t) in image.items():
        assert descramble_word(again, a, t if params.in_range(a) else 0) == w


def test_flash_equality_includes_params():
    a = FlashImage({0: 1}, PARAMS)
    assert a == FlashImage({0: 1}, PARAMS)
    assert a != FlashImage({0: 1}, PARAMS.with_rounds(RoundConfig.FULL))
