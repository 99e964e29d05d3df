import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import clang_oracle
from scfi.isa import (
    CSR_MCYCLE,
    CSR_TWEAK,
    NOP,
    EncodingError,
    Illegal,
    Instruction,
    decode,
    encode,
    illegal_density,
    is_illegal,
    random_instruction,
)

FROZEN = json.loads(clang_oracle.FROZEN.read_text())


def test_nop_encoding():
    assert encode(NOP) == 0x00000013
    assert decode(0x00000013) == NOP
    assert str(decode(0x13)) == "nop"


def test_csrrwi_tweak_encoding():
    w = encode(Instruction("csrrwi", rd=0, csr=CSR_TWEAK, imm=7))
    assert w == (0x7C0 << 20) | (7 << 15) | (0b101 << 12) | 0x73


@pytest.mark.parametrize("word", [0x00000000, 0xFFFFFFFF])
def test_defined_illegal_words(word):
    assert isinstance(decode(word), Illegal)
    assert is_illegal(word)


@pytest.mark.parametrize("text,word", FROZEN)
def test_matches_assembler(text, word):
    word = int(word, 16)
    assert str(decode(word)) == text
    assert encode(decode(word)) == word


@pytest.mark.skipif(not clang_oracle.available(), reason="clang not installed")
def test_live_assembler_agrees():
    rng = random.Random(99)
    ins = [random_instruction(rng) for _ in range(200)]
    words = clang_oracle.clang_encode([str(i) for i in ins])
    assert [encode(i) for i in ins] == words


@settings(max_examples=2000, deadline=None)
@given(st.randoms(use_true_random=False))
def test_decode_encode_identity(rng):
    i = random_instruction(rng)
    assert decode(encode(i)) == i


def test_round_trip_10k():
    rng = random.Random(3)
    for _ in range(10_000):
        i = random_instruction(rng)
        assert decode(encode(i)) == i


@settings(max_examples=3000, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_decode_is_total_and_canonical(word):
    out = decode(word)
    if not isinstance(out, Illegal):
        assert encode(out) == word


@pytest.mark.parametrize(
    "ins",
    [
        Instruction("addi", rd=1, rs1=0, imm=2048),
        Instruction("beq", rs1=1, rs2=2, imm=3),
        Instruction("jal", rd=1, imm=1 << 20),
        Instruction("lui", rd=1, imm=1 << 20),
        Instruction("csrrwi", rd=0, csr=CSR_TWEAK, imm=32),
        Instruction("add", rd=32, rs1=0, rs2=0),
        Instruction("csrrw", rd=0, rs1=1, csr=0x123),
    ],
)
def test_encode_rejects_out_of_range(ins):
    with pytest.raises(EncodingError):
        encode(ins)


def test_unsupported_encodings_are_illegal():
    # slli, mul, lb, fence, ebreak, csrrc on a supported csr, csr write to an unknown csr
    for word in (0x00109093, 0x02208033, 0x00008083, 0x0FF0000F, 0x00100073, 0xC0003073, 0x12309073):
        assert isinstance(decode(word), Illegal), hex(word)


def test_mcycle_read_decodes():
    w = encode(Instruction("csrrs", rd=10, rs1=0, csr=CSR_MCYCLE))
    assert decode(w) == Instruction("csrrs", rd=10, rs1=0, csr=CSR_MCYCLE)


def test_illegal_density_properties():
    d = illegal_density(100_000, 1)
    assert 0 < d < 1
    assert round(d, 3) == 0.968
    assert illegal_density(1000, 5) == illegal_density(1000, 5)
    assert illegal_density(20_000, 1, restrict_opcodes=True) < illegal_density(20_000, 1)
    with pytest.raises(ValueError):
        illegal_density(999, 1)
