"""Minimal RV32I instruction model: encoding, decoding and illegal-word statistics."""

from __future__ import annotations

import functools
import random
from dataclasses import dataclass
from typing import Optional, Union

MASK32 = 0xFFFFFFFF

CSR_TWEAK = 0x7C0
CSR_RANGE_LO = 0x7C1
CSR_RANGE_HI = 0x7C2
CSR_MCYCLE = 0xB00

CSR_NAMES = {
    "csr_tweak": CSR_TWEAK,
    "csr_range_lo": CSR_RANGE_LO,
    "csr_range_hi": CSR_RANGE_HI,
    "mcycle": CSR_MCYCLE,
}
CSR_BY_ADDR = {v: k for k, v in CSR_NAMES.items()}

ABI_NAMES = (
    "zero ra sp gp tp t0 t1 t2 s0 s1 a0 a1 a2 a3 a4 a5 "
    "a6 a7 s2 s3 s4 s5 s6 s7 s8 s9 s10 s11 t3 t4 t5 t6"
).split()

OP_LUI = 0x37
OP_AUIPC = 0x17
OP_JAL = 0x6F
OP_JALR = 0x67
OP_BRANCH = 0x63
OP_LOAD = 0x03
OP_STORE = 0x23
OP_IMM = 0x13
OP_REG = 0x33
OP_SYSTEM = 0x73

MAJOR_OPCODES = (OP_LUI, OP_AUIPC, OP_JAL, OP_JALR, OP_BRANCH, OP_LOAD, OP_STORE, OP_IMM, OP_REG, OP_SYSTEM)

# mnemonic -> (funct3, funct7)
R_TYPE = {
    "add": (0, 0x00),
    "sub": (0, 0x20),
    "sll": (1, 0x00),
    "slt": (2, 0x00),
    "xor": (4, 0x00),
    "srl": (5, 0x00),
    "or": (6, 0x00),
    "and": (7, 0x00),
}
R_BY_FUNCT = {v: k for k, v in R_TYPE.items()}

BRANCHES = {"beq": 0, "bne": 1, "blt": 4, "bge": 5}
BRANCH_BY_FUNCT3 = {v: k for k, v in BRANCHES.items()}

CSR_OPS = {"csrrw": 1, "csrrs": 2, "csrrwi": 5}
CSR_OP_BY_FUNCT3 = {v: k for k, v in CSR_OPS.items()}

MNEMONICS = frozenset(
    list(R_TYPE) + list(BRANCHES) + list(CSR_OPS) + ["addi", "lw", "sw", "jal", "jalr", "lui", "auipc", "ecall"]
)


class EncodingError(ValueError):
    pass


@dataclass(frozen=True)
class Instruction:
    """One decoded instruction.

    Unused fields stay 0. ``imm`` holds the sign-extended immediate for
    I/S/B/J formats, the raw 20-bit field for ``lui``/``auipc`` and the
    5-bit zimm for ``csrrwi``.
    """

    op: str
    rd: int = 0
    rs1: int = 0
    rs2: int = 0
    imm: int = 0
    csr: int = 0

    def __str__(self) -> str:
        return format_instruction(self)

    @property
    def is_nop(self) -> bool:
        return self == NOP


@dataclass(frozen=True)
class Illegal:
    """Decode result for a word that is not a supported encoding."""

    word: int

    def __str__(self) -> str:
        return f"illegal {self.word:#010x}"


NOP = Instruction("addi")


def format_instruction(i: Instruction) -> str:
    op = i.op
    if i == NOP:
        return "nop"
    if op in R_TYPE:
        return f"{op} x{i.rd}, x{i.rs1}, x{i.rs2}"
    if op == "addi":
        return f"addi x{i.rd}, x{i.rs1}, {i.imm}"
    if op in ("lw", "jalr"):
        return f"{op} x{i.rd}, {i.imm}(x{i.rs1})"
    if op == "sw":
        return f"sw x{i.rs2}, {i.imm}(x{i.rs1})"
    if op in BRANCHES:
        return f"{op} x{i.rs1}, x{i.rs2}, {i.imm}"
    if op in ("lui", "auipc"):
        return f"{op} x{i.rd}, {i.imm:#x}"
    if op == "jal":
        return f"jal x{i.rd}, {i.imm}"
    if op == "ecall":
        return "ecall"
    csr = CSR_BY_ADDR.get(i.csr, f"{i.csr:#x}")
    if op == "csrrwi":
        return f"csrrwi x{i.rd}, {csr}, {i.imm}"
    return f"{op} x{i.rd}, {csr}, x{i.rs1}"


def _check_reg(*regs: int) -> None:
    for r in regs:
        if not 0 <= r < 32:
            raise EncodingError(f"register index {r} out of range")


def _check_signed(value: int, bits: int, what: str) -> None:
    lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    if not lo <= value <= hi:
        raise EncodingError(f"{what} immediate {value} outside [{lo}, {hi}]")


def encode(i: Instruction) -> int:
    op = i.op
    _check_reg(i.rd, i.rs1, i.rs2)
    if op in R_TYPE:
        f3, f7 = R_TYPE[op]
        return (f7 << 25) | (i.rs2 << 20) | (i.rs1 << 15) | (f3 << 12) | (i.rd << 7) | OP_REG
    if op in ("addi", "lw", "jalr"):
        _check_signed(i.imm, 12, op)
        opcode, f3 = {"addi": (OP_IMM, 0), "lw": (OP_LOAD, 2), "jalr": (OP_JALR, 0)}[op]
        return ((i.imm & 0xFFF) << 20) | (i.rs1 << 15) | (f3 << 12) | (i.rd << 7) | opcode
    if op == "sw":
        _check_signed(i.imm, 12, op)
        imm = i.imm & 0xFFF
        return ((imm >> 5) << 25) | (i.rs2 << 20) | (i.rs1 << 15) | (2 << 12) | ((imm & 0x1F) << 7) | OP_STORE
    if op in BRANCHES:
        _check_signed(i.imm, 13, op)
        if i.imm & 1:
            raise EncodingError("branch offset must be even")
        imm = i.imm & 0x1FFF
        return (
            ((imm >> 12) & 1) << 31
            | ((imm >> 5) & 0x3F) << 25
            | i.rs2 << 20
            | i.rs1 << 15
            | BRANCHES[op] << 12
            | ((imm >> 1) & 0xF) << 8
            | ((imm >> 11) & 1) << 7
            | OP_BRANCH
        )
    if op in ("lui", "auipc"):
        if not 0 <= i.imm <= 0xFFFFF:
            raise EncodingError(f"{op} immediate {i.imm:#x} outside 20 bits")
        return (i.imm << 12) | (i.rd << 7) | (OP_LUI if op == "lui" else OP_AUIPC)
    if op == "jal":
        _check_signed(i.imm, 21, op)
        if i.imm & 1:
            raise EncodingError("jump offset must be even")
        imm = i.imm & 0x1FFFFF
        return (
            ((imm >> 20) & 1) << 31
            | ((imm >> 1) & 0x3FF) << 21
            | ((imm >> 11) & 1) << 20
            | ((imm >> 12) & 0xFF) << 12
            | i.rd << 7
            | OP_JAL
        )
    if op == "ecall":
        return OP_SYSTEM
    if op in CSR_OPS:
        if i.csr not in CSR_BY_ADDR:
            raise EncodingError(f"unsupported CSR {i.csr:#x}")
        if op == "csrrwi":
            if not 0 <= i.imm < 32:
                raise EncodingError(f"csrrwi zimm {i.imm} outside 5 bits")
            src = i.imm
        else:
            src = i.rs1
        return (i.csr << 20) | (src << 15) | (CSR_OPS[op] << 12) | (i.rd << 7) | OP_SYSTEM
    raise EncodingError(f"unsupported instruction {op!r}")


def _sext(value: int, bits: int) -> int:
    sign = 1 << (bits - 1)
    return (value & (sign - 1)) - (value & sign)


@functools.lru_cache(maxsize=1 << 16)
def decode(word: int) -> Union[Instruction, Illegal]:
    """Decode a 32-bit word; returns :class:`Illegal` for anything unsupported."""
    word &= MASK32
    opcode = word & 0x7F
    rd = (word >> 7) & 0x1F
    f3 = (word >> 12) & 0x7
    rs1 = (word >> 15) & 0x1F
    rs2 = (word >> 20) & 0x1F
    f7 = word >> 25
    if opcode == OP_REG:
        op = R_BY_FUNCT.get((f3, f7))
        if op is not None:
            return Instruction(op, rd=rd, rs1=rs1, rs2=rs2)
    elif opcode == OP_IMM:
        if f3 == 0:
            return Instruction("addi", rd=rd, rs1=rs1, imm=_sext(word >> 20, 12))
    elif opcode == OP_LOAD:
        if f3 == 2:
            return Instruction("lw", rd=rd, rs1=rs1, imm=_sext(word >> 20, 12))
    elif opcode == OP_JALR:
        if f3 == 0:
            return Instruction("jalr", rd=rd, rs1=rs1, imm=_sext(word >> 20, 12))
    elif opcode == OP_STORE:
        if f3 == 2:
            return Instruction("sw", rs1=rs1, rs2=rs2, imm=_sext((f7 << 5) | rd, 12))
    elif opcode == OP_BRANCH:
        op = BRANCH_BY_FUNCT3.get(f3)
        if op is not None:
            imm = ((word >> 31) & 1) << 12 | ((word >> 7) & 1) << 11 | ((word >> 25) & 0x3F) << 5 | ((word >> 8) & 0xF) << 1
            return Instruction(op, rs1=rs1, rs2=rs2, imm=_sext(imm, 13))
    elif opcode in (OP_LUI, OP_AUIPC):
        return Instruction("lui" if opcode == OP_LUI else "auipc", rd=rd, imm=word >> 12)
    elif opcode == OP_JAL:
        imm = ((word >> 31) & 1) << 20 | ((word >> 12) & 0xFF) << 12 | ((word >> 20) & 1) << 11 | ((word >> 21) & 0x3FF) << 1
        return Instruction("jal", rd=rd, imm=_sext(imm, 21))
    elif opcode == OP_SYSTEM:
        if word == OP_SYSTEM:
            return Instruction("ecall")
        op = CSR_OP_BY_FUNCT3.get(f3)
        csr = word >> 20
        if op is not None and csr in CSR_BY_ADDR:
            if op == "csrrwi":
                return Instruction(op, rd=rd, imm=rs1, csr=csr)
            return Instruction(op, rd=rd, rs1=rs1, csr=csr)
    return Illegal(word)


def is_illegal(word: int) -> bool:
    return isinstance(decode(word), Illegal)


def illegal_density(sample_count: int, seed: int, restrict_opcodes: bool = False) -> float:
    """Fraction of random 32-bit words that decode as :class:`Illegal`.

    With ``restrict_opcodes`` the low seven bits of each sample are drawn
    from the supported major opcodes only.
    """
    if sample_count < 1000:
        raise ValueError("sample_count must be at least 1000")
    rng = random.Random(seed)
    illegal = 0
    for _ in range(sample_count):
        if restrict_opcodes:
            word = (rng.getrandbits(25) << 7) | rng.choice(MAJOR_OPCODES)
        else:
            word = rng.getrandbits(32)
        illegal += isinstance(decode(word), Illegal)
    return illegal / sample_count


def random_instruction(rng: random.Random) -> Instruction:
    """Draw a random supported instruction with in-range operands."""
    op = rng.choice(sorted(MNEMONICS))
    r = lambda: rng.randrange(32)  # noqa: E731
    if op in R_TYPE:
        return Instruction(op, rd=r(), rs1=r(), rs2=r())
    if op in ("addi", "lw", "jalr"):
        return Instruction(op, rd=r(), rs1=r(), imm=rng.randint(-2048, 2047))
    if op == "sw":
        return Instruction(op, rs1=r(), rs2=r(), imm=rng.randint(-2048, 2047))
    if op in BRANCHES:
        return Instruction(op, rs1=r(), rs2=r(), imm=2 * rng.randint(-2048, 2047))
    if op in ("lui", "auipc"):
        return Instruction(op, rd=r(), imm=rng.randrange(1 << 20))
    if op == "jal":
        return Instruction(op, rd=r(), imm=2 * rng.randint(-(1 << 19), (1 << 19) - 1))
    if op == "ecall":
        return Instruction(op)
    csr = rng.choice(sorted(CSR_BY_ADDR))
    if op == "csrrwi":
        return Instruction(op, rd=r(), imm=rng.randrange(32), csr=csr)
    return Instruction(op, rd=r(), rs1=r(), csr=csr)


def parse_register(token: str) -> Optional[int]:
    token = token.strip().lower()
    if token.startswith("x") and token[1:].isdigit():
        n = int(token[1:])
        return n if n < 32 else None
    if token == "fp":
        return 8
    if token in ABI_NAMES:
        return ABI_NAMES.index(token)
    return None
