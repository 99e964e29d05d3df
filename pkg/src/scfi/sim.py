"""In-order RV32I core model with a descrambling instruction fetch.

Timing is one cycle per retired instruction; the instruction cache is free.
Writing the tweak CSR flushes the instruction cache and the new tweak is
used from the very next fetch on.

The tweak CSR latches ``zimm`` on ``csrrwi`` and bits [31:12] of the source
register on ``csrrw``/``csrrs`` (the ``lui``-loaded 20-bit form).
"""

from __future__ import annotations

import enum
import functools
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

from .instrument import FLASH_SIZE, GRANULE
from .isa import CSR_MCYCLE, CSR_RANGE_HI, CSR_RANGE_LO, CSR_TWEAK, Illegal, decode
from .prince import PrinceKey, RoundConfig, ScrambleParams, decrypt

MASK32 = 0xFFFFFFFF
ERASED = 0xFFFFFFFFFFFFFFFF

DMEM_BASE = 0x10000000
DMEM_SIZE = 0x10000
# globals live below DATA_END, the stack grows down from STACK_TOP
DATA_END = DMEM_BASE + 0x8000
STACK_TOP = DMEM_BASE + DMEM_SIZE

TWEAK_MASK = (1 << 20) - 1


class ResetError(ValueError):
    pass


class Event(enum.Enum):
    RETIRED = "retired"
    ECALL = "ecall-exit"
    ILLEGAL = "illegal-instruction"
    FETCH_FAULT = "fetch-fault"
    MEMORY_FAULT = "memory-fault"


class Termination(str, enum.Enum):
    ECALL = "ecall-exit"
    ILLEGAL = "illegal-instruction"
    FETCH_FAULT = "fetch-fault"
    MEMORY_FAULT = "memory-fault"
    CYCLE_LIMIT = "cycle-limit"


_EVENT_TERMINATION = {
    Event.ECALL: Termination.ECALL,
    Event.ILLEGAL: Termination.ILLEGAL,
    Event.FETCH_FAULT: Termination.FETCH_FAULT,
    Event.MEMORY_FAULT: Termination.MEMORY_FAULT,
}


@dataclass(frozen=True)
class TraceEntry:
    pc: int
    tweak: int
    word: int
    mnemonic: str

    def as_dict(self) -> dict:
        return {"pc": self.pc, "tweak": self.tweak, "word": self.word, "mnemonic": self.mnemonic}


@dataclass
class RunResult:
    termination: Termination
    exit_value: int
    cycles: int
    trace: Optional[List[TraceEntry]] = None
    pc: int = 0
    retired: int = 0


@functools.lru_cache(maxsize=1 << 16)
def _descramble(cipher: int, k0: int, k1: int, rounds: RoundConfig) -> int:
    return decrypt(cipher, PrinceKey(k0, k1), rounds)


def _signed(v: int) -> int:
    return v - (1 << 32) if v & 0x80000000 else v


class Machine:
    """Architectural state plus the fetch/decode/execute loop."""

    def __init__(
        self,
        words: Mapping[int, int],
        params: ScrambleParams,
        entry: int,
        tweak: int = 0,
        descramble: bool = True,
        flash_size: int = FLASH_SIZE,
    ):
        if entry % 4:
            raise ResetError(f"entry {entry:#x} is not 4-byte aligned")
        if not 0 <= entry < flash_size:
            raise ResetError(f"entry {entry:#x} is outside flash")
        self.flash: Dict[int, int] = dict(words)
        self.params = params
        self.descramble = descramble
        self.flash_size = flash_size
        self.pc = entry
        self.x = [0] * 32
        self.x[2] = STACK_TOP
        self.csr_tweak = tweak & TWEAK_MASK
        self.csr_range_lo = params.range_lo
        self.csr_range_hi = params.range_hi
        self.mcycle = 0
        self.retired = 0
        # granule address -> (plaintext block, tweak it was decrypted under)
        self.icache: Dict[int, Tuple[int, int]] = {}
        self.dmem = bytearray(DMEM_SIZE)
        self.halted = False
        self.termination: Optional[Termination] = None
        self.exit_value = 0
        self.trace: Optional[List[TraceEntry]] = None
        # one-shot fault hooks, consumed by the next fetch / load / execute
        self.insn_mask = 0
        self.load_mask = 0
        self.next_pc_mask = 0

    # memory ---------------------------------------------------------------

    def _key(self, granule: int, tweak: int) -> Tuple[int, int]:
        key = self.params.key
        if self.csr_range_lo <= granule <= self.csr_range_hi:
            k0 = key.k0 ^ granule if self.params.address_mix else key.k0
            return k0, key.k1 ^ tweak
        return key.k0, key.k1

    def read_flash(self, granule: int, tweak: int) -> int:
        cipher = self.flash.get(granule, ERASED)
        if not self.descramble:
            return cipher
        k0, k1 = self._key(granule, tweak)
        return _descramble(cipher, k0, k1, self.params.rounds)

    def load_word(self, addr: int) -> Optional[int]:
        if addr & 3:
            return None
        if DMEM_BASE <= addr < DMEM_BASE + DMEM_SIZE:
            return int.from_bytes(self.dmem[addr - DMEM_BASE : addr - DMEM_BASE + 4], "little")
        if 0 <= addr < self.flash_size:
            block = self.read_flash(addr & ~7, self.csr_tweak)
            return (block >> 32) & MASK32 if addr & 4 else block & MASK32
        return None

    def store_word(self, addr: int, value: int) -> bool:
        if addr & 3 or not DMEM_BASE <= addr < DMEM_BASE + DMEM_SIZE:
            return False
        off = addr - DMEM_BASE
        self.dmem[off : off + 4] = (value & MASK32).to_bytes(4, "little")
        return True

    def data_region(self) -> bytes:
        return bytes(self.dmem[: DATA_END - DMEM_BASE])

    # CSRs -----------------------------------------------------------------

    def _csr_read(self, csr: int) -> int:
        if csr == CSR_TWEAK:
            return self.csr_tweak
        if csr == CSR_RANGE_LO:
            return self.csr_range_lo
        if csr == CSR_RANGE_HI:
            return self.csr_range_hi
        return self.mcycle & MASK32

    def _csr_write(self, csr: int, value: int, from_register: bool) -> None:
        if csr == CSR_TWEAK:
            self.csr_tweak = (value >> 12 if from_register else value) & TWEAK_MASK
            self.icache.clear()
        elif csr == CSR_RANGE_LO:
            self.csr_range_lo = value & MASK32
        elif csr == CSR_RANGE_HI:
            self.csr_range_hi = value & MASK32
        elif csr == CSR_MCYCLE:
            self.mcycle = value & MASK32

    # execution ------------------------------------------------------------

    def fetch(self) -> Optional[int]:
        pc = self.pc
        if pc & 3 or not 0 <= pc < self.flash_size:
            return None
        granule = pc & ~7
        entry = self.icache.get(granule)
        if entry is None:
            entry = (self.read_flash(granule, self.csr_tweak), self.csr_tweak)
            self.icache[granule] = entry
        block = entry[0]
        return (block >> 32) & MASK32 if pc & 4 else block & MASK32

    def _halt(self, event: Event) -> Event:
        self.halted = True
        self.termination = _EVENT_TERMINATION[event]
        return event

    def step(self) -> Event:
        if self.halted:
            raise RuntimeError("machine is halted")
        pc = self.pc
        word = self.fetch()
        if word is None:
            return self._halt(Event.FETCH_FAULT)
        if self.insn_mask:
            word ^= self.insn_mask
            self.insn_mask = 0
        ins = decode(word)
        if self.trace is not None:
            self.trace.append(TraceEntry(pc, self.csr_tweak, word, "illegal" if isinstance(ins, Illegal) else ins.op))
        if isinstance(ins, Illegal):
            return self._halt(Event.ILLEGAL)

        x = self.x
        op = ins.op
        rd = ins.rd
        next_pc = pc + 4
        value = None
        if op == "addi":
            value = x[ins.rs1] + ins.imm
        elif op in ("beq", "bne", "blt", "bge"):
            a, b = x[ins.rs1], x[ins.rs2]
            if op == "beq":
                taken = a == b
            elif op == "bne":
                taken = a != b
            elif op == "blt":
                taken = _signed(a) < _signed(b)
            else:
                taken = _signed(a) >= _signed(b)
            if taken:
                next_pc = pc + ins.imm
        elif op == "lw":
            addr = (x[ins.rs1] + ins.imm) & MASK32
            loaded = self.load_word(addr)
            if loaded is None:
                return self._halt(Event.MEMORY_FAULT)
            if self.load_mask:
                loaded ^= self.load_mask
                self.load_mask = 0
            value = loaded
        elif op == "sw":
            addr = (x[ins.rs1] + ins.imm) & MASK32
            if not self.store_word(addr, x[ins.rs2]):
                return self._halt(Event.MEMORY_FAULT)
        elif op == "jal":
            value = pc + 4
            next_pc = pc + ins.imm
        elif op == "jalr":
            value = pc + 4
            next_pc = (x[ins.rs1] + ins.imm) & ~1
        elif op == "add":
            value = x[ins.rs1] + x[ins.rs2]
        elif op == "sub":
            value = x[ins.rs1] - x[ins.rs2]
        elif op == "and":
            value = x[ins.rs1] & x[ins.rs2]
        elif op == "or":
            value = x[ins.rs1] | x[ins.rs2]
        elif op == "xor":
            value = x[ins.rs1] ^ x[ins.rs2]
        elif op == "slt":
            value = int(_signed(x[ins.rs1]) < _signed(x[ins.rs2]))
        elif op == "sll":
            value = x[ins.rs1] << (x[ins.rs2] & 31)
        elif op == "srl":
            value = x[ins.rs1] >> (x[ins.rs2] & 31)
        elif op == "lui":
            value = ins.imm << 12
        elif op == "auipc":
            value = pc + (ins.imm << 12)
        elif op == "ecall":
            self.exit_value = x[10]
            self.mcycle += 1
            self.retired += 1
            return self._halt(Event.ECALL)
        else:
            old = self._csr_read(ins.csr)
            if op == "csrrwi":
                self._csr_write(ins.csr, ins.imm, from_register=False)
            elif op == "csrrw":
                self._csr_write(ins.csr, x[ins.rs1], from_register=True)
            elif ins.rs1:
                self._csr_write(ins.csr, old | x[ins.rs1], from_register=True)
            value = old

        if value is not None and rd:
            x[rd] = value & MASK32
        if self.next_pc_mask:
            next_pc ^= self.next_pc_mask
            self.next_pc_mask = 0
        self.pc = next_pc & MASK32
        self.mcycle += 1
        self.retired += 1
        return Event.RETIRED

    def run(self, max_cycles: int) -> RunResult:
        if max_cycles < 1:
            raise ValueError("max_cycles must be at least 1")
        while not self.halted:
            if self.retired >= max_cycles:
                self.termination = Termination.CYCLE_LIMIT
                break
            self.step()
        return self.result()

    def result(self) -> RunResult:
        term = self.termination or Termination.CYCLE_LIMIT
        return RunResult(term, self.exit_value, self.mcycle, self.trace, self.pc, self.retired)

    def icache_coherent(self) -> bool:
        return all(t == self.csr_tweak for _, t in self.icache.values())


def reset(flash, params: Optional[ScrambleParams] = None, entry: int = 0, initial_tweak: int = 0, trace: bool = False) -> Machine:
    """Fresh machine over a :class:`~scfi.scramble.FlashImage` (descrambling fetch)."""
    m = Machine(flash.words, params or flash.params, entry, initial_tweak, descramble=True)
    if trace:
        m.trace = []
    return m


def reset_plain(words: Mapping[int, int], entry: int, initial_tweak: int = 0, params: Optional[ScrambleParams] = None, trace: bool = False) -> Machine:
    """Fresh machine over plaintext words; the tweak CSR has no effect on fetch."""
    if params is None:
        params = ScrambleParams(PrinceKey(0, 0), 0, 0)
    m = Machine(words, params, entry, initial_tweak, descramble=False)
    if trace:
        m.trace = []
    return m


def step(m: Machine) -> Event:
    return m.step()


def run(m: Machine, max_cycles: int) -> RunResult:
    return m.run(max_cycles)


@dataclass
class Snapshot:
    """What the transparency checks compare between two runs."""

    termination: Termination
    exit_value: int
    data: bytes = field(repr=False, default=b"")


def snapshot(m: Machine) -> Snapshot:
    return Snapshot(m.termination or Termination.CYCLE_LIMIT, m.exit_value, m.data_region())
