"""Tweak-switch instrumentation, code layout and the per-block metadata file.

Every function body runs under its own tweak. A call switches the tweak CSR
to the callee's tweak right before the call and switches back right after it.
Each switch sequence is nop-padded so that its CSR write is the last word of a
64-bit granule; the instruction that follows starts a new granule, encrypted
under the tweak that is active from then on.

Functions that are targets of indirect calls also get:

* an entry thunk, encrypted under the class entry tweak, that sets the flag
  register and switches to the body tweak before falling into the body;
* a second exit that switches back to the class entry tweak and returns,
  taken when the flag register is set.

A class member keeps its flag in ``x31`` for its whole activation, so call
sites inside members spill ``x31`` to the stack around the call, and direct
calls into a member clear it before switching.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .asm import FLAG_REG, RA, SCRATCH_REG, SP, SourceInstr, SourceProgram, split_hi_lo
from .cfg import TweakAssignment, build_call_graph
from .isa import CSR_TWEAK, NOP, EncodingError, Instruction, encode

GRANULE = 8
FLASH_SIZE = 0x10000

KINDS = ("orig", "switch", "align", "thunk", "flag", "exit", "tail")


class InstrumentError(ValueError):
    pass


class LayoutError(ValueError):
    pass


class MetadataError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class Slot:
    ins: Instruction
    tweak: int
    kind: str = "orig"
    sym: Optional[str] = None
    reloc: Optional[str] = None
    line: int = 0


@dataclass
class CallSite:
    function: str
    indirect: bool
    target: str
    switch: int = 0
    align: int = 0
    flag: int = 0


@dataclass
class InstrumentedFunction:
    name: str
    slots: List[Slot]
    labels: Dict[str, int]
    body: int
    body_tweak: int
    entry_tweak: Optional[int] = None
    # slots added for the indirect entry thunk and the indirect exit path
    entry_cost: int = 0
    exit_cost: int = 0

    def blocks(self) -> List[Tuple[int, int]]:
        """(offset, tweak) for every granule of the function."""
        out = []
        for k in range(0, len(self.slots), 2):
            out.append((k * 4, self.slots[k].tweak))
        return out


@dataclass
class InstrumentedProgram:
    functions: List[InstrumentedFunction]
    entry: str
    width: int
    protected: bool
    call_sites: List[CallSite] = field(default_factory=list)
    flag_reg: int = FLAG_REG

    def function(self, name: str) -> InstrumentedFunction:
        for f in self.functions:
            if f.name == name:
                return f
        raise KeyError(name)

    def counts(self) -> Counter:
        c: Counter = Counter()
        for f in self.functions:
            c.update(s.kind for s in f.slots)
        return c

    def inserted(self) -> int:
        """Instructions added by instrumentation, tail padding excluded."""
        c = self.counts()
        return sum(c[k] for k in KINDS if k not in ("orig", "tail"))

    def accounted(self) -> int:
        """Inserted instructions as tallied per call site, thunk and exit path."""
        per_site = sum(s.switch + s.align + s.flag for s in self.call_sites)
        return per_site + sum(f.entry_cost + f.exit_cost for f in self.functions)

    def domain_map(self) -> Dict[str, List[Tuple[int, int]]]:
        return {f.name: f.blocks() for f in self.functions}


def _switch_seq(tweak: int, width: int) -> List[Instruction]:
    if width == 5:
        return [Instruction("csrrwi", rd=0, csr=CSR_TWEAK, imm=tweak)]
    return [
        Instruction("lui", rd=SCRATCH_REG, imm=tweak),
        Instruction("csrrw", rd=0, rs1=SCRATCH_REG, csr=CSR_TWEAK),
    ]


_SAVE_FLAG = (Instruction("addi", rd=SP, rs1=SP, imm=-4), Instruction("sw", rs1=SP, rs2=FLAG_REG, imm=0))
_RESTORE_FLAG = (Instruction("lw", rd=FLAG_REG, rs1=SP, imm=0), Instruction("addi", rd=SP, rs1=SP, imm=4))
_CLEAR_FLAG = Instruction("addi", rd=FLAG_REG, rs1=0, imm=0)
_SET_FLAG = Instruction("addi", rd=FLAG_REG, rs1=0, imm=1)
_RET = Instruction("jalr", rd=0, rs1=RA, imm=0)
_IEXIT = ".iexit"


class _Emitter:
    def __init__(self, width: int):
        self.width = width
        self.slots: List[Slot] = []

    def emit(self, ins: Instruction, tweak: int, kind: str, line: int = 0, sym=None, reloc=None) -> None:
        self.slots.append(Slot(ins, tweak, kind, sym, reloc, line))

    def switch(self, to: int, current: int, line: int = 0) -> Tuple[int, int]:
        """Emit a tweak switch ending on a granule's last word; returns (switch, align) counts."""
        seq = _switch_seq(to, self.width)
        align = 0
        if (len(self.slots) + len(seq)) % 2:
            self.emit(NOP, current, "align", line)
            align = 1
        for ins in seq:
            self.emit(ins, current, "switch", line)
        assert len(self.slots) % 2 == 0
        return len(seq), align

    def pad_tail(self) -> None:
        if len(self.slots) % 2:
            self.emit(NOP, self.slots[-1].tweak, "tail")


def instrument(p: SourceProgram, t: TweakAssignment) -> InstrumentedProgram:
    """Rewrite ``p`` so that every granule executes under its assigned tweak."""
    if t.width == 20 and p.uses_register(SCRATCH_REG):
        raise InstrumentError(f"x{SCRATCH_REG} is used by the program but needed as scratch for 20-bit tweaks")
    graph = build_call_graph(p)
    if set(graph.nodes) != set(t.body_tweak):
        raise InstrumentError("tweak assignment does not match the program's call graph")

    functions: List[InstrumentedFunction] = []
    sites: List[CallSite] = []
    for f in p.functions:
        me = f.name
        t_body = t.body_tweak[me]
        t_entry = t.entry_tweak_of(me)
        member = t_entry is not None
        em = _Emitter(t.width)
        exit_cost = 0
        if member:
            em.emit(_SET_FLAG, t_entry, "thunk", f.line)
            n, a = em.switch(t_body, t_entry, f.line)
        body = len(em.slots)
        entry_cost = 1 + n + a if member else 0
        start_of: List[int] = []
        has_ret = False
        for si in f.instrs:
            start_of.append(len(em.slots))
            if si.is_direct_call or si.is_indirect_call:
                sites.append(_call_site(em, si, me, t, t_body, member))
            elif si.is_return and member:
                has_ret = True
                exit_cost += 1
                em.emit(Instruction("bne", rs1=FLAG_REG, rs2=0), t_body, "exit", si.line, sym=_IEXIT, reloc="pcrel")
                em.emit(si.ins, t_body, "orig", si.line)
            else:
                em.emit(si.ins, t_body, "orig", si.line, si.sym, si.reloc)
        labels = {name: start_of[idx] for name, idx in f.labels.items()}
        if member and has_ret:
            labels[_IEXIT] = len(em.slots)
            n, a = em.switch(t_entry, t_body)
            em.emit(_RET, t_entry, "exit")
            exit_cost += n + a + 1
        em.pad_tail()
        functions.append(InstrumentedFunction(me, em.slots, labels, body, t_body, t_entry, entry_cost, exit_cost))

    ip = InstrumentedProgram(functions, p.entry, t.width, True, sites)
    _check_domains(ip)
    return ip


def _call_site(em: _Emitter, si: SourceInstr, me: str, t: TweakAssignment, t_body: int, member: bool) -> CallSite:
    if si.is_direct_call:
        callee = si.sym
        to = t.body_tweak[callee]
        site = CallSite(me, False, callee)
        callee_member = t.class_of.get(callee) is not None
    else:
        if member and si.ins.rs1 == SP:
            raise InstrumentError(f"line {si.line}: indirect call through sp inside an indirectly callable function")
        cls = t.class_for_targets(si.targets)
        to = t.entry_tweak[cls]
        site = CallSite(me, True, f"class{cls}")
        callee_member = False
    if member:
        for ins in _SAVE_FLAG:
            em.emit(ins, t_body, "flag", si.line)
        site.flag += 2
    if callee_member:
        em.emit(_CLEAR_FLAG, t_body, "flag", si.line)
        site.flag += 1
    n, a = em.switch(to, t_body, si.line)
    site.switch += n
    site.align += a
    em.emit(si.ins, to, "orig", si.line, si.sym, si.reloc)
    n, a = em.switch(t_body, to, si.line)
    site.switch += n
    site.align += a
    if member:
        for ins in _RESTORE_FLAG:
            em.emit(ins, t_body, "flag", si.line)
        site.flag += 2
    return site


def plain(p: SourceProgram) -> InstrumentedProgram:
    """The unprotected build: original code, tail-padded, every block under tweak 0."""
    functions = []
    for f in p.functions:
        em = _Emitter(5)
        for si in f.instrs:
            em.emit(si.ins, 0, "orig", si.line, si.sym, si.reloc)
        em.pad_tail()
        functions.append(InstrumentedFunction(f.name, em.slots, dict(f.labels), 0, 0, None))
    return InstrumentedProgram(functions, p.entry, 0, False)


def _check_domains(ip: InstrumentedProgram) -> None:
    for f in ip.functions:
        for k in range(0, len(f.slots), 2):
            a, b = f.slots[k], f.slots[k + 1]
            if a.tweak != b.tweak:
                raise AssertionError(f"{f.name}: granule at offset {4 * k:#x} mixes tweaks")


@dataclass
class FunctionLayout:
    name: str
    start: int
    body: int
    size: int
    body_tweak: int
    entry_tweak: Optional[int] = None

    @property
    def end(self) -> int:
        return self.start + self.size


@dataclass
class MemoryImage:
    """Plaintext code image: granule address -> 64-bit word (low address in the low half)."""

    words: Dict[int, int]
    functions: Dict[str, FunctionLayout]
    entry: int
    entry_tweak: int
    # (address, instruction, tweak domain, slot kind) for every laid-out word
    listing: List[Tuple[int, Instruction, int, str]] = field(default_factory=list)

    @property
    def code_bytes(self) -> int:
        return sum(f.size for f in self.functions.values())

    def function_at(self, addr: int) -> Optional[FunctionLayout]:
        for f in self.functions.values():
            if f.start <= addr < f.end:
                return f
        return None

    def layout_json(self) -> str:
        doc = {
            "entry": self.entry,
            "entry_tweak": self.entry_tweak,
            "functions": [asdict(f) for f in self.functions.values()],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @staticmethod
    def functions_from_json(text: str) -> Tuple[int, int, Dict[str, FunctionLayout]]:
        doc = json.loads(text)
        funcs = {f["name"]: FunctionLayout(**f) for f in doc["functions"]}
        return doc["entry"], doc["entry_tweak"], funcs


def _resolve(slot: Slot, pc: int, f: InstrumentedFunction, flay: FunctionLayout, placed: Dict[str, FunctionLayout]) -> Instruction:
    ins = slot.ins
    if slot.reloc is None:
        return ins
    if slot.reloc == "call":
        target = placed[slot.sym].body
        return Instruction(ins.op, rd=ins.rd, imm=target - pc)
    if slot.reloc == "pcrel":
        target = flay.start + 4 * f.labels[slot.sym]
        return Instruction(ins.op, rd=ins.rd, rs1=ins.rs1, rs2=ins.rs2, imm=target - pc)
    if slot.reloc in ("hi", "lo"):
        if slot.sym in f.labels:
            target = flay.start + 4 * f.labels[slot.sym]
        else:
            target = placed[slot.sym].start
        hi, lo = split_hi_lo(target)
        if slot.reloc == "hi":
            return Instruction("lui", rd=ins.rd, imm=hi)
        return Instruction("addi", rd=ins.rd, rs1=ins.rs1, imm=lo)
    raise LayoutError(f"unknown relocation {slot.reloc!r}")


def layout(ip: InstrumentedProgram, base: int, limit: int = FLASH_SIZE) -> Tuple[MemoryImage, "MetadataFile"]:
    """Place functions contiguously from ``base`` and emit the metadata records."""
    if base % GRANULE:
        raise LayoutError(f"base {base:#x} is not 8-byte aligned")
    placed: Dict[str, FunctionLayout] = {}
    addr = base
    for f in ip.functions:
        size = 4 * len(f.slots)
        placed[f.name] = FunctionLayout(f.name, addr, addr + 4 * f.body, size, f.body_tweak, f.entry_tweak)
        addr += size
    if addr > limit:
        raise LayoutError(f"code ends at {addr:#x}, beyond the flash limit {limit:#x}")

    words: Dict[int, int] = {}
    listing = []
    records = []
    for f in ip.functions:
        flay = placed[f.name]
        encoded = []
        for k, slot in enumerate(f.slots):
            pc = flay.start + 4 * k
            ins = _resolve(slot, pc, f, flay, placed)
            try:
                encoded.append(encode(ins))
            except EncodingError as e:
                raise LayoutError(f"{f.name}+{4 * k:#x} (line {slot.line}): {e}") from None
            listing.append((pc, ins, slot.tweak, slot.kind))
        for k in range(0, len(encoded), 2):
            words[flay.start + 4 * k] = encoded[k] | (encoded[k + 1] << 32)
        records.append(FuncRecord(f.name, flay.start, tuple(f.blocks())))

    entry = placed[ip.entry]
    image = MemoryImage(words, placed, entry.body, entry.body_tweak, listing)
    return image, MetadataFile(tuple(records))


@dataclass(frozen=True)
class FuncRecord:
    name: str
    start: int
    # (offset from start, tweak) per 64-bit granule
    blocks: Tuple[Tuple[int, int], ...]


@dataclass(frozen=True)
class MetadataFile:
    functions: Tuple[FuncRecord, ...] = ()

    def tweak_map(self) -> Dict[int, int]:
        """Absolute granule address -> tweak; rejects overlapping blocks."""
        out: Dict[int, int] = {}
        for fr in self.functions:
            for off, tweak in fr.blocks:
                addr = fr.start + off
                if addr in out:
                    raise MetadataError(0, f"block at {addr:#x} is covered twice")
                out[addr] = tweak
        return out


_FUNC_LINE = re.compile(r"FUNC ([A-Za-z_][A-Za-z0-9_.]*) ([0-9a-f]{8}) (0|[1-9][0-9]*)")
_BLOCK_LINE = re.compile(r"BLOCK ([0-9a-f]{8}) ([0-9a-f]{5})")


def emit_metadata(m: MetadataFile) -> str:
    lines = []
    for fr in m.functions:
        lines.append(f"FUNC {fr.name} {fr.start:08x} {len(fr.blocks)}")
        for off, tweak in fr.blocks:
            lines.append(f"BLOCK {off:08x} {tweak:05x}")
    return "".join(line + "\n" for line in lines)


def parse_metadata(text: str, width: int = 20) -> MetadataFile:
    """Strict inverse of :func:`emit_metadata`; raises :class:`MetadataError`."""
    records: List[FuncRecord] = []
    seen = set()
    name = None
    start = 0
    expected = 0
    blocks: List[Tuple[int, int]] = []
    func_line = 0

    def close(lineno: int) -> None:
        if name is not None:
            if len(blocks) != expected:
                raise MetadataError(func_line, f"FUNC {name} declares {expected} blocks, found {len(blocks)}")
            records.append(FuncRecord(name, start, tuple(blocks)))

    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    for lineno, line in enumerate(lines, start=1):
        if (m := _FUNC_LINE.fullmatch(line)) is not None:
            close(lineno)
            name, start, expected = m.group(1), int(m.group(2), 16), int(m.group(3))
            if name in seen:
                raise MetadataError(lineno, f"duplicate FUNC {name}")
            if start % GRANULE:
                raise MetadataError(lineno, f"function start {start:#x} is not 8-byte aligned")
            seen.add(name)
            blocks = []
            func_line = lineno
        elif (m := _BLOCK_LINE.fullmatch(line)) is not None:
            if name is None:
                raise MetadataError(lineno, "BLOCK before any FUNC")
            off, tweak = int(m.group(1), 16), int(m.group(2), 16)
            if off % GRANULE:
                raise MetadataError(lineno, f"block offset {off:#x} is not 8-byte aligned")
            if blocks and off <= blocks[-1][0]:
                raise MetadataError(lineno, f"block offset {off:#x} is not increasing")
            if tweak >= 1 << width:
                raise MetadataError(lineno, f"tweak {tweak:#x} does not fit in {width} bits")
            blocks.append((off, tweak))
        else:
            raise MetadataError(lineno, f"malformed record {line!r}")
    close(len(lines))
    return MetadataFile(tuple(records))

