"""Mini-assembly front end producing a resolved :class:`SourceProgram`.

Grammar (one statement per line)::

    func <name>:            open a function
    <label>:                function-local label
    # entry                 the next ``func`` is the program entry
    # targets: f, g         the next instruction is an indirect call to one of f, g
    <mnemonic> <operands>   instruction or pseudo-instruction
    ; ...                   comment (also trailing)
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .isa import (
    BRANCHES,
    CSR_NAMES,
    CSR_OPS,
    MNEMONICS,
    NOP,
    R_TYPE,
    Instruction,
    parse_register,
)

FLAG_REG = 31
SCRATCH_REG = 28
RA = 1
SP = 2

_NAME = r"[A-Za-z_][A-Za-z0-9_.]*"
_FUNC_RE = re.compile(rf"^func\s+({_NAME})\s*:$")
_LABEL_RE = re.compile(rf"^({_NAME})\s*:$")
_TARGETS_RE = re.compile(r"^#\s*targets\s*:\s*(.*)$")
_ENTRY_RE = re.compile(r"^#\s*entry\s*$")
_MEM_RE = re.compile(r"^(-?(?:0x[0-9a-fA-F]+|\d+))?\s*\(\s*(\w+)\s*\)$")


@dataclass(frozen=True)
class Diagnostic:
    line: int
    kind: str
    message: str

    def __str__(self) -> str:
        return f"line {self.line}: {self.kind}: {self.message}"


class AsmError(Exception):
    def __init__(self, diagnostics: Sequence[Diagnostic]):
        self.diagnostics = list(diagnostics)
        super().__init__("\n".join(str(d) for d in self.diagnostics))


@dataclass(frozen=True)
class SourceInstr:
    """An instruction plus whatever still needs resolving at layout time.

    ``reloc`` is one of ``None``, ``"pcrel"`` (branch/jump to a local label),
    ``"call"`` (direct call to function ``sym``), ``"hi"``/``"lo"`` (halves
    of an absolute address of ``sym``).
    """

    ins: Instruction
    line: int
    sym: Optional[str] = None
    reloc: Optional[str] = None
    targets: Optional[Tuple[str, ...]] = None

    @property
    def is_direct_call(self) -> bool:
        return self.reloc == "call"

    @property
    def is_indirect_call(self) -> bool:
        return self.ins.op == "jalr" and self.ins.rd != 0

    @property
    def is_return(self) -> bool:
        i = self.ins
        return i.op == "jalr" and i.rd == 0 and i.rs1 == RA and i.imm == 0


@dataclass
class Function:
    name: str
    line: int
    instrs: List[SourceInstr] = field(default_factory=list)
    # label -> index of the instruction it precedes
    labels: Dict[str, int] = field(default_factory=dict)


@dataclass
class SourceProgram:
    functions: List[Function]
    entry: str

    def function(self, name: str) -> Function:
        for f in self.functions:
            if f.name == name:
                return f
        raise KeyError(name)

    @property
    def names(self) -> List[str]:
        return [f.name for f in self.functions]

    def uses_register(self, reg: int) -> bool:
        for f in self.functions:
            for si in f.instrs:
                i = si.ins
                if reg in _written_or_read(i):
                    return True
        return False


def _written_or_read(i: Instruction) -> Tuple[int, ...]:
    op = i.op
    if op in R_TYPE or op in BRANCHES or op == "sw":
        return (i.rd, i.rs1, i.rs2) if op in R_TYPE else (i.rs1, i.rs2)
    if op in ("addi", "lw", "jalr", "csrrw", "csrrs"):
        return (i.rd, i.rs1)
    if op in ("lui", "auipc", "jal", "csrrwi"):
        return (i.rd,)
    return ()


def _parse_int(tok: str) -> int:
    tok = tok.strip()
    return int(tok, 0)


class _LineError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def _reg(tok: str) -> int:
    r = parse_register(tok)
    if r is None:
        raise _LineError("Syntax", f"bad register {tok!r}")
    return r


def _imm(tok: str) -> int:
    try:
        return _parse_int(tok)
    except ValueError:
        raise _LineError("Syntax", f"bad immediate {tok!r}") from None


def _mem(tok: str) -> Tuple[int, int]:
    m = _MEM_RE.match(tok.strip())
    if not m:
        raise _LineError("Syntax", f"bad memory operand {tok!r}")
    return (_parse_int(m.group(1)) if m.group(1) else 0), _reg(m.group(2))


def _csr(tok: str) -> int:
    tok = tok.strip().lower()
    if tok in CSR_NAMES:
        return CSR_NAMES[tok]
    try:
        value = int(tok, 0)
    except ValueError:
        raise _LineError("Syntax", f"unknown CSR {tok!r}") from None
    if value not in CSR_NAMES.values():
        raise _LineError("Syntax", f"unsupported CSR {value:#x}")
    return value


def _nargs(args: List[str], n: int, mnemonic: str) -> None:
    if len(args) != n:
        raise _LineError("Syntax", f"{mnemonic} expects {n} operands, got {len(args)}")


def _check_range(value: int, lo: int, hi: int, what: str) -> int:
    if not lo <= value <= hi:
        raise _LineError("ImmediateRange", f"{what} {value} outside [{lo}, {hi}]")
    return value


def split_hi_lo(value: int) -> Tuple[int, int]:
    """Split a 32-bit value into a ``lui`` field and a signed ``addi`` immediate."""
    value &= 0xFFFFFFFF
    lo = value & 0xFFF
    if lo >= 0x800:
        lo -= 0x1000
    hi = ((value - lo) >> 12) & 0xFFFFF
    return hi, lo


def _expand(mnemonic: str, args: List[str], line: int) -> List[SourceInstr]:
    """Translate one statement into source instructions (pseudo-ops expand here)."""
    m = mnemonic
    S = lambda ins, **kw: SourceInstr(ins, line, **kw)  # noqa: E731

    if m == "nop":
        _nargs(args, 0, m)
        return [S(NOP)]
    if m == "ret":
        _nargs(args, 0, m)
        return [S(Instruction("jalr", rd=0, rs1=RA, imm=0))]
    if m == "mv":
        _nargs(args, 2, m)
        return [S(Instruction("addi", rd=_reg(args[0]), rs1=_reg(args[1])))]
    if m == "li":
        _nargs(args, 2, m)
        rd, value = _reg(args[0]), _imm(args[1])
        _check_range(value, -(1 << 31), (1 << 32) - 1, "li value")
        if -2048 <= value < 2048:
            return [S(Instruction("addi", rd=rd, rs1=0, imm=value))]
        hi, lo = split_hi_lo(value)
        out = [S(Instruction("lui", rd=rd, imm=hi))]
        if lo:
            out.append(S(Instruction("addi", rd=rd, rs1=rd, imm=lo)))
        return out
    if m == "la":
        _nargs(args, 2, m)
        rd, sym = _reg(args[0]), args[1].strip()
        return [
            S(Instruction("lui", rd=rd), sym=sym, reloc="hi"),
            S(Instruction("addi", rd=rd, rs1=rd), sym=sym, reloc="lo"),
        ]
    if m == "j":
        _nargs(args, 1, m)
        return [S(Instruction("jal", rd=0), sym=args[0].strip(), reloc="pcrel")]
    if m == "call":
        _nargs(args, 1, m)
        return [S(Instruction("jal", rd=RA), sym=args[0].strip(), reloc="call")]
    if m in ("beqz", "bnez"):
        _nargs(args, 2, m)
        op = "beq" if m == "beqz" else "bne"
        return [S(Instruction(op, rs1=_reg(args[0]), rs2=0), sym=args[1].strip(), reloc="pcrel")]
    if m == "csrr":
        _nargs(args, 2, m)
        return [S(Instruction("csrrs", rd=_reg(args[0]), rs1=0, csr=_csr(args[1])))]
    if m == "csrw":
        _nargs(args, 2, m)
        return [S(Instruction("csrrw", rd=0, rs1=_reg(args[1]), csr=_csr(args[0])))]
    if m == "csrwi":
        _nargs(args, 2, m)
        return [S(Instruction("csrrwi", rd=0, imm=_check_range(_imm(args[1]), 0, 31, "zimm"), csr=_csr(args[0])))]

    if m not in MNEMONICS:
        raise _LineError("UnknownMnemonic", f"unknown mnemonic {m!r}")
    if m in R_TYPE:
        _nargs(args, 3, m)
        return [S(Instruction(m, rd=_reg(args[0]), rs1=_reg(args[1]), rs2=_reg(args[2])))]
    if m == "addi":
        _nargs(args, 3, m)
        imm = _check_range(_imm(args[2]), -2048, 2047, "addi immediate")
        return [S(Instruction(m, rd=_reg(args[0]), rs1=_reg(args[1]), imm=imm))]
    if m in ("lw", "jalr"):
        _nargs(args, 2, m)
        off, base = _mem(args[1])
        _check_range(off, -2048, 2047, f"{m} offset")
        return [S(Instruction(m, rd=_reg(args[0]), rs1=base, imm=off))]
    if m == "sw":
        _nargs(args, 2, m)
        off, base = _mem(args[1])
        _check_range(off, -2048, 2047, "sw offset")
        return [S(Instruction(m, rs2=_reg(args[0]), rs1=base, imm=off))]
    if m in BRANCHES:
        _nargs(args, 3, m)
        return [S(Instruction(m, rs1=_reg(args[0]), rs2=_reg(args[1])), sym=args[2].strip(), reloc="pcrel")]
    if m in ("lui", "auipc"):
        _nargs(args, 2, m)
        return [S(Instruction(m, rd=_reg(args[0]), imm=_check_range(_imm(args[1]), 0, 0xFFFFF, f"{m} immediate")))]
    if m == "jal":
        if len(args) == 1:
            args = ["ra"] + args
        _nargs(args, 2, m)
        rd, sym = _reg(args[0]), args[1].strip()
        # resolved to "call" vs "pcrel" once all function names are known
        return [S(Instruction(m, rd=rd), sym=sym, reloc="jal")]
    if m == "ecall":
        _nargs(args, 0, m)
        return [S(Instruction(m))]
    if m in CSR_OPS:
        _nargs(args, 3, m)
        if m == "csrrwi":
            return [S(Instruction(m, rd=_reg(args[0]), csr=_csr(args[1]), imm=_check_range(_imm(args[2]), 0, 31, "zimm")))]
        return [S(Instruction(m, rd=_reg(args[0]), csr=_csr(args[1]), rs1=_reg(args[2])))]
    raise _LineError("UnknownMnemonic", f"unknown mnemonic {m!r}")  # pragma: no cover


def _split_operands(rest: str) -> List[str]:
    rest = rest.strip()
    return [a.strip() for a in rest.split(",")] if rest else []


def assemble(text: str) -> SourceProgram:
    """Parse mini-assembly into a resolved program; raises :class:`AsmError`."""
    diags: List[Diagnostic] = []
    functions: List[Function] = []
    current: Optional[Function] = None
    entry: Optional[str] = None
    entry_pending: Optional[int] = None
    targets_pending: Optional[Tuple[Tuple[str, ...], int]] = None
    pending_labels: List[Tuple[str, int]] = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("#"):
            if _ENTRY_RE.match(line):
                if entry is not None or entry_pending is not None:
                    diags.append(Diagnostic(lineno, "DuplicateEntry", "more than one '# entry' annotation"))
                entry_pending = lineno
            elif (m := _TARGETS_RE.match(line)) is not None:
                names = tuple(n.strip() for n in m.group(1).split(",") if n.strip())
                if not names:
                    diags.append(Diagnostic(lineno, "MissingTargetSet", "empty target set"))
                targets_pending = (names, lineno)
            continue
        if (m := _FUNC_RE.match(line)) is not None:
            name = m.group(1)
            if current is not None:
                _close_function(current, pending_labels, diags)
            pending_labels = []
            if any(f.name == name for f in functions):
                diags.append(Diagnostic(lineno, "DuplicateFunction", f"function {name!r} defined twice"))
            current = Function(name, lineno)
            functions.append(current)
            if entry_pending is not None:
                entry, entry_pending = name, None
            continue
        if current is None:
            diags.append(Diagnostic(lineno, "Syntax", "statement outside of a function"))
            continue
        if (m := _LABEL_RE.match(line)) is not None:
            label = m.group(1)
            if label in current.labels or any(label == p for p, _ in pending_labels):
                diags.append(Diagnostic(lineno, "DuplicateLabel", f"label {label!r} defined twice in {current.name}"))
            pending_labels.append((label, lineno))
            continue
        mnemonic, _, rest = line.partition(" ")
        mnemonic = mnemonic.lower()
        try:
            expanded = _expand(mnemonic, _split_operands(rest), lineno)
        except _LineError as e:
            diags.append(Diagnostic(lineno, e.kind, str(e)))
            targets_pending = None
            continue
        for label, _ in pending_labels:
            current.labels[label] = len(current.instrs)
        pending_labels = []
        for k, si in enumerate(expanded):
            if k == 0 and si.is_indirect_call:
                if targets_pending is None:
                    diags.append(Diagnostic(lineno, "MissingTargetSet", "indirect call without a '# targets:' annotation"))
                else:
                    si = SourceInstr(si.ins, si.line, targets=targets_pending[0])
            current.instrs.append(si)
        if targets_pending is not None and not expanded[0].is_indirect_call:
            diags.append(Diagnostic(targets_pending[1], "Syntax", "'# targets:' must precede an indirect call"))
        targets_pending = None

    if current is not None:
        _close_function(current, pending_labels, diags)
    if entry_pending is not None:
        diags.append(Diagnostic(entry_pending, "MissingEntry", "'# entry' is not followed by a function"))
    if entry is None and entry_pending is None:
        if any(f.name == "main" for f in functions):
            entry = "main"
        else:
            diags.append(Diagnostic(0, "MissingEntry", "no '# entry' annotation and no function named main"))

    _resolve(functions, diags)
    if diags:
        raise AsmError(sorted(diags, key=lambda d: d.line))
    assert entry is not None
    return SourceProgram(functions, entry)


def _close_function(f: Function, pending: List[Tuple[str, int]], diags: List[Diagnostic]) -> None:
    for label, lineno in pending:
        diags.append(Diagnostic(lineno, "UnresolvedLabel", f"label {label!r} at end of {f.name} labels no instruction"))


def _resolve(functions: List[Function], diags: List[Diagnostic]) -> None:
    names = {f.name for f in functions}
    for f in functions:
        for k, si in enumerate(f.instrs):
            i = si.ins
            if FLAG_REG in _written_or_read(i):
                diags.append(Diagnostic(si.line, "ReservedRegister", f"x{FLAG_REG} is reserved for the return-path flag"))
            if si.reloc == "jal":
                if si.sym in names:
                    if i.rd != RA:
                        diags.append(Diagnostic(si.line, "Unsupported", "jump to a function must link through ra"))
                        continue
                    f.instrs[k] = SourceInstr(i, si.line, sym=si.sym, reloc="call")
                elif si.sym in f.labels:
                    if i.rd != 0:
                        diags.append(Diagnostic(si.line, "Unsupported", "linking jump to a local label"))
                        continue
                    f.instrs[k] = SourceInstr(i, si.line, sym=si.sym, reloc="pcrel")
                else:
                    diags.append(Diagnostic(si.line, "UnresolvedLabel", f"unknown jump target {si.sym!r}"))
            elif si.reloc == "call":
                if si.sym not in names:
                    diags.append(Diagnostic(si.line, "UnresolvedLabel", f"call to unknown function {si.sym!r}"))
            elif si.reloc == "pcrel":
                if si.sym not in f.labels:
                    diags.append(Diagnostic(si.line, "UnresolvedLabel", f"unknown label {si.sym!r} in {f.name}"))
            elif si.reloc in ("hi", "lo"):
                if si.sym not in names and si.sym not in f.labels:
                    diags.append(Diagnostic(si.line, "UnresolvedLabel", f"unknown symbol {si.sym!r}"))
            if i.op == "jalr" and i.rd == 0 and not si.is_return:
                diags.append(Diagnostic(si.line, "Unsupported", "indirect jumps other than 'ret' are not supported"))
