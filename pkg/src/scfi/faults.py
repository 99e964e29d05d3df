"""Fault injection and outcome classification for scrambled binaries.

A trial resets a fresh machine, runs it fault-free up to a trigger point,
applies one (or two) faults, runs to completion and classifies the result
against the fault-free baseline.

Surfaces: AR registers/PC, AIC instruction cache, AB instruction or data bus,
AM flash or data memory, AC core pipeline (post-decode).
Targets: DT1.1 relative branch offsets, DT1.2a absolute addresses in data,
DT1.2b return addresses, DT1.3 the PC, DT2 general data, DT3 instruction words.
"""

from __future__ import annotations

import enum
import hashlib
import json
import random
import statistics
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from ._toml import TOMLDecodeError, loads as toml_loads

from .instrument import GRANULE, FunctionLayout, MemoryImage, MetadataFile
from .isa import NOP, encode, illegal_density
from .prince import PrinceKey, RoundConfig, ScrambleParams, decrypt, encrypt
from .scramble import FlashImage, descramble_word
from .sim import DMEM_BASE, ERASED, STACK_TOP, Machine, RunResult, Termination

SURFACES = ("AR", "AIC", "AB", "AM", "AC")
TARGETS = ("DT1.1", "DT1.2a", "DT1.2b", "DT1.3", "DT2", "DT3")

FEASIBLE = {
    "DT1.1": frozenset({"AM", "AIC", "AB"}),
    "DT1.2a": frozenset({"AR", "AM", "AB"}),
    "DT1.2b": frozenset({"AR", "AM", "AB"}),
    "DT1.3": frozenset({"AR", "AC"}),
    "DT2": frozenset({"AR", "AM", "AB"}),
    "DT3": frozenset({"AM", "AIC", "AB", "AC"}),
}

CODE_TARGETS = frozenset({"DT1.1", "DT3"})
DEFAULT_G = 4
NOP_WORD = encode(NOP)


class FaultError(ValueError):
    pass


class UnreachableTrigger(FaultError):
    pass


class OutcomeClass(str, enum.Enum):
    DETECTED_ILLEGAL = "DETECTED_ILLEGAL"
    DETECTED_FAULT = "DETECTED_FAULT"
    BENIGN = "BENIGN"
    SILENT_CFM = "SILENT_CFM"
    HANG = "HANG"
    # undetected wrong result without reaching the goal
    SILENT_CORRUPTION = "SILENT_CORRUPTION"


DETECTED = (OutcomeClass.DETECTED_ILLEGAL, OutcomeClass.DETECTED_FAULT)


@dataclass(frozen=True)
class Trigger:
    cycle: Optional[int] = None
    pc: Optional[int] = None

    def __post_init__(self):
        if (self.cycle is None) == (self.pc is None):
            raise FaultError("a trigger needs exactly one of cycle or pc")

    def hit(self, m: Machine) -> bool:
        if self.cycle is not None:
            return m.retired == self.cycle
        return m.pc == self.pc


@dataclass(frozen=True)
class FaultSpec:
    surface: str
    target: str
    trigger: Trigger
    bits: Tuple[int, ...] = ()
    write: Optional[int] = None
    register: Optional[int] = None
    address: Optional[int] = None

    def __post_init__(self):
        if self.surface not in SURFACES:
            raise FaultError(f"unknown surface {self.surface!r}")
        if self.target not in TARGETS:
            raise FaultError(f"unknown data target {self.target!r}")
        if self.surface not in FEASIBLE[self.target]:
            raise FaultError(f"{self.target} cannot be reached through {self.surface}")
        if (self.write is None) == (not self.bits):
            raise FaultError("give either bit indices or a direct-write value")
        if self.write is not None and self.surface != "AR":
            raise FaultError("direct writes are only modelled for AR")
        if len(set(self.bits)) != len(self.bits) or any(not 0 <= b < self.width for b in self.bits):
            raise FaultError(f"bit indices must be distinct and below {self.width}")
        if self.surface == "AR" and self.target in ("DT1.2a", "DT2") and self.register is None:
            raise FaultError("AR faults on data need a register")
        if self.register is not None and not 0 <= self.register < 32:
            raise FaultError(f"no register x{self.register}")
        if self.surface == "AM" and self.address is None:
            raise FaultError("AM faults need an address")

    @property
    def width(self) -> int:
        if self.surface in ("AM", "AIC") and self.target in CODE_TARGETS:
            return 64
        return 32

    @property
    def mask(self) -> int:
        out = 0
        for b in self.bits:
            out |= 1 << b
        return out


def inject(m: Machine, f: FaultSpec) -> Machine:
    """Apply ``f`` to the machine right now (the caller handles the trigger)."""
    mask = f.mask
    if f.surface == "AR":
        if f.target == "DT1.3":
            m.pc = f.write if f.write is not None else m.pc ^ mask
        else:
            reg = f.register if f.register is not None else 1
            if reg:
                m.x[reg] = f.write & 0xFFFFFFFF if f.write is not None else m.x[reg] ^ mask
    elif f.surface == "AM":
        if f.target in CODE_TARGETS:
            g = f.address & ~(GRANULE - 1)
            m.flash[g] = m.flash.get(g, ERASED) ^ mask
        else:
            word = m.load_word(f.address)
            if word is None or not m.store_word(f.address, word ^ mask):
                raise FaultError(f"no data memory at {f.address:#x}")
    elif f.surface == "AIC":
        g = (f.address if f.address is not None else m.pc) & ~(GRANULE - 1)
        if g not in m.icache:
            m.icache[g] = (m.read_flash(g, m.csr_tweak), m.csr_tweak)
        block, tweak = m.icache[g]
        m.icache[g] = (block ^ mask, tweak)
    elif f.surface == "AB":
        if f.target in CODE_TARGETS:
            m.insn_mask = mask
        else:
            m.load_mask = mask
    else:
        if f.target == "DT1.3":
            m.next_pc_mask = mask
        else:
            m.insn_mask = mask
    return m


@dataclass(frozen=True)
class Goal:
    """The attacker wants to execute code in ``[lo, hi)`` inside ``function``."""

    function: str
    start: int
    lo: int
    hi: int

    def contains(self, pc: int) -> bool:
        return self.lo <= pc < self.hi


@dataclass(frozen=True)
class Outcome:
    cls: OutcomeClass
    detection_latency: Optional[int] = None
    goal_reached: Optional[Tuple[str, int]] = None
    goal_steps: Optional[int] = None


_TRAPS_AFTER_TRACE = (Termination.ILLEGAL, Termination.MEMORY_FAULT)


def _retired_in(trace, termination: Termination) -> int:
    n = len(trace)
    return n - 1 if termination in _TRAPS_AFTER_TRACE and n else n


def _decide(termination: Termination, exit_value: int, latency: int, steps: Optional[int], baseline: RunResult, g: int) -> OutcomeClass:
    if steps is not None and steps >= g:
        return OutcomeClass.SILENT_CFM
    if termination == Termination.ILLEGAL:
        return OutcomeClass.DETECTED_ILLEGAL
    if termination in (Termination.FETCH_FAULT, Termination.MEMORY_FAULT):
        return OutcomeClass.DETECTED_FAULT
    if termination == Termination.CYCLE_LIMIT:
        return OutcomeClass.HANG
    if termination == baseline.termination and exit_value == baseline.exit_value:
        return OutcomeClass.BENIGN
    return OutcomeClass.SILENT_CORRUPTION


def classify(r: RunResult, baseline: RunResult, goal: Optional[Goal] = None, g: int = DEFAULT_G) -> Outcome:
    """Classify a faulted run; ``r.trace`` must hold the post-injection trace."""
    if r.trace is None:
        raise FaultError("classification needs the post-injection trace")
    trace = r.trace
    latency = _retired_in(trace, r.termination)
    steps = None
    reached = None
    if goal is not None:
        for i, e in enumerate(trace):
            if goal.contains(e.pc):
                steps = _retired_in(trace[i:], r.termination)
                reached = (goal.function, e.pc - goal.start)
                break
    cls = _decide(r.termination, r.exit_value, latency, steps, baseline, g)
    return Outcome(
        cls,
        latency if cls in DETECTED else None,
        reached if cls == OutcomeClass.SILENT_CFM else None,
        steps,
    )


# binaries ------------------------------------------------------------------


@dataclass
class Bundle:
    """A scrambled binary plus everything needed to boot and inspect it."""

    flash: FlashImage
    meta: MetadataFile
    functions: Dict[str, FunctionLayout]
    entry: int
    entry_tweak: int
    plaintext: Dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        self.tweaks = self.meta.tweak_map()
        if not self.plaintext:
            self.plaintext = {
                a: descramble_word(self.flash, a, self.tweaks.get(a, 0)) for a in self.flash.words
            }

    @classmethod
    def from_parts(cls, flash: FlashImage, meta: MetadataFile, layout_json: Optional[str] = None,
                   entry: Optional[int] = None, entry_tweak: Optional[int] = None) -> "Bundle":
        """Without a layout sidecar, a function's body tweak is taken to be its most frequent block tweak."""
        if layout_json is not None:
            e, et, funcs = MemoryImage.functions_from_json(layout_json)
        else:
            funcs = {}
            for fr in meta.functions:
                body = Counter(t for _, t in fr.blocks).most_common(1)[0][0] if fr.blocks else 0
                funcs[fr.name] = FunctionLayout(fr.name, fr.start, fr.start, GRANULE * len(fr.blocks), body)
            e, et = None, None
        entry = e if entry is None else entry
        entry_tweak = et if entry_tweak is None else entry_tweak
        if entry is None or entry_tweak is None:
            raise FaultError("entry address and tweak are required when no layout is given")
        return cls(flash, meta, funcs, entry, entry_tweak)

    def machine(self, configuration: str = "protected") -> Machine:
        if configuration == "protected":
            return Machine(self.flash.words, self.flash.params, self.entry, self.entry_tweak)
        if configuration == "nocfi":
            return Machine(self.plaintext, self.flash.params, self.entry, self.entry_tweak, descramble=False)
        raise FaultError(f"unknown configuration {configuration!r}")

    def function_at(self, addr: int) -> Optional[FunctionLayout]:
        for f in self.functions.values():
            if f.start <= addr < f.end:
                return f
        return None

    def body_granules(self, name: str) -> List[int]:
        f = self.functions[name]
        return [g for g in range(f.start, f.end, GRANULE) if self.tweaks.get(g) == f.body_tweak]

    def landing_sites(self, name: str, exclude_granule: Optional[int] = None) -> List[int]:
        """Word addresses in body-domain granules, minus the trailing pad nop."""
        f = self.functions[name]
        out = []
        for g in self.body_granules(name):
            if g == exclude_granule:
                continue
            out.append(g)
            if not (g + 4 == f.end - 4 and (self.plaintext.get(g, 0) >> 32) == NOP_WORD):
                out.append(g + 4)
        return out

    def code_granules(self) -> List[int]:
        return sorted(self.tweaks)


def baseline_run(b: Bundle, configuration: str, max_cycles: int) -> RunResult:
    m = b.machine(configuration)
    m.trace = []
    return m.run(max_cycles)


@dataclass(frozen=True)
class TrialRecord:
    termination: Termination
    exit_value: int
    latency: int
    goal_steps: Optional[int]
    active_tweak: Optional[int] = None
    landing_tweak: Optional[int] = None
    cross_function: bool = False
    discarded: bool = False

    def outcome(self, baseline: RunResult, g: int) -> OutcomeClass:
        return _decide(self.termination, self.exit_value, self.latency, self.goal_steps, baseline, g)


def run_trial(b: Bundle, specs: Sequence[FaultSpec], configuration: str, max_cycles: int,
              goal: Optional[Goal] = None) -> Tuple[RunResult, int]:
    """Boot, inject each fault at its trigger, run out; returns the result and
    the tweak that was active at the first injection."""
    m = b.machine(configuration)
    active = None
    for spec in sorted(specs, key=lambda s: (s.trigger.cycle is None, s.trigger.cycle or 0)):
        while not m.halted and m.retired < max_cycles and not spec.trigger.hit(m):
            m.step()
        if m.halted or not spec.trigger.hit(m):
            raise UnreachableTrigger(f"trigger {spec.trigger} not reached")
        if active is None:
            active = m.csr_tweak
            m.trace = []
        inject(m, spec)
    return m.run(max_cycles), active


# campaigns -----------------------------------------------------------------

CELL_KINDS = ("flip", "redirect-cfm1", "redirect-cfm3")


@dataclass(frozen=True)
class CellConfig:
    name: str
    surface: str = "AR"
    target: str = "DT1.3"
    kind: str = "flip"
    trials: int = 100
    bits: int = 1
    faults: int = 1
    configuration: str = "protected"
    goal: Optional[str] = None
    register: Optional[int] = None

    def __post_init__(self):
        if self.kind not in CELL_KINDS:
            raise FaultError(f"cell {self.name}: unknown kind {self.kind!r}")
        if self.trials < 1:
            raise FaultError(f"cell {self.name}: trial count must be at least 1")
        if self.faults not in (1, 2):
            raise FaultError(f"cell {self.name}: only single and double faults are supported")
        if self.kind != "flip" and (self.surface, self.target) != ("AR", "DT1.3"):
            raise FaultError(f"cell {self.name}: redirections are AR/DT1.3 PC writes")
        if self.surface not in FEASIBLE.get(self.target, ()):
            raise FaultError(f"cell {self.name}: {self.target} cannot be reached through {self.surface}")


@dataclass(frozen=True)
class CampaignConfig:
    seed: int = 0
    g: int = DEFAULT_G
    max_cycles: int = 100_000
    density_samples: int = 100_000
    cells: Tuple[CellConfig, ...] = ()

    def digest(self) -> str:
        doc = {
            "seed": self.seed,
            "g": self.g,
            "max_cycles": self.max_cycles,
            "density_samples": self.density_samples,
            "cells": [vars(c) for c in self.cells],
        }
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def parse_campaign(text: str) -> CampaignConfig:
    """Campaign file (TOML): top-level seed/g/max_cycles, one ``[[cells]]`` table per cell."""
    try:
        doc = toml_loads(text)
    except TOMLDecodeError as e:
        raise FaultError(f"campaign config: {e}") from None
    known = {"seed", "g", "max_cycles", "density_samples", "cells"}
    extra = set(doc) - known
    if extra:
        raise FaultError(f"campaign config: unknown keys {sorted(extra)}")
    fields = set(CellConfig.__dataclass_fields__)
    cells = []
    for i, c in enumerate(doc.get("cells", [])):
        bad = set(c) - fields
        if bad:
            raise FaultError(f"campaign cell {i}: unknown keys {sorted(bad)}")
        if "name" not in c:
            raise FaultError(f"campaign cell {i}: missing name")
        cells.append(CellConfig(**c))
    top = {k: v for k, v in doc.items() if k != "cells"}
    cfg = CampaignConfig(cells=tuple(cells), **top)
    if cfg.g < 1:
        raise FaultError("g must be at least 1")
    return cfg


def trial_rng(seed: int, cell: int, trial: int) -> random.Random:
    h = hashlib.sha256(f"{seed}:{cell}:{trial}".encode()).digest()
    return random.Random(int.from_bytes(h[:8], "little"))


@dataclass
class _Plan:
    """Per-cell precomputation shared by all trials."""

    baseline: RunResult
    candidates: List[int]
    stack_lo: int


def _plan(b: Bundle, cell: CellConfig, max_cycles: int) -> _Plan:
    base = baseline_run(b, cell.configuration, max_cycles)
    trace = base.trace or []
    candidates: List[int] = []
    if cell.kind != "flip":
        for k, e in enumerate(trace):
            f = b.function_at(e.pc)
            if f is None or b.tweaks.get(e.pc & ~7) != f.body_tweak:
                continue
            if cell.kind == "redirect-cfm1":
                if any(o != f.name and b.landing_sites(o) for o in b.functions):
                    candidates.append(k)
            elif b.landing_sites(f.name, exclude_granule=e.pc & ~7):
                candidates.append(k)
        if not candidates:
            raise FaultError(f"cell {cell.name}: no trigger point suits a {cell.kind} redirection")
    return _Plan(base, candidates, STACK_TOP - 0x100)


def _goal_for(b: Bundle, spec: Optional[str]) -> Optional[Goal]:
    if not spec or spec == "none":
        return None
    if spec.startswith("function:"):
        name = spec.split(":", 1)[1]
        if name not in b.functions:
            raise FaultError(f"goal names unknown function {name!r}")
        f = b.functions[name]
        return Goal(name, f.start, f.start, f.end)
    raise FaultError(f"unknown goal {spec!r}")


def _flip_spec(b: Bundle, cell: CellConfig, rng: random.Random, plan: _Plan, cycle: int) -> FaultSpec:
    probe = FaultSpec(cell.surface, cell.target, Trigger(cycle=0), bits=(0,),
                      register=cell.register if cell.register is not None else 1,
                      address=0 if cell.surface == "AM" else None)
    bits = tuple(sorted(rng.sample(range(probe.width), cell.bits)))
    register = cell.register
    address = None
    if cell.surface == "AR":
        if cell.target == "DT1.2b":
            register = 1 if register is None else register
        elif cell.target != "DT1.3" and register is None:
            register = rng.randrange(1, 32)
    elif cell.surface == "AM":
        if cell.target in CODE_TARGETS:
            address = rng.choice(b.code_granules())
        elif cell.target == "DT2":
            address = DMEM_BASE + 4 * rng.randrange(64)
        else:
            address = plan.stack_lo + 4 * rng.randrange((STACK_TOP - plan.stack_lo) // 4)
    return FaultSpec(cell.surface, cell.target, Trigger(cycle=cycle), bits=bits, register=register, address=address)


def _one_trial(b: Bundle, cell: CellConfig, plan: _Plan, rng: random.Random, max_cycles: int) -> TrialRecord:
    goal = _goal_for(b, cell.goal)
    landing_tweak = None
    cross = False
    if cell.kind == "flip":
        horizon = max(plan.baseline.retired, 1)
        cycles = sorted(rng.sample(range(horizon), min(cell.faults, horizon)))
        specs = [_flip_spec(b, cell, rng, plan, c) for c in cycles]
    else:
        k = rng.choice(plan.candidates)
        pc = plan.baseline.trace[k].pc
        here = b.function_at(pc)
        if cell.kind == "redirect-cfm1":
            others = [n for n in b.functions if n != here.name and b.landing_sites(n)]
            dest = rng.choice(others)
            sites = b.landing_sites(dest)
            cross = True
        else:
            dest = here.name
            sites = b.landing_sites(dest, exclude_granule=pc & ~7)
        landing = rng.choice(sites)
        landing_tweak = b.tweaks[landing & ~7]
        f = b.functions[dest]
        if cell.kind == "redirect-cfm1":
            goal = Goal(dest, f.start, f.start, f.end)
        else:
            goal = Goal(dest, f.start, landing, landing + 4)
        specs = [FaultSpec("AR", "DT1.3", Trigger(cycle=k), write=landing)]
    try:
        r, active = run_trial(b, specs, cell.configuration, max_cycles, goal)
    except UnreachableTrigger:
        return TrialRecord(Termination.CYCLE_LIMIT, 0, 0, None, discarded=True)
    out = classify(r, plan.baseline, goal, g=1)
    latency = _retired_in(r.trace, r.termination)
    return TrialRecord(r.termination, r.exit_value, latency, out.goal_steps, active, landing_tweak, cross)


def _cell_chunk(args) -> List[TrialRecord]:
    b, cell, index, plan, seed, start, stop, max_cycles = args
    return [_one_trial(b, cell, plan, trial_rng(seed, index, t), max_cycles) for t in range(start, stop)]


def predicted_detection(density: float, g: int) -> float:
    """Chance that a garbled instruction stream traps within its first ``g`` instructions."""
    return 1.0 - (1.0 - density) ** g


def aggregate(cell: CellConfig, records: Sequence[TrialRecord], baseline: RunResult, g: int) -> dict:
    kept = [r for r in records if not r.discarded]
    hist = Counter(r.outcome(baseline, g) for r in kept)
    detected = [r for r in kept if r.outcome(baseline, g) in DETECTED]
    n = len(kept)
    out = {
        "name": cell.name,
        "surface": cell.surface,
        "target": cell.target,
        "kind": cell.kind,
        "configuration": cell.configuration,
        "goal": cell.goal or ("CFM1" if cell.kind == "redirect-cfm1" else "CFM3" if cell.kind == "redirect-cfm3" else "none"),
        "trials": n,
        "discarded": len(records) - n,
        "histogram": {c.value: hist.get(c, 0) for c in OutcomeClass},
        "detection_rate": len(detected) / n if n else 0.0,
        "silent_cfm_rate": hist.get(OutcomeClass.SILENT_CFM, 0) / n if n else 0.0,
        "mean_detection_latency": statistics.fmean(r.latency for r in detected) if detected else None,
    }
    if cell.kind == "redirect-cfm1":
        cross = [r for r in kept if r.cross_function]
        out["wrong_tweak"] = {
            "redirections": len(cross),
            "mismatches": sum(r.active_tweak != r.landing_tweak for r in cross),
        }
    return out


def run_cell(b: Bundle, cfg: CampaignConfig, index: int, workers: int = 1, chunk: int = 100) -> Tuple[List[TrialRecord], RunResult]:
    cell = cfg.cells[index]
    plan = _plan(b, cell, cfg.max_cycles)
    tasks = [(b, cell, index, plan, cfg.seed, s, min(s + chunk, cell.trials), cfg.max_cycles)
             for s in range(0, cell.trials, chunk)]
    records: List[TrialRecord] = []
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for part in pool.map(_cell_chunk, tasks):
                records.extend(part)
    else:
        for t in tasks:
            records.extend(_cell_chunk(t))
    return records, plan.baseline


def campaign(b: Bundle, cfg: CampaignConfig, workers: int = 1) -> dict:
    """Run every cell and return the JSON-ready report."""
    density = illegal_density(cfg.density_samples, cfg.seed)
    cells = []
    for i, cell in enumerate(cfg.cells):
        records, baseline = run_cell(b, cfg, i, workers)
        row = aggregate(cell, records, baseline, cfg.g)
        if cell.kind == "redirect-cfm1" and cell.configuration == "protected":
            row["predicted_detection_rate"] = predicted_detection(density, cfg.g)
        cells.append(row)
    return {
        "seed": cfg.seed,
        "g": cfg.g,
        "config_digest": cfg.digest(),
        "illegal_density": density,
        "timing_model": "1 cycle per retired instruction",
        "cells": cells,
    }


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def format_table(report: dict) -> str:
    classes = [c.value for c in OutcomeClass]
    short = ["ILL", "FLT", "BEN", "CFM", "HANG", "CORR"]
    head = f"{'cell':<24} {'surf':<4} {'target':<7} {'cfg':<9} {'n':>6} " + " ".join(f"{s:>6}" for s in short) + f" {'det%':>7} {'lat':>6}"
    lines = [head, "-" * len(head)]
    for c in report["cells"]:
        lat = c["mean_detection_latency"]
        lines.append(
            f"{c['name']:<24} {c['surface']:<4} {c['target']:<7} {c['configuration']:<9} {c['trials']:>6} "
            + " ".join(f"{c['histogram'][k]:>6}" for k in classes)
            + f" {100 * c['detection_rate']:>7.2f} {('-' if lat is None else f'{lat:.2f}'):>6}"
        )
    return "\n".join(lines) + "\n"


def ciphertext_flip_diffusion(samples: int, rounds: RoundConfig, seed: int) -> float:
    """Mean number of plaintext bits changed by flipping one random ciphertext bit."""
    rng = random.Random(seed)
    total = 0
    for _ in range(samples):
        key = PrinceKey(rng.getrandbits(64), rng.getrandbits(64))
        c = encrypt(rng.getrandbits(64), key, rounds)
        p = decrypt(c, key, rounds)
        q = decrypt(c ^ (1 << rng.randrange(64)), key, rounds)
        total += bin(p ^ q).count("1")
    return total / samples
