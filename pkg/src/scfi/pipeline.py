"""assemble -> call graph -> tweaks -> instrument -> layout -> scramble, in one call."""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import List, Optional

from .asm import SourceProgram, assemble
from .cfg import CallGraph, TweakAssignment, assign_tweaks, build_call_graph
from .instrument import InstrumentedProgram, MemoryImage, MetadataFile, instrument, layout, plain
from .prince import PrinceKey, RoundConfig, ScrambleParams
from .scramble import FlashImage, build_flash
from .sim import Machine, RunResult, reset, reset_plain

DEFAULT_KEY = PrinceKey(0x0011223344556677, 0x8899AABBCCDDEEFF)
DEFAULT_BASE = 0x2000
DEFAULT_RANGE = (0x2000, 0x7FFF)
DEFAULT_MAX_CYCLES = 1_000_000


def default_params(key: PrinceKey = DEFAULT_KEY, rounds: RoundConfig = RoundConfig.REDUCED5) -> ScrambleParams:
    return ScrambleParams(key, DEFAULT_RANGE[0], DEFAULT_RANGE[1], rounds)


@dataclass
class Build:
    source: SourceProgram
    graph: CallGraph
    tweaks: TweakAssignment
    program: InstrumentedProgram
    image: MemoryImage
    meta: MetadataFile
    flash: FlashImage

    def machine(self, trace: bool = False) -> Machine:
        return reset(self.flash, self.flash.params, self.image.entry, self.image.entry_tweak, trace=trace)

    def run(self, max_cycles: int = DEFAULT_MAX_CYCLES, trace: bool = False) -> RunResult:
        return self.machine(trace).run(max_cycles)


def build(source: SourceProgram, seed: int = 0, params: Optional[ScrambleParams] = None, base: int = DEFAULT_BASE) -> Build:
    params = params or default_params()
    g = build_call_graph(source)
    t = assign_tweaks(g, seed)
    ip = instrument(source, t)
    image, meta = layout(ip, base)
    return Build(source, g, t, ip, image, meta, build_flash(image.words, meta, params))


def build_text(text: str, seed: int = 0, params: Optional[ScrambleParams] = None, base: int = DEFAULT_BASE) -> Build:
    return build(assemble(text), seed, params, base)


@dataclass
class PlainBuild:
    program: InstrumentedProgram
    image: MemoryImage

    def machine(self, trace: bool = False) -> Machine:
        return reset_plain(self.image.words, self.image.entry, trace=trace)

    def run(self, max_cycles: int = DEFAULT_MAX_CYCLES, trace: bool = False) -> RunResult:
        return self.machine(trace).run(max_cycles)


def build_plain(source: SourceProgram, base: int = DEFAULT_BASE) -> PlainBuild:
    """The uninstrumented program, run without scrambling."""
    ip = plain(source)
    image, _ = layout(ip, base)
    return PlainBuild(ip, image)


def bundled_programs() -> List[Path]:
    """Every bundled ``.s`` file, demos first, then the benchmark suite."""
    root = Path(str(resources.files("scfi") / "programs"))
    return sorted(root.glob("*.s")) + sorted((root / "bench").glob("*.s"))


def bench_dir() -> Path:
    return Path(str(resources.files("scfi") / "programs" / "bench"))
