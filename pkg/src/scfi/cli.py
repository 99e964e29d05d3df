"""``scfi`` command line: assemble, instrument, scramble, run, fault, bench and inspect.

File formats
------------
metadata   one ``FUNC <name> <start:%08x> <nblocks>`` line per function, followed
           by ``BLOCK <offset:%08x> <tweak:%05x>`` per 64-bit granule; LF endings.
VMEM       ``@<byte address / 8:%08x> <word:%016x>`` per 64-bit flash word,
           ascending; the lower-addressed instruction is the low half.
layout     JSON sidecar with entry address, entry tweak and per-function
           start/body/size/tweaks, written by ``instrument --layout``.
trace      JSON lines ``{"mnemonic", "pc", "tweak", "word"}``.

Errors are reported on stderr as one JSON object and exit with status 1.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from . import bench as bench_mod
from . import faults as faults_mod
from ._toml import TOMLDecodeError, loads as toml_loads
from .asm import AsmError, assemble
from .cfg import assign_tweaks, build_call_graph
from .instrument import MemoryImage, emit_metadata, instrument, layout, parse_metadata, plain
from .pipeline import DEFAULT_BASE, DEFAULT_KEY, DEFAULT_RANGE, bench_dir
from .prince import PrinceKey, RoundConfig, ScrambleParams, self_test
from .scramble import build_flash, emit_vmem, parse_vmem, parse_vmem_words
from .sim import Machine

DEFAULTS: Dict[str, Any] = {
    "seed": 0,
    "key": DEFAULT_KEY.hex(),
    "range": f"{DEFAULT_RANGE[0]:#x}:{DEFAULT_RANGE[1]:#x}",
    "rounds": RoundConfig.REDUCED5.value,
    "base": f"{DEFAULT_BASE:#x}",
    "max_cycles": 1_000_000,
    "workers": 1,
}
CONFIG_KEYS = frozenset(DEFAULTS) | {"entry", "tweak0"}


class CliError(Exception):
    def __init__(self, kind: str, message: str, **extra):
        super().__init__(message)
        self.kind = kind
        self.extra = extra


def _int(text: str) -> int:
    try:
        return int(str(text), 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None


def _hex(text: str) -> int:
    try:
        return int(str(text), 16)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a hex value: {text!r}") from None


class Settings:
    """Flag > config file > built-in default."""

    def __init__(self, args: argparse.Namespace, config: Dict[str, Any]):
        self.args = args
        self.config = config

    def get(self, name: str) -> Any:
        v = getattr(self.args, name, None)
        if v is not None:
            return v
        if name in self.config:
            return self.config[name]
        return DEFAULTS.get(name)

    def key(self) -> PrinceKey:
        try:
            return PrinceKey.from_hex(str(self.get("key")))
        except ValueError as e:
            raise CliError("BadKey", str(e)) from None

    def rounds(self) -> RoundConfig:
        try:
            return RoundConfig(self.get("rounds"))
        except ValueError:
            raise CliError("BadRounds", f"unknown round configuration {self.get('rounds')!r}") from None

    def params(self) -> ScrambleParams:
        text = str(self.get("range"))
        lo, sep, hi = text.partition(":")
        if not sep:
            raise CliError("BadRange", f"range must be LO:HI, got {text!r}")
        try:
            return ScrambleParams(self.key(), int(lo, 0), int(hi, 0), self.rounds())
        except ValueError as e:
            raise CliError("BadRange", str(e)) from None

    def int(self, name: str) -> Optional[int]:
        v = self.get(name)
        if v is None or isinstance(v, int):
            return v
        try:
            return int(str(v), 0)
        except ValueError:
            raise CliError("BadValue", f"{name} must be an integer, got {v!r}") from None


def _read(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as e:
        raise CliError("IOError", f"{path}: {e.strerror}") from None


def _write(path: Optional[str], text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    try:
        Path(path).write_text(text)
    except OSError as e:
        raise CliError("IOError", f"{path}: {e.strerror}") from None


def _assemble_file(path: str):
    try:
        return assemble(_read(path))
    except AsmError as e:
        raise CliError(
            "AsmError",
            f"{path}: {len(e.diagnostics)} error(s)",
            file=path,
            diagnostics=[{"line": d.line, "kind": d.kind, "message": d.message} for d in e.diagnostics],
        ) from None


# subcommands ----------------------------------------------------------------


def cmd_asm(a, s: Settings) -> int:
    src = _assemble_file(a.source)
    image, _ = layout(plain(src), s.int("base"))
    _write(a.output, emit_vmem(image.words))
    if a.layout:
        _write(a.layout, image.layout_json())
    return 0


def cmd_instrument(a, s: Settings) -> int:
    src = _assemble_file(a.source)
    t = assign_tweaks(build_call_graph(src), s.int("seed"))
    ip = instrument(src, t)
    image, meta = layout(ip, s.int("base"))
    _write(a.output, emit_vmem(image.words))
    _write(a.meta, emit_metadata(meta))
    if a.layout:
        _write(a.layout, image.layout_json())
    if a.listing:
        _write(a.listing, "".join(f"{pc:08x} {t:05x} {kind:<6} {ins}\n" for pc, ins, t, kind in image.listing))
    return 0


def cmd_scramble(a, s: Settings) -> int:
    words = parse_vmem_words(_read(a.image))
    meta = parse_metadata(_read(a.meta))
    _write(a.output, emit_vmem(build_flash(words, meta, s.params()).words))
    return 0


def _entry(a, s: Settings):
    entry, tweak = s.int("entry"), s.int("tweak0")
    if a.layout:
        e, t, _ = MemoryImage.functions_from_json(_read(a.layout))
        entry = e if entry is None else entry
        tweak = t if tweak is None else tweak
    if entry is None or tweak is None:
        raise CliError("MissingEntry", "give --entry and --tweak0, or --layout")
    return entry, tweak


def cmd_run(a, s: Settings) -> int:
    params = s.params()
    flash = parse_vmem(_read(a.vmem), params)
    if a.meta:
        parse_metadata(_read(a.meta))
    entry, tweak = _entry(a, s)
    m = Machine(flash.words, params, entry, tweak, descramble=not a.plain)
    if a.trace:
        m.trace = []
    r = m.run(s.int("max_cycles"))
    if a.trace:
        _write(a.trace, "".join(json.dumps(e.as_dict(), sort_keys=True) + "\n" for e in r.trace))
    out = {"termination": r.termination.value, "exit_value": r.exit_value, "cycles": r.cycles, "pc": r.pc}
    _write(a.output, json.dumps(out, sort_keys=True) + "\n")
    return 0


def cmd_fault(a, s: Settings) -> int:
    params = s.params()
    flash = parse_vmem(_read(a.vmem), params)
    meta = parse_metadata(_read(a.meta))
    cfg = faults_mod.parse_campaign(_read(a.campaign))
    layout_json = _read(a.layout) if a.layout else None
    bundle = faults_mod.Bundle.from_parts(flash, meta, layout_json, s.int("entry"), s.int("tweak0"))
    report = faults_mod.campaign(bundle, cfg, workers=s.int("workers"))
    _write(a.output, faults_mod.report_json(report))
    if a.table:
        _write(a.table, faults_mod.format_table(report))
    return 0


def cmd_bench(a, s: Settings) -> int:
    suite = bench_mod.load_suite(Path(a.suite) if a.suite else bench_dir())
    report = bench_mod.measure(suite, s.int("seed"), s.key(), s.rounds(), workers=s.int("workers"),
                               max_cycles=s.int("max_cycles"))
    _write(a.output, bench_mod.report_json(report))
    if a.table:
        _write(a.table, bench_mod.format_table(report))
    return 0


def cmd_graph(a, s: Settings) -> int:
    _write(a.output, build_call_graph(_assemble_file(a.source)).to_dot())
    return 0


def cmd_meta(a, s: Settings) -> int:
    meta = parse_metadata(_read(a.meta))
    if a.json:
        doc = [{"name": f.name, "start": f.start, "blocks": [{"offset": o, "tweak": t} for o, t in f.blocks]}
               for f in meta.functions]
        _write(a.output, json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return 0
    lines = []
    for f in meta.functions:
        lines.append(f"{f.name} @ {f.start:#010x} ({len(f.blocks)} blocks)")
        for off, t in f.blocks:
            lines.append(f"  {f.start + off:#010x}  tweak {t:#07x}")
    _write(a.output, "\n".join(lines) + "\n")
    return 0


def cmd_vectors(a, s: Settings) -> int:
    failures = self_test()
    for f in failures:
        print(f"FAIL {f}")
    if failures:
        raise CliError("SelfTestFailed", f"{len(failures)} cipher test vector(s) failed")
    print("PASS")
    return 0


# parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scfi", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", help="TOML file with defaults for seed, key, range, rounds, base, max_cycles, workers, entry, tweak0")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *names):
        if "seed" in names:
            sp.add_argument("--seed", type=_int)
        if "key" in names:
            sp.add_argument("--key", help="128-bit scramble key, 32 hex digits (k0 then k1)")
        if "range" in names:
            sp.add_argument("--range", help="tweaked address window LO:HI, e.g. 0x2000:0x7fff")
        if "rounds" in names:
            sp.add_argument("--rounds", choices=[r.value for r in RoundConfig])
        if "base" in names:
            sp.add_argument("--base", type=_int, help="load address of the first function")
        if "entry" in names:
            sp.add_argument("--entry", type=_hex, help="entry address (hex)")
            sp.add_argument("--tweak0", type=_hex, help="tweak CSR value at reset (hex)")
            sp.add_argument("--layout", help="layout JSON written by 'instrument --layout'")
        if "workers" in names:
            sp.add_argument("--workers", type=_int)
        sp.add_argument("-o", "--output", help="output file (default stdout)")

    sp = sub.add_parser("asm", help="assemble into an unprotected plaintext VMEM image")
    sp.add_argument("source")
    sp.add_argument("--layout", help="also write the layout JSON here")
    common(sp, "base")
    sp.set_defaults(func=cmd_asm)

    sp = sub.add_parser("instrument", help="instrument and lay out; writes plaintext VMEM plus metadata")
    sp.add_argument("source")
    sp.add_argument("--meta", required=True, help="metadata output file")
    sp.add_argument("--layout", help="layout JSON output file")
    sp.add_argument("--listing", help="annotated listing output file")
    common(sp, "seed", "base")
    sp.set_defaults(func=cmd_instrument)

    sp = sub.add_parser("scramble", help="encrypt a plaintext image per its metadata")
    sp.add_argument("image")
    sp.add_argument("--meta", required=True)
    common(sp, "key", "range", "rounds")
    sp.set_defaults(func=cmd_scramble)

    sp = sub.add_parser("run", help="simulate a scrambled image")
    sp.add_argument("vmem")
    sp.add_argument("--meta")
    sp.add_argument("--max-cycles", dest="max_cycles", type=_int)
    sp.add_argument("--trace", help="write a JSON-lines fetch trace here")
    sp.add_argument("--plain", action="store_true", help="image is plaintext; fetch bypasses the descrambler")
    common(sp, "key", "range", "rounds", "entry")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("fault", help="run a fault-injection campaign")
    sp.add_argument("vmem")
    sp.add_argument("--meta", required=True)
    sp.add_argument("--config", dest="campaign", required=True, help="campaign TOML")
    sp.add_argument("--table", help="also write a text table here")
    common(sp, "key", "range", "rounds", "entry", "workers")
    sp.set_defaults(func=cmd_fault)

    sp = sub.add_parser("bench", help="measure size and runtime overhead on a suite")
    sp.add_argument("--suite", help="directory of .s files (default: bundled suite)")
    sp.add_argument("--table", help="also write a text table here")
    sp.add_argument("--max-cycles", dest="max_cycles", type=_int)
    common(sp, "seed", "key", "rounds", "workers")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("graph", help="print the call graph in DOT")
    sp.add_argument("source")
    common(sp)
    sp.set_defaults(func=cmd_graph)

    sp = sub.add_parser("meta", help="dump a metadata file")
    sp.add_argument("meta")
    sp.add_argument("--json", action="store_true")
    common(sp)
    sp.set_defaults(func=cmd_meta)

    sp = sub.add_parser("vectors", help="check the cipher against its published test vectors")
    sp.set_defaults(func=cmd_vectors, output=None)
    return p


def _load_config(path: Optional[str]) -> Dict[str, Any]:
    if path is None:
        return {}
    try:
        doc = toml_loads(_read(path))
    except TOMLDecodeError as e:
        raise CliError("BadConfig", f"{path}: {e}") from None
    unknown = set(doc) - CONFIG_KEYS
    if unknown:
        raise CliError("BadConfig", f"{path}: unknown keys {sorted(unknown)}")
    return doc


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, Settings(args, _load_config(args.config)))
    except CliError as e:
        err = {"error": e.kind, "message": str(e), **e.extra}
    except (ValueError, KeyError) as e:
        err = {"error": type(e).__name__, "message": str(e)}
    sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
    return 1


if __name__ == "__main__":
    sys.exit(main())
