"""Code-size and runtime overhead of the instrumentation on a program suite.

Runtime is counted in retired instructions (the simulator's 1-IPC model), so
the numbers are instruction-count proxies for real cycle counts.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from .asm import assemble
from .pipeline import DEFAULT_MAX_CYCLES, build, build_plain, default_params
from .prince import PrinceKey, RoundConfig
from .sim import Termination


class BenchError(RuntimeError):
    pass


@dataclass
class BenchResult:
    name: str
    baseline_bytes: int
    protected_bytes: int
    baseline_cycles: int
    protected_cycles: int
    exit_value: int
    inserted_instructions: int
    padding_bytes: int
    unexplained_bytes: int

    @property
    def size_ratio(self) -> float:
        return self.protected_bytes / self.baseline_bytes

    @property
    def runtime_ratio(self) -> float:
        return self.protected_cycles / self.baseline_cycles

    @property
    def size_overhead_pct(self) -> float:
        return overhead_pct(self.size_ratio)

    @property
    def runtime_overhead_pct(self) -> float:
        return overhead_pct(self.runtime_ratio)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["size_overhead_pct"] = self.size_overhead_pct
        d["runtime_overhead_pct"] = self.runtime_overhead_pct
        return d


def overhead_pct(ratio: float) -> float:
    return (ratio - 1.0) * 100.0


def geomean(ratios: Sequence[float]) -> float:
    if not ratios or any(r <= 0 for r in ratios):
        raise ValueError("geometric mean needs positive ratios")
    return math.exp(math.fsum(math.log(r) for r in ratios) / len(ratios))


def measure_one(name: str, text: str, seed: int, key: PrinceKey, rounds: RoundConfig = RoundConfig.REDUCED5,
                max_cycles: int = DEFAULT_MAX_CYCLES) -> BenchResult:
    src = assemble(text)
    base = build_plain(src)
    prot = build(src, seed, default_params(key, rounds))
    rb = base.run(max_cycles)
    rp = prot.run(max_cycles)
    for label, r in (("baseline", rb), ("protected", rp)):
        if r.termination != Termination.ECALL:
            raise BenchError(f"{name}: {label} run ended with {r.termination.value}")
    if rb.exit_value != rp.exit_value:
        raise BenchError(f"{name}: protected exit value {rp.exit_value:#x} differs from baseline {rb.exit_value:#x}")

    inserted = prot.program.accounted()
    padding = 4 * (prot.program.counts()["tail"] - base.program.counts()["tail"])
    diff = prot.image.code_bytes - base.image.code_bytes
    return BenchResult(
        name,
        base.image.code_bytes,
        prot.image.code_bytes,
        rb.cycles,
        rp.cycles,
        rb.exit_value,
        inserted,
        padding,
        diff - 4 * inserted - padding,
    )


def _measure_args(args) -> BenchResult:
    return measure_one(*args)


def load_suite(directory: Path) -> List[Tuple[str, str]]:
    files = sorted(Path(directory).glob("*.s"))
    if not files:
        raise BenchError(f"no .s files in {directory}")
    return [(f.stem, f.read_text()) for f in files]


def measure(suite: Sequence[Tuple[str, str]], seed: int, key: PrinceKey, rounds: RoundConfig = RoundConfig.REDUCED5,
            workers: int = 1, max_cycles: int = DEFAULT_MAX_CYCLES) -> dict:
    """Run every (name, source) pair both ways; returns the JSON-ready report."""
    tasks = [(n, t, seed, key, rounds, max_cycles) for n, t in suite]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_measure_args, tasks))
    else:
        results = [_measure_args(t) for t in tasks]
    return {
        "seed": seed,
        "key": key.hex(),
        "rounds": rounds.value,
        "timing_model": "1 cycle per retired instruction",
        "benchmarks": [r.as_dict() for r in results],
        "geomean_size_overhead_pct": overhead_pct(geomean([r.size_ratio for r in results])),
        "geomean_runtime_overhead_pct": overhead_pct(geomean([r.runtime_ratio for r in results])),
    }


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def format_table(report: dict) -> str:
    head = f"{'benchmark':<14} {'bytes':>7} {'prot':>7} {'size%':>7} {'cycles':>8} {'prot':>8} {'time%':>7}"
    lines = [head, "-" * len(head)]
    for b in report["benchmarks"]:
        lines.append(
            f"{b['name']:<14} {b['baseline_bytes']:>7} {b['protected_bytes']:>7} {b['size_overhead_pct']:>7.2f} "
            f"{b['baseline_cycles']:>8} {b['protected_cycles']:>8} {b['runtime_overhead_pct']:>7.2f}"
        )
    lines.append(f"{'geomean':<14} {'':>7} {'':>7} {report['geomean_size_overhead_pct']:>7.2f} "
                 f"{'':>8} {'':>8} {report['geomean_runtime_overhead_pct']:>7.2f}")
    return "\n".join(lines) + "\n"


def default_suite() -> List[Tuple[str, str]]:
    from .pipeline import bench_dir

    return load_suite(bench_dir())


def run_default(seed: int = 0, key: Optional[PrinceKey] = None) -> dict:
    from .pipeline import DEFAULT_KEY

    return measure(default_suite(), seed, key or DEFAULT_KEY)
