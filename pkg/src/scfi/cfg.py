"""Call graph extraction and per-function tweak assignment."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

from .asm import SourceProgram

MASK64 = (1 << 64) - 1
MAX_WIDTH = 20


class CallGraphError(ValueError):
    pass


class TweakSpaceExhausted(ValueError):
    pass


@dataclass(frozen=True)
class DirectEdge:
    caller: str
    callee: str
    site: int


@dataclass(frozen=True)
class IndirectEdge:
    caller: str
    site: int
    targets: Tuple[str, ...]


@dataclass
class CallGraph:
    nodes: List[str]
    direct_edges: List[DirectEdge] = field(default_factory=list)
    indirect_edges: List[IndirectEdge] = field(default_factory=list)

    def to_dot(self) -> str:
        lines = ["digraph callgraph {"]
        for n in self.nodes:
            lines.append(f'  "{n}";')
        for e in self.direct_edges:
            lines.append(f'  "{e.caller}" -> "{e.callee}" [label="site {e.site}"];')
        for e in self.indirect_edges:
            for t in e.targets:
                lines.append(f'  "{e.caller}" -> "{t}" [style=dashed, label="site {e.site}"];')
        lines.append("}")
        return "\n".join(lines) + "\n"


def build_call_graph(p: SourceProgram) -> CallGraph:
    """One direct edge per call site, one indirect edge per annotated ``jalr`` site."""
    names = set(p.names)
    g = CallGraph(nodes=list(p.names))
    for f in p.functions:
        site = 0
        for si in f.instrs:
            if si.is_direct_call:
                g.direct_edges.append(DirectEdge(f.name, si.sym, site))
                site += 1
            elif si.is_indirect_call:
                targets = si.targets or ()
                if not targets:
                    raise CallGraphError(f"{f.name}: indirect call on line {si.line} has no target set")
                unknown = [t for t in targets if t not in names]
                if unknown:
                    raise CallGraphError(f"{f.name}: indirect call on line {si.line} names unknown function(s) {', '.join(unknown)}")
                g.indirect_edges.append(IndirectEdge(f.name, site, tuple(targets)))
                site += 1
    return g


def splitmix64(seed: int) -> Iterator[int]:
    """The splitmix64 generator; yields 64-bit outputs starting from ``seed``."""
    state = seed & MASK64
    while True:
        state = (state + 0x9E3779B97F4A7C15) & MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        yield z ^ (z >> 31)


@dataclass
class TweakAssignment:
    width: int
    body_tweak: Dict[str, int]
    # class id -> tweak of the shared indirect entry point
    entry_tweak: Dict[int, int]
    class_of: Dict[str, Optional[int]]
    seed: int

    def members(self, cls: int) -> List[str]:
        return [f for f, c in self.class_of.items() if c == cls]

    def entry_tweak_of(self, function: str) -> Optional[int]:
        cls = self.class_of.get(function)
        return None if cls is None else self.entry_tweak[cls]

    def class_for_targets(self, targets: Tuple[str, ...]) -> int:
        cls = self.class_of[targets[0]]
        assert cls is not None and all(self.class_of[t] == cls for t in targets)
        return cls

    @property
    def all_tweaks(self) -> List[int]:
        return list(self.body_tweak.values()) + list(self.entry_tweak.values())


def indirect_classes(g: CallGraph) -> Dict[str, Optional[int]]:
    """Merge overlapping indirect target sets (union-find); classes are numbered
    in order of their first member in the node list."""
    parent = {n: n for n in g.nodes}

    def find(x: str) -> str:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    targeted = set()
    for e in g.indirect_edges:
        targeted.update(e.targets)
        root = find(e.targets[0])
        for t in e.targets[1:]:
            r = find(t)
            if r != root:
                parent[r] = root
    ids: Dict[str, int] = {}
    class_of: Dict[str, Optional[int]] = {}
    for n in g.nodes:
        if n not in targeted:
            class_of[n] = None
            continue
        root = find(n)
        if root not in ids:
            ids[root] = len(ids)
        class_of[n] = ids[root]
    return class_of


def tweak_width(count: int) -> int:
    return 5 if count <= 32 else 20


def assign_tweaks(g: CallGraph, seed: int, allow_collisions: bool = False) -> TweakAssignment:
    """Draw distinct tweaks for every function body and every indirect class.

    Body tweaks are drawn first, in node order, then class entry tweaks in
    class-id order; duplicates are rejected and redrawn.
    """
    class_of = indirect_classes(g)
    n_classes = len({c for c in class_of.values() if c is not None})
    needed = len(g.nodes) + n_classes
    width = tweak_width(needed)
    if needed > (1 << MAX_WIDTH) and not allow_collisions:
        raise TweakSpaceExhausted(f"{needed} distinct tweaks needed, only {1 << MAX_WIDTH} available")
    rng = splitmix64(seed)
    mask = (1 << width) - 1
    used: set = set()

    def draw() -> int:
        while True:
            t = next(rng) & mask
            if allow_collisions and len(used) >= (1 << width):
                return t
            if t not in used:
                used.add(t)
                return t

    body = {n: draw() for n in g.nodes}
    entry = {c: draw() for c in range(n_classes)}
    return TweakAssignment(width, body, entry, class_of, seed)
