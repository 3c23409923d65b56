"""Turn a block list into an instrumentation plan."""

from __future__ import annotations

import bisect
import enum
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .cfg import BasicBlock, BlockList
from .decode import DecodedInsn, Kind

MEMORY_ROUTINES = (
    "memcpy", "memmove", "memset", "strcpy", "strcat", "strncpy", "sprintf",
    "malloc", "free", "realloc", "HeapAlloc", "HeapFree",
)


class BadPattern(ValueError):
    pass


class Mode(enum.Enum):
    Jump = "jump"
    Inline = "inline"


class ThreadMode(enum.Enum):
    Single = "single"
    Multi = "multi"


@dataclass
class FilterSpec:
    include_ranges: list[tuple[int, int]] = field(default_factory=list)
    exclude_ranges: list[tuple[int, int]] = field(default_factory=list)
    include_name_patterns: list[str] = field(default_factory=list)
    exclude_name_patterns: list[str] = field(default_factory=list)
    memory_sensitive: bool = False

    def __post_init__(self) -> None:
        for lo, hi in self.include_ranges + self.exclude_ranges:
            if not lo < hi:
                raise ValueError(f"empty range [{lo:#x}, {hi:#x})")

    @classmethod
    def from_json(cls, path: str | Path) -> "FilterSpec":
        doc = json.loads(Path(path).read_text())
        rng = lambda xs: [(int(str(a), 0), int(str(b), 0)) for a, b in xs]  # noqa: E731
        return cls(rng(doc.get("include_ranges", [])), rng(doc.get("exclude_ranges", [])),
                   list(doc.get("include_name_patterns", [])), list(doc.get("exclude_name_patterns", [])),
                   bool(doc.get("memory_sensitive", False)))


@dataclass(frozen=True)
class Point:
    block: BasicBlock
    id: int


@dataclass
class InstrumentationPlan:
    points: list[Point]
    mode: Mode = Mode.Jump
    thread_mode: ThreadMode = ThreadMode.Single
    linear_coverage: bool = False
    map_size_log2: int = 16

    def __len__(self) -> int:
        return len(self.points)

    def id_of(self) -> dict[int, int]:
        return {p.block.start_rva: p.id for p in self.points}


def _compile(patterns: Sequence[str]) -> list[re.Pattern]:
    out = []
    for p in patterns:
        try:
            out.append(re.compile(p))
        except re.error as exc:
            raise BadPattern(f"{p!r}: {exc}") from None
    return out


def _in_ranges(rva: int, ranges: Sequence[tuple[int, int]]) -> bool:
    return any(lo <= rva < hi for lo, hi in ranges)


def _named(b: BasicBlock, pats: Sequence[re.Pattern]) -> bool:
    return b.function_name is not None and any(p.search(b.function_name) for p in pats)


def apply_filters(blocks: BlockList, spec: FilterSpec) -> BlockList:
    """Address-range and function-name include/exclude filtering.

    A block is matched by a range when its start RVA lies inside it.
    """
    inc = _compile(spec.include_name_patterns)
    exc = _compile(spec.exclude_name_patterns)
    kept = []
    for b in blocks:
        if (spec.include_ranges or inc) and not (
                _in_ranges(b.start_rva, spec.include_ranges) or _named(b, inc)):
            continue
        if _in_ranges(b.start_rva, spec.exclude_ranges) or _named(b, exc):
            continue
        kept.append(b)
    return blocks.replace(kept)


def _computed_write(ins: DecodedInsn) -> bool:
    if ins.implicit_write:
        return True
    if not ins.writes_memory or ins.modrm is None:
        return False
    m = ins.modrm
    return m.is_memory and not m.rip_relative and not m.is_absolute


def memory_sensitive_select(blocks: BlockList, insns: Sequence[DecodedInsn],
                            imports: Iterable[tuple[int, str]],
                            routines: Sequence[str] = MEMORY_ROUTINES,
                            image_base: Optional[int] = None) -> BlockList:
    """Keep blocks that write through a computed address or call a memory routine.

    ``imports`` maps IAT slot RVAs to ``dll!name``.  Calls are resolved when
    they go through an IAT slot directly (``call [slot]``) or via a one-hop
    thunk ``jmp [slot]``.
    """
    base = blocks.image_base if image_base is None else image_base
    wanted = set(routines)
    slot_names = {rva: name.rsplit("!", 1)[-1] for rva, name in imports}
    order = sorted(insns, key=lambda i: i.rva)
    starts = [i.rva for i in order]

    def slot_of(ins: DecodedInsn) -> Optional[int]:
        m = ins.modrm
        if m is None or not m.is_memory:
            return None
        if m.rip_relative:
            return (ins.end + m.disp) & 0xFFFFFFFF
        if m.is_absolute:
            return (m.disp & 0xFFFFFFFF) - base
        return None

    thunks: dict[int, str] = {}
    for ins in order:
        if ins.kind is Kind.JmpIndirectMem:
            s = slot_of(ins)
            if s is not None and s in slot_names:
                thunks[ins.rva] = slot_names[s]

    def callee(ins: DecodedInsn) -> Optional[str]:
        if ins.kind is Kind.CallDirect and ins.target is not None:
            return thunks.get(ins.target)
        if ins.kind is Kind.CallIndirect:
            s = slot_of(ins)
            return slot_names.get(s) if s is not None else None
        return None

    kept = []
    for b in blocks:
        lo = bisect.bisect_left(starts, b.start_rva)
        hi = bisect.bisect_left(starts, b.end)
        for ins in order[lo:hi]:
            if _computed_write(ins) or callee(ins) in wanted:
                kept.append(b)
                break
    return blocks.replace(kept)


def block_id(start_rva: int, map_size_log2: int) -> int:
    """splitmix64 finalizer of the start RVA, masked to the map size."""
    z = (start_rva + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    z ^= z >> 31
    return z & ((1 << map_size_log2) - 1)


def assign_ids(blocks: Iterable[BasicBlock], map_size_log2: int) -> list[Point]:
    if not 10 <= map_size_log2 <= 20:
        raise ValueError("map_size_log2 must be in [10, 20]")
    return [Point(b, block_id(b.start_rva, map_size_log2)) for b in sorted(blocks, key=lambda b: b.start_rva)]


def make_plan(blocks: BlockList, spec: FilterSpec = FilterSpec(), *,
              insns: Sequence[DecodedInsn] = (), imports: Iterable[tuple[int, str]] = (),
              mode: Mode = Mode.Jump, thread_mode: ThreadMode = ThreadMode.Single,
              linear: bool = False, map_size_log2: int = 16) -> InstrumentationPlan:
    chosen = apply_filters(blocks, spec)
    if spec.memory_sensitive:
        chosen = memory_sensitive_select(chosen, insns, imports)
    return InstrumentationPlan(assign_ids(chosen, map_size_log2), mode, thread_mode, linear, map_size_log2)


def parse_range(text: str) -> tuple[int, int]:
    """``0x1000-0x2000`` → (0x1000, 0x2000), half-open."""
    lo, sep, hi = text.partition("-")
    if not sep:
        raise ValueError(f"bad range {text!r}")
    lo_i, hi_i = int(lo, 0), int(hi, 0)
    if not lo_i < hi_i:
        raise ValueError(f"empty range {text!r}")
    return lo_i, hi_i
