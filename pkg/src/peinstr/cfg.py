"""Basic-block recovery and jump-table detection."""

from __future__ import annotations

import bisect
import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from . import pe
from .decode import DecodedInsn, Kind, Mode, UndecodableRegion, sweep

TABLE_WINDOW = 16
TABLE_MAX = 4096


class Terminator(enum.Enum):
    Jmp = "jmp"
    Jcc = "jcc"
    Call = "call"
    Ret = "ret"
    FallThrough = "fallthrough"
    JumpTable = "jumptable"


class EntryKind(enum.Enum):
    Abs32 = "abs32"
    Rva32 = "rva32"


@dataclass(frozen=True)
class BasicBlock:
    start_rva: int
    size: int
    insns: int
    terminator: Terminator
    function_name: Optional[str] = None
    relocs_inside: tuple[int, ...] = ()

    @property
    def end(self) -> int:
        return self.start_rva + self.size


@dataclass(frozen=True)
class JumpTable:
    jmp_rva: int
    table_rva: int
    entry_count: int
    entry_kind: EntryKind
    targets: tuple[int, ...]


@dataclass
class BlockList:
    arch: pe.Arch
    image_base: int = 0
    blocks: list[BasicBlock] = field(default_factory=list)
    jump_tables: list[JumpTable] = field(default_factory=list)

    def __iter__(self):
        return iter(self.blocks)

    def __len__(self) -> int:
        return len(self.blocks)

    def __getitem__(self, i):
        return self.blocks[i]

    def replace(self, blocks: Iterable[BasicBlock]) -> "BlockList":
        return BlockList(self.arch, self.image_base, list(blocks), list(self.jump_tables))

    def starts(self) -> list[int]:
        return [b.start_rva for b in self.blocks]


_TERM = {
    Kind.JmpDirect: Terminator.Jmp,
    Kind.JmpIndirectReg: Terminator.Jmp,
    Kind.JmpIndirectMem: Terminator.Jmp,
    Kind.Jcc: Terminator.Jcc,
    Kind.CallDirect: Terminator.Call,
    Kind.CallIndirect: Terminator.Call,
    Kind.Ret: Terminator.Ret,
}


_UNCONDITIONAL = frozenset({Kind.JmpDirect, Kind.JmpIndirectReg, Kind.JmpIndirectMem, Kind.Ret})


def is_padding(ins: DecodedInsn) -> bool:
    """nop / int3 filler a compiler leaves between functions."""
    if ins.opcode == 0xCC or ins.opcode == 0x0F1F:
        return True
    return ins.opcode == 0x90 and not ins.rex & 1 and ins.raw[-1:] == b"\x90" and b"\xf3" not in ins.raw


def leaders(insns: Sequence[DecodedInsn], entry_points: Iterable[int],
            extra: Iterable[int] = ()) -> set[int]:
    """Leader RVAs among the instruction starts of ``insns``.

    The successor of a jcc/call is a leader; after an unconditional jmp/ret,
    nop/int3 filler is skipped and the first real instruction is a leader.
    """
    insns = sorted(insns, key=lambda i: i.rva)
    index = {ins.rva: k for k, ins in enumerate(insns)}
    out = {e for e in entry_points if e in index}
    out.update(e for e in extra if e in index)
    for ins in insns:
        if ins.kind is Kind.Plain:
            continue
        if ins.target is not None and ins.target in index:
            out.add(ins.target)
        k = index.get(ins.end)
        if k is None:
            continue
        if ins.kind in _UNCONDITIONAL:
            while k + 1 < len(insns) and is_padding(insns[k]) and insns[k + 1].rva == insns[k].end:
                k += 1
            if is_padding(insns[k]):
                continue
        out.add(insns[k].rva)
    return out


def extract_basic_blocks(insns: Sequence[DecodedInsn], entry_points: Iterable[int], *,
                         jump_tables: Sequence[JumpTable] = (),
                         regions: Sequence[UndecodableRegion] = (),
                         relocs: Iterable[int] = (),
                         names: Optional[Mapping[int, str]] = None,
                         arch: pe.Arch = pe.Arch.PE32, image_base: int = 0) -> BlockList:
    """Split a sweep into basic blocks.

    A block runs from a leader to the first transfer instruction or to the
    instruction before the next leader.  A block that would run into a
    decoding gap (undecodable bytes or a section end with no terminator
    before a gap) is dropped.
    """
    insns = sorted(insns, key=lambda i: i.rva)
    table_targets = [t for jt in jump_tables for t in jt.targets]
    table_jmps = {jt.jmp_rva for jt in jump_tables}
    lead = leaders(insns, entry_points, table_targets)
    reloc_list = sorted(set(relocs))
    bad = sorted((r.start, r.end) for r in regions)
    bad_starts = [b[0] for b in bad]
    name_starts = sorted((names or {}).items())
    name_keys = [k for k, _ in name_starts]

    blocks: list[BasicBlock] = []
    i, n = 0, len(insns)
    while i < n:
        head = insns[i]
        if head.rva not in lead:
            i += 1
            continue
        j = i
        term = Terminator.FallThrough
        broken = False
        while True:
            ins = insns[j]
            if ins.kind is not Kind.Plain:
                term = _TERM[ins.kind]
                if ins.rva in table_jmps:
                    term = Terminator.JumpTable
                j += 1
                break
            j += 1
            if j >= n:
                break
            nxt = insns[j]
            if nxt.rva != ins.end:
                # gap: undecodable bytes or a section boundary
                k = bisect.bisect_left(bad_starts, ins.end)
                broken = k < len(bad) and bad[k][0] == ins.end
                break
            if nxt.rva in lead:
                break
        if j >= n and term is Terminator.FallThrough:
            last = insns[j - 1]
            k = bisect.bisect_left(bad_starts, last.end)
            broken = broken or (k < len(bad) and bad[k][0] == last.end)
        start, end = head.rva, insns[j - 1].end
        if not broken:
            lo = bisect.bisect_left(reloc_list, start)
            hi = bisect.bisect_left(reloc_list, end)
            fname = None
            if name_keys:
                p = bisect.bisect_right(name_keys, start) - 1
                if p >= 0:
                    fname = name_starts[p][1]
            blocks.append(BasicBlock(start, end - start, j - i, term, fname,
                                     tuple(r - start for r in reloc_list[lo:hi])))
        i = j
    return BlockList(arch, image_base, blocks, list(jump_tables))


# ---------------------------------------------------------------- jump tables

def _text_sections(img: pe.PeImage) -> list[pe.Section]:
    return [s for s in img.sections if s.executable and not s.name_str.startswith(".spot")]


def _in_text(img: pe.PeImage, rva: int) -> bool:
    return any(s.contains_rva(rva) for s in _text_sections(img))


def _read_u32(img: pe.PeImage, rva: int) -> Optional[int]:
    sec = img.section_for_rva(rva)
    if sec is None or not sec.readable:
        return None
    off = rva - sec.virtual_address
    if off + 4 > len(sec.data):
        return None
    return struct.unpack_from("<I", sec.data, off)[0]


def _pe32_table(ins: DecodedInsn, img: pe.PeImage, reloc_cells: set[int]) -> Optional[JumpTable]:
    m = ins.modrm
    if (m is None or m.mod != 0 or m.base is not None or m.index is None or m.scale != 4
            or m.disp_size != 4):
        return None
    table = (m.disp & 0xFFFFFFFF) - img.image_base
    sec = img.section_for_rva(table)
    if sec is None or not sec.readable:
        return None
    targets = []
    for k in range(TABLE_MAX):
        cell = table + 4 * k
        val = _read_u32(img, cell)
        if val is None or cell not in reloc_cells:
            break
        tgt = val - img.image_base
        if not _in_text(img, tgt):
            break
        targets.append(tgt)
    if len(targets) < 2:
        return None
    return JumpTable(ins.rva, table, len(targets), EntryKind.Abs32, tuple(targets))


def _pe64_table(window: Sequence[DecodedInsn], jmp: DecodedInsn, img: pe.PeImage) -> Optional[JumpTable]:
    if jmp.modrm is None or jmp.modrm.mod != 3:
        return None
    dest = jmp.modrm.rm
    state = "add"
    base_reg = None
    signed = True
    for ins in reversed(window):
        m = ins.modrm
        if state == "add":
            if ins.opcode in (0x01, 0x03) and m is not None and m.mod == 3 and ins.rex & 8:
                if ins.opcode == 0x01:
                    d, s = m.rm, m.reg
                else:
                    d, s = m.reg, m.rm
                if d == dest:
                    base_reg, state = s, "load"
        elif state == "load":
            if (ins.opcode in (0x63, 0x8B) and m is not None and m.is_memory and m.reg == dest
                    and m.base == base_reg and m.index is not None and m.scale == 4 and m.disp == 0):
                if ins.opcode == 0x8B and ins.rex & 8:
                    return None
                signed = ins.opcode == 0x63
                state = "lea"
        elif state == "lea":
            if ins.opcode == 0x8D and m is not None and m.rip_relative and m.reg == base_reg and ins.rex & 8:
                table = (ins.end + m.disp) & 0xFFFFFFFF
                targets = []
                for k in range(TABLE_MAX):
                    val = _read_u32(img, table + 4 * k)
                    if val is None:
                        break
                    if signed and val & 0x80000000:
                        val -= 1 << 32
                    tgt = table + val
                    if not _in_text(img, tgt):
                        break
                    targets.append(tgt)
                if len(targets) < 2:
                    return None
                return JumpTable(jmp.rva, table, len(targets), EntryKind.Rva32, tuple(targets))
    return None


def detect_jump_tables(insns: Sequence[DecodedInsn], img: pe.PeImage) -> list[JumpTable]:
    """Find switch tables feeding indirect jumps.

    PE32 matches ``jmp [idx*4 + table]`` with relocated absolute entries.
    PE64 matches ``lea base,[rip+t]`` / ``movsxd r,[base+idx*4]`` /
    ``add r,base`` / ``jmp r`` within a short window before the jump.
    """
    out = []
    ordered = sorted(insns, key=lambda i: i.rva)
    if img.arch is pe.Arch.PE32:
        cells = {a for a, k in img.relocations.addresses() if k == pe.RelocKind.HIGHLOW}
        for ins in ordered:
            if ins.kind is Kind.JmpIndirectMem:
                jt = _pe32_table(ins, img, cells)
                if jt is not None:
                    out.append(jt)
    else:
        for idx, ins in enumerate(ordered):
            if ins.kind is not Kind.JmpIndirectReg:
                continue
            lo = idx
            # only look back through contiguous code
            while lo > 0 and idx - lo < TABLE_WINDOW and ordered[lo - 1].end == ordered[lo].rva:
                lo -= 1
            jt = _pe64_table(ordered[lo:idx], ins, img)
            if jt is not None:
                out.append(jt)
    return out


# ---------------------------------------------------------------- whole image

def load_symbols(path: str | Path) -> dict[int, str]:
    """Read a symbol file: JSON ``{"name": rva}`` or lines of ``<rva> <name>``."""
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        return {int(v, 0) if isinstance(v, str) else int(v): k for k, v in json.loads(text).items()}
    out = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        rva, name = line.split(None, 1)
        out[int(rva, 0)] = name.strip()
    return out


def entry_points(img: pe.PeImage, symbols: Optional[Mapping[int, str]] = None) -> dict[int, Optional[str]]:
    """Entry RVA, exports and symbols mapped to a name (None when unnamed)."""
    out: dict[int, Optional[str]] = {img.entry_point: None}
    for rva, name in pe.exports(img):
        if _in_text(img, rva):
            out[rva] = name
    for rva, name in (symbols or {}).items():
        out[rva] = name
    return out


def sweep_image(img: pe.PeImage, resume: Iterable[int] = ()) -> tuple[list[DecodedInsn], list[UndecodableRegion]]:
    mode = Mode.Bits64 if img.arch is pe.Arch.PE64 else Mode.Bits32
    insns, regions = [], []
    resume = set(resume)
    for sec in _text_sections(img):
        code = bytes(sec.data[:min(len(sec.data), sec.virtual_size or len(sec.data))])
        ins, reg = sweep(code, sec.virtual_address, mode, resume)
        insns += ins
        regions += reg
    return insns, regions


def analyze(img: pe.PeImage, symbols: Optional[Mapping[int, str]] = None) -> tuple[BlockList, list[DecodedInsn]]:
    """Sweep, detect tables and split the text sections of ``img`` into blocks."""
    eps = entry_points(img, symbols)
    resume = set(eps)
    for _ in range(4):
        insns, regions = sweep_image(img, resume)
        tables = detect_jump_tables(insns, img)
        grown = set(resume)
        grown.update(i.target for i in insns if i.target is not None and _in_text(img, i.target))
        grown.update(t for jt in tables for t in jt.targets)
        if not regions or grown == resume:
            break
        resume = grown
    names = {rva: n for rva, n in eps.items() if n}
    relocs = [a for a, _ in img.relocations.addresses()]
    bl = extract_basic_blocks(insns, eps, jump_tables=tables, regions=regions, relocs=relocs,
                              names=names, arch=img.arch, image_base=img.image_base)
    return bl, insns


# ---------------------------------------------------------------- interchange

def block_list_to_json(blocks: BlockList) -> bytes:
    doc = {
        "version": 1,
        "arch": blocks.arch.value,
        "image_base": blocks.image_base,
        "blocks": [
            {"start": b.start_rva, "size": b.size, "insns": b.insns, "term": b.terminator.value,
             "func": b.function_name, "relocs": list(b.relocs_inside)}
            for b in blocks.blocks
        ],
        "jump_tables": [
            {"jmp": t.jmp_rva, "table": t.table_rva, "kind": t.entry_kind.value, "targets": list(t.targets)}
            for t in blocks.jump_tables
        ],
    }
    return json.dumps(doc, separators=(",", ":")).encode()


def block_list_from_json(data: bytes | str) -> BlockList:
    doc = json.loads(data)
    if doc.get("version") != 1:
        raise ValueError(f"unsupported block list version {doc.get('version')!r}")
    blocks = [BasicBlock(b["start"], b["size"], b["insns"], Terminator(b["term"]), b.get("func"),
                         tuple(b.get("relocs", ()))) for b in doc["blocks"]]
    tables = [JumpTable(t["jmp"], t["table"], len(t["targets"]), EntryKind(t["kind"]), tuple(t["targets"]))
              for t in doc.get("jump_tables", ())]
    return BlockList(pe.Arch(doc["arch"]), doc.get("image_base", 0), blocks, tables)
