"""Materialize an instrumentation plan into a rewritten PE image.

Jump mode patches a 5-byte ``jmp rel32`` over each selected block head and
sends it to a per-point trampoline in ``.spot0``.  Inline mode clones the
text sections into ``.spot0`` with a coverage stub in front of every
selected head and redirects entry, exports and code pointers to the clone.
"""

from __future__ import annotations

import bisect
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

from . import pe
from .asm import EAX, ECX, Asm, Mem, Ref
from .cfg import BasicBlock, BlockList, EntryKind, analyze, entry_points
from .decode import DecodedInsn, Kind
from .select import InstrumentationPlan, Point, ThreadMode
from .select import Mode as RewriteMode

FEEDBACK_MAGIC = b"SPOTFB\x00\x00"
FEEDBACK_VERSION = 1
HEADER_SIZE = 64
PREV_OFFSET = 24
FLAG_MULTI = 1
FLAG_LINEAR = 2
TRAMPOLINES, FEEDBACK, TLS = ".spot0", ".spot1", ".spot2"
JMP_LEN = 5

_UNCONDITIONAL = frozenset({Kind.JmpDirect, Kind.JmpIndirectReg, Kind.JmpIndirectMem, Kind.Ret})
_LOOPS = frozenset({0xE0, 0xE1, 0xE2, 0xE3})


class RewriteError(Exception):
    pass


class TooSmall(RewriteError):
    pass


class UnrelocatableInsn(RewriteError):
    pass


class TlsDirectoryConflict(RewriteError):
    pass


@dataclass
class NewSection:
    name: str
    data: bytes
    characteristics: int
    virtual_size: int


@dataclass(frozen=True)
class FeedbackLayout:
    rva: int
    map_size: int
    extra_size: int = 0

    @property
    def prev_rva(self) -> int:
        return self.rva + PREV_OFFSET

    @property
    def bitmap_rva(self) -> int:
        return self.rva + HEADER_SIZE

    @property
    def linear_rva(self) -> int:
        return self.rva + HEADER_SIZE + self.map_size


@dataclass(frozen=True)
class TlsSlot:
    index_rva: int  # the directory's AddressOfIndex cell
    offset: int  # slot offset inside each thread's TLS block


@dataclass(frozen=True)
class PatchSite:
    head: int
    insns: tuple[DecodedInsn, ...]
    size: int

    @property
    def expanded(self) -> bool:
        return len(self.insns) > 1


@dataclass
class TrampolineLayout:
    point_rva: int
    trampoline_rva: int
    payload: bytes
    relocated_insns: bytes
    back_jump_rva: int
    site_size: int
    relocs: list[tuple[int, int]] = field(default_factory=list)  # (rva, RelocKind)

    @property
    def code(self) -> bytes:
        back = self.back_jump_rva - (self.trampoline_rva + len(self.payload) + len(self.relocated_insns) + JMP_LEN)
        return self.payload + self.relocated_insns + b"\xe9" + _s32(back)

    @property
    def patch(self) -> bytes:
        rel = self.trampoline_rva - (self.point_rva + JMP_LEN)
        return b"\xe9" + _s32(rel) + b"\xcc" * (self.site_size - JMP_LEN)


@dataclass
class RewriteReport:
    mode: str = "jump"
    thread_mode: str = "single"
    map_size_log2: int = 16
    linear: bool = False
    plan_points: int = 0
    instrumented: int = 0
    skipped_too_small: int = 0
    skipped_unrelocatable: int = 0
    expanded_with_neighbor: int = 0
    relocs_deleted: int = 0
    relocs_added: int = 0
    new_sections: list[tuple[str, int, int]] = field(default_factory=list)
    points: list[tuple[int, int]] = field(default_factory=list)  # (block rva, id) actually instrumented
    skipped: list[tuple[int, str]] = field(default_factory=list)
    patch_sites: list[tuple[int, int]] = field(default_factory=list)
    trampolines: dict[int, int] = field(default_factory=dict)
    clone_map: dict[int, int] = field(default_factory=dict)  # original block rva -> rva executed instead
    redirected_cells: list[tuple[int, int]] = field(default_factory=list)  # (rva, size)
    feedback_rva: int = 0
    tls_slot_offset: Optional[int] = None
    tls_created: bool = False

    def to_json(self) -> str:
        doc = asdict(self)
        doc["trampolines"] = {str(k): v for k, v in self.trampolines.items()}
        doc["clone_map"] = {str(k): v for k, v in self.clone_map.items()}
        return json.dumps(doc, indent=1, sort_keys=True)


def _s32(v: int) -> bytes:
    if not -(1 << 31) <= v < (1 << 31):
        raise UnrelocatableInsn(f"displacement {v:#x} out of rel32 range")
    return v.to_bytes(4, "little", signed=True)


def _ptr_kind(size: int) -> int:
    return pe.RelocKind.HIGHLOW if size == 4 else pe.RelocKind.DIR64


# ---------------------------------------------------------------- patch sites

def plan_patch_site(block: BasicBlock, insns: Mapping[int, DecodedInsn] | Sequence[DecodedInsn],
                    leaders: Iterable[int] = ()) -> PatchSite:
    """Whole instructions from the block head covering at least 5 bytes.

    Past the block end the site may only grow into a fall-through
    instruction that is not a leader.
    """
    by_rva = insns if isinstance(insns, Mapping) else {i.rva: i for i in insns}
    leaders = leaders if isinstance(leaders, (set, frozenset)) else set(leaders)
    taken: list[DecodedInsn] = []
    size = 0
    rva = block.start_rva
    while size < JMP_LEN:
        ins = by_rva.get(rva)
        if ins is None:
            raise TooSmall(f"block {block.start_rva:#x}: no instruction at {rva:#x}")
        if rva >= block.end:
            if rva in leaders:
                raise TooSmall(f"block {block.start_rva:#x}: {size} bytes before leader {rva:#x}")
            if taken and taken[-1].kind in _UNCONDITIONAL:
                raise TooSmall(f"block {block.start_rva:#x}: no fall-through after {size} bytes")
        taken.append(ins)
        size += ins.length
        rva = ins.end
    return PatchSite(block.start_rva, tuple(taken), size)


# ---------------------------------------------------------------- moving instructions

def _reloc_offsets(ins: DecodedInsn, cells: Iterable[int], ptr: int) -> list[tuple[int, int]]:
    """(offset, size) of relocated operands of ``ins``; rejects cells we cannot reproduce."""
    ok: dict[int, int] = {}
    m = ins.modrm
    if m is not None and m.disp_size == 4 and not m.rip_relative:
        ok[m.disp_offset] = 4
    if ins.imm_size in (4, 8):
        ok[ins.imm_offset] = ins.imm_size
    out = []
    for c in cells:
        off = c - ins.rva
        size = ok.get(off)
        if size is None:
            raise UnrelocatableInsn(f"relocation at {c:#x} inside {ins.raw.hex()} is not an operand")
        out.append((off, size))
    return out


def moved_length(ins: DecodedInsn, long: bool) -> int:
    if ins.rel_size == 1 and long:
        op = ins.raw[ins.rel_offset - 1]
        pre = ins.rel_offset - 1
        if op == 0xEB:
            return pre + 5
        if 0x70 <= op <= 0x7F:
            return pre + 6
        return pre + 2 + 2 + 5  # loop/jcxz: op +2; jmp short +5; jmp rel32
    return ins.length


def move_insn(ins: DecodedInsn, new_rva: int, *, long: bool = False, code_map: Mapping[int, int] = {},
              data_map: Mapping[int, int] = {}, allow_loops: bool = True) -> bytes:
    """Re-encode ``ins`` to run at ``new_rva``.

    Branch targets and rip-relative operands are looked up in ``code_map``
    and ``data_map`` respectively (falling back to the original address).
    ``long`` promotes rel8 branches to rel32 forms.
    """
    if ins.far:
        raise UnrelocatableInsn(f"far transfer at {ins.rva:#x}")
    raw = bytearray(ins.raw)
    if ins.rel_size:
        tgt = code_map.get(ins.target, ins.target)
        op_pos = ins.rel_offset - 1
        op = raw[op_pos]
        if ins.rel_size == 4:
            raw[ins.rel_offset:ins.rel_offset + 4] = _s32(tgt - (new_rva + len(raw)))
            return bytes(raw)
        if not long:
            rel = tgt - (new_rva + len(raw))
            if not -128 <= rel <= 127:
                raise UnrelocatableInsn(f"short branch at {ins.rva:#x} out of range")
            raw[ins.rel_offset] = rel & 0xFF
            return bytes(raw)
        pre = bytes(raw[:op_pos])
        if op == 0xEB:
            head = pre + b"\xe9"
        elif 0x70 <= op <= 0x7F:
            head = pre + bytes([0x0F, 0x80 + (op - 0x70)])
        elif op in _LOOPS:
            if not allow_loops:
                raise UnrelocatableInsn(f"{ins.raw.hex()} at {ins.rva:#x} has no rel32 form")
            head = pre + bytes([op, 0x02, 0xEB, 0x05, 0xE9])
        else:
            raise UnrelocatableInsn(f"unknown short branch {ins.raw.hex()}")
        end = new_rva + len(head) + 4
        return head + _s32(tgt - end)
    m = ins.modrm
    if m is not None and m.rip_relative:
        old = (ins.end + m.disp) & 0xFFFFFFFF
        new = data_map.get(old, old)
        raw[m.disp_offset:m.disp_offset + 4] = _s32(new - (new_rva + len(raw)))
    return bytes(raw)


# ---------------------------------------------------------------- stubs

def _stub(bits: int, point_id: int, thread_mode: ThreadMode, tls: Optional[TlsSlot],
          linear_index: Optional[int]) -> Asm:
    """Coverage update preserving flags and every register it touches."""
    a = Asm(bits)
    w = bits == 64
    a.pushf()
    a.push(EAX)
    multi = thread_mode is ThreadMode.Multi
    if multi or w:
        a.push(ECX)
    if not multi:
        a.mov_rm(EAX, Mem(ref=Ref("prev")))
        a.mov_mi(Mem(ref=Ref("prev")), point_id >> 1)
        a.alu_ri("xor", EAX, point_id)
        if w:
            a.lea(ECX, Mem(ref=Ref("bitmap")), w=True)
            a.inc8(Mem(base=ECX, index=EAX))
        else:
            a.inc8(Mem(base=EAX, ref=Ref("bitmap")))
    else:
        assert tls is not None
        if w:
            a.mov_rm(EAX, Mem(disp=0x58, seg=0x65, absolute=True), w=True)
            a.mov_rm(ECX, Mem(ref=Ref("tls_index")))
            a.mov_rm(EAX, Mem(base=EAX, index=ECX, scale=8), w=True)
        else:
            a.mov_rm(EAX, Mem(disp=0x2C, seg=0x64))
            a.mov_rm(ECX, Mem(ref=Ref("tls_index")))
            a.mov_rm(EAX, Mem(base=EAX, index=ECX, scale=4))
        slot = Mem(base=EAX, disp=tls.offset)
        a.mov_rm(ECX, slot)
        a.mov_mi(slot, point_id >> 1)
        a.alu_ri("xor", ECX, point_id)
        if w:
            a.lea(EAX, Mem(ref=Ref("bitmap")), w=True)
            a.inc8(Mem(base=EAX, index=ECX))
        else:
            a.inc8(Mem(base=ECX, ref=Ref("bitmap")))
    if linear_index is not None:
        a.or8_mi(Mem(ref=Ref("linear", linear_index // 8)), 1 << (linear_index % 8))
    if multi or w:
        a.pop(ECX)
    a.pop(EAX)
    a.popf()
    return a


def _stub_symbols(feedback: FeedbackLayout, tls: Optional[TlsSlot]) -> dict[str, int]:
    syms = {"prev": feedback.prev_rva, "bitmap": feedback.bitmap_rva, "linear": feedback.linear_rva}
    if tls is not None:
        syms["tls_index"] = tls.index_rva
    return syms


def assemble_stub(bits: int, point_id: int, thread_mode: ThreadMode, feedback: FeedbackLayout,
                  tls: Optional[TlsSlot], at: int, image_base: int,
                  linear_index: Optional[int] = None) -> tuple[bytes, list[int]]:
    """Stub bytes at ``at`` and the offsets of its absolute (relocated) cells."""
    out = _stub(bits, point_id, thread_mode, tls, linear_index).assemble(
        at, _stub_symbols(feedback, tls), image_base)
    return out.code, [o for o, _ in out.relocs]


def emit_trampoline(point: Point, thread_mode: ThreadMode, feedback: FeedbackLayout,
                    tls_slot: Optional[TlsSlot], *, site: PatchSite, at: int, bits: int,
                    image_base: int, linear_index: Optional[int] = None,
                    reloc_cells: Iterable[int] = ()) -> TrampolineLayout:
    """Stub, displaced instructions re-encoded at their new address, jump back."""
    ptr = bits // 8
    payload, stub_relocs = assemble_stub(bits, point.id, thread_mode, feedback, tls_slot, at,
                                         image_base, linear_index)
    relocs = [(at + o, pe.RelocKind.HIGHLOW) for o in stub_relocs]
    cells = sorted(reloc_cells)
    moved = bytearray()
    pos = at + len(payload)
    for ins in site.insns:
        inside = [c for c in cells if ins.rva <= c < ins.end]
        offs = _reloc_offsets(ins, inside, ptr)
        enc = move_insn(ins, pos, long=True, allow_loops=False)
        if offs and len(enc) != ins.length:
            raise UnrelocatableInsn(f"relocated branch operand at {ins.rva:#x}")
        relocs += [(pos + o, _ptr_kind(s)) for o, s in offs]
        moved += enc
        pos += len(enc)
    return TrampolineLayout(point.block.start_rva, at, payload, bytes(moved), site.head + site.size,
                            site.size, relocs)


# ---------------------------------------------------------------- new sections

def build_feedback_section(plan: InstrumentationPlan) -> NewSection:
    """Header, bitmap, optional linear bitset and an 8-byte tail pad."""
    map_size = 1 << plan.map_size_log2
    extra = (len(plan.points) + 7) // 8 if plan.linear_coverage else 0
    flags = (FLAG_MULTI if plan.thread_mode is ThreadMode.Multi else 0) | (FLAG_LINEAR if plan.linear_coverage else 0)
    header = FEEDBACK_MAGIC + struct.pack("<IIII", FEEDBACK_VERSION, map_size, extra, flags)
    header = header.ljust(HEADER_SIZE, b"\0")
    return NewSection(FEEDBACK, header, pe.READ_WRITE, HEADER_SIZE + map_size + extra + 8)


def feedback_header(data: bytes) -> dict[str, int]:
    magic = bytes(data[:8])
    if magic != FEEDBACK_MAGIC:
        raise ValueError("not a feedback section")
    version, map_size, extra, flags = struct.unpack_from("<IIII", data, 8)
    (prev,) = struct.unpack_from("<Q", data, PREV_OFFSET)
    return {"version": version, "map_size": map_size, "extra_size": extra, "flags": flags, "prev": prev}


@dataclass
class TlsBuild:
    section: NewSection
    slot: TlsSlot
    dir_rva: int
    dir_size: int
    reloc_cells: list[int]
    merged: bool


def build_tls_section(img: pe.PeImage, at: int) -> TlsBuild:
    """A ``.spot2`` holding a TLS directory whose template ends in the prev slot.

    An existing directory is merged: its template (with zero-fill
    materialized) is kept at offset 0 so existing TLS offsets stay valid,
    and its index cell and callback array are reused.
    """
    ptr = img.arch.ptr_size
    pfmt = "<I" if ptr == 4 else "<Q"
    dir_size = 4 * ptr + 8
    base = img.image_base
    old = img.directory(pe.DIR_TLS)
    template = b""
    index_va = callbacks_va = None
    characteristics = 0
    merged = False
    if old is not None and old.size:
        try:
            raw = img.read(old.rva, dir_size)
            start, end, index_va, callbacks_va = struct.unpack_from("<4" + pfmt[1], raw)
            zero_fill, characteristics = struct.unpack_from("<II", raw, 4 * ptr)
            if end < start or end - start > 1 << 20 or zero_fill > 1 << 20:
                raise TlsDirectoryConflict(f"implausible TLS template [{start:#x}, {end:#x})")
            template = img.read(start - base, end - start) + bytes(zero_fill)
            img.read(index_va - base, 4)
        except pe.PeError as exc:
            raise TlsDirectoryConflict(f"existing TLS directory cannot be merged: {exc}") from None
        merged = True
    blob = bytearray(dir_size)
    pos = (dir_size + 15) & ~15
    if index_va is None:
        index_rva = at + pos
        pos += 16
        callbacks_rva = at + pos
        pos += 2 * ptr
        pos = (pos + 15) & ~15
    else:
        index_rva = index_va - base
        callbacks_rva = None
    slot_off = (len(template) + 7) & ~7
    tpl = template.ljust(slot_off, b"\0") + bytes(8)
    tpl_rva = at + pos
    pos += len(tpl)
    blob += bytes(pos - len(blob))
    blob[tpl_rva - at:tpl_rva - at + len(tpl)] = tpl
    cb_va = callbacks_va if callbacks_rva is None else base + callbacks_rva
    struct.pack_into("<4" + pfmt[1], blob, 0, base + tpl_rva, base + tpl_rva + len(tpl), base + index_rva, cb_va)
    struct.pack_into("<II", blob, 4 * ptr, 0, characteristics)
    cells = [at + k * ptr for k in range(4) if not (k == 3 and cb_va == 0)]
    sec = NewSection(TLS, bytes(blob), pe.READ_WRITE, len(blob))
    return TlsBuild(sec, TlsSlot(index_rva, slot_off), at, dir_size, cells, merged)


# ---------------------------------------------------------------- relocations

def update_relocations(table: pe.RelocationTable, sites: Iterable[tuple[int, int]],
                       added: Iterable[tuple[int, int]]) -> tuple[pe.RelocationTable, int, int]:
    """Cleaning stage then inserting stage; returns (table, deleted, added)."""
    sites = sorted(sites)
    entries = table.addresses()
    keep = []
    deleted = 0
    starts = [s for s, _ in sites]
    for rva, kind in entries:
        k = bisect.bisect_right(starts, rva) - 1
        if k >= 0 and rva < sites[k][0] + sites[k][1]:
            deleted += 1
            continue
        keep.append((rva, kind))
    added = list(added)
    merged = sorted(set(keep) | set(added))
    return pe.RelocationTable.from_addresses(merged), deleted, len(added)


# ---------------------------------------------------------------- driver

def _next_rva(img: pe.PeImage) -> int:
    last = img.sections[-1]
    return pe.align_up(last.virtual_address + last.mapped_size, img.section_alignment)


def _add(img: pe.PeImage, sec: NewSection, report: RewriteReport) -> pe.Section:
    s = img.add_section(sec.name, max(sec.virtual_size, len(sec.data), 1), sec.characteristics, sec.data)
    report.new_sections.append((sec.name, s.virtual_address, s.virtual_size))
    return s


def _text_sections(img: pe.PeImage) -> list[pe.Section]:
    return [s for s in img.sections if s.executable and not s.name_str.startswith(".spot")]


def instrument(img: pe.PeImage, plan: InstrumentationPlan, *,
               analysis: Optional[tuple[BlockList, Sequence[DecodedInsn]]] = None
               ) -> tuple[pe.PeImage, RewriteReport]:
    """Rewrite a copy of ``img`` according to ``plan``."""
    if analysis is None:
        analysis = analyze(img)
    blocks, insns = analysis
    out = img.clone()
    out.strip_certificate()
    report = RewriteReport(mode=plan.mode.value, thread_mode=plan.thread_mode.value,
                           map_size_log2=plan.map_size_log2, linear=plan.linear_coverage,
                           plan_points=len(plan.points))
    fb = build_feedback_section(plan)
    s1 = _add(out, fb, report)
    map_size = 1 << plan.map_size_log2
    feedback = FeedbackLayout(s1.virtual_address, map_size, fb.virtual_size - HEADER_SIZE - map_size - 8)
    report.feedback_rva = feedback.rva
    tls_slot = None
    added: list[tuple[int, int]] = []
    if plan.thread_mode is ThreadMode.Multi:
        tb = build_tls_section(out, _next_rva(out))
        s2 = _add(out, tb.section, report)
        assert s2.virtual_address == tb.dir_rva
        out.dirs[pe.DIR_TLS] = pe.DataDirectory(tb.dir_rva, tb.dir_size)
        tls_slot = tb.slot
        report.tls_slot_offset = tb.slot.offset
        report.tls_created = not tb.merged
        added += [(c, _ptr_kind(img.arch.ptr_size)) for c in tb.reloc_cells]
    s0_rva = _next_rva(out)
    if plan.mode is RewriteMode.Jump:
        code, sites, more = _jump_mode(out, plan, blocks, insns, feedback, tls_slot, s0_rva, report)
    else:
        code, sites, more = _inline_mode(out, plan, blocks, insns, feedback, tls_slot, s0_rva, report)
    added += more
    old_dir = img.directory(pe.DIR_BASERELOC)
    new_table = None
    if old_dir is not None and old_dir.size and (sites or added):
        new_table, report.relocs_deleted, report.relocs_added = update_relocations(
            img.relocations, sites, added)
    code = bytearray(code)
    table_rva = None
    if new_table is not None:
        code += bytes(-len(code) % 4)
        table_rva = s0_rva + len(code)
        code += new_table.encode()
    s0 = _add(out, NewSection(TRAMPOLINES, bytes(code), pe.EXECUTE_READ, len(code)), report)
    assert s0.virtual_address == s0_rva
    if new_table is not None:
        out.set_relocations(new_table, table_rva)
    pe.update_checksum(out)
    return out, report


def _jump_mode(out: pe.PeImage, plan: InstrumentationPlan, blocks: BlockList, insns: Sequence[DecodedInsn],
               feedback: FeedbackLayout, tls_slot: Optional[TlsSlot], at: int, report: RewriteReport):
    by_rva = {i.rva: i for i in insns}
    leaders = set(blocks.starts()) | set(entry_points(out)) | {t for jt in blocks.jump_tables for t in jt.targets}
    cells = [a for a, _ in out.relocations.addresses()]
    code = bytearray()
    layouts: list[TrampolineLayout] = []
    bits = out.arch.bits
    for idx, p in enumerate(plan.points):
        head = p.block.start_rva
        try:
            site = plan_patch_site(p.block, by_rva, leaders)
        except TooSmall:
            report.skipped_too_small += 1
            report.skipped.append((head, "too_small"))
            continue
        lo, hi = site.head, site.head + site.size
        try:
            lay = emit_trampoline(p, plan.thread_mode, feedback, tls_slot, site=site, at=at + len(code),
                                  bits=bits, image_base=out.image_base,
                                  linear_index=idx if plan.linear_coverage else None,
                                  reloc_cells=[c for c in cells if lo <= c < hi])
        except UnrelocatableInsn as exc:
            report.skipped_unrelocatable += 1
            report.skipped.append((head, f"unrelocatable: {exc}"))
            continue
        code += lay.code
        layouts.append(lay)
        report.instrumented += 1
        report.expanded_with_neighbor += site.expanded
        report.points.append((head, p.id))
        report.patch_sites.append((head, site.size))
        report.trampolines[head] = lay.trampoline_rva
        report.clone_map[head] = head
    for lay in layouts:
        out.write(lay.point_rva, lay.patch)
    sites = [(lay.point_rva, lay.site_size) for lay in layouts]
    added = [r for lay in layouts for r in lay.relocs]
    return bytes(code), sites, added


def _inline_mode(out: pe.PeImage, plan: InstrumentationPlan, blocks: BlockList, insns: Sequence[DecodedInsn],
                 feedback: FeedbackLayout, tls_slot: Optional[TlsSlot], at: int, report: RewriteReport):
    bits = out.arch.bits
    ptr = bits // 8
    base = out.image_base
    texts = _text_sections(out)
    in_text = lambda rva: any(s.contains_rva(rva) for s in texts)  # noqa: E731
    order = sorted((i for i in insns if in_text(i.rva)), key=lambda i: i.rva)
    heads = {p.block.start_rva: (k, p) for k, p in enumerate(plan.points)}
    stub_len = {}
    for h, (k, p) in heads.items():
        code, _ = assemble_stub(bits, p.id, plan.thread_mode, feedback, tls_slot, at, base,
                                k if plan.linear_coverage else None)
        stub_len[h] = len(code)
    reloc_cells = {a: kind for a, kind in out.relocations.addresses()}

    long: set[int] = set()
    while True:
        place: dict[int, int] = {}
        entry: dict[int, int] = {}
        pos = at
        for ins in order:
            if ins.rva in heads:
                entry[ins.rva] = pos
                pos += stub_len[ins.rva]
            else:
                entry[ins.rva] = pos
            place[ins.rva] = pos
            pos += moved_length(ins, ins.rva in long)
        grew = False
        for ins in order:
            if ins.rel_size == 1 and ins.rva not in long:
                tgt = entry.get(ins.target, ins.target)
                rel = tgt - (place[ins.rva] + ins.length)
                if not -128 <= rel <= 127:
                    long.add(ins.rva)
                    grew = True
        if not grew:
            break
    end_code = pos

    # PE64 relative jump tables are cloned next to the code
    table_map: dict[int, int] = {}
    tables = bytearray()
    pos = (end_code + 15) & ~15
    for jt in blocks.jump_tables:
        if jt.entry_kind is not EntryKind.Rva32 or jt.table_rva in table_map:
            continue
        new = pos + len(tables)
        table_map[jt.table_rva] = new
        for t in jt.targets:
            tables += struct.pack("<i", entry.get(t, t) - new)

    data_map = dict(entry)
    data_map.update(table_map)
    code = bytearray()
    added: list[tuple[int, int]] = []
    cells = sorted(reloc_cells)
    for ins in order:
        here = at + len(code)
        if ins.rva in heads:
            k, p = heads[ins.rva]
            stub, srel = assemble_stub(bits, p.id, plan.thread_mode, feedback, tls_slot, here, base,
                                       k if plan.linear_coverage else None)
            code += stub
            added += [(here + o, pe.RelocKind.HIGHLOW) for o in srel]
            report.points.append((ins.rva, p.id))
            here += len(stub)
        assert here == place[ins.rva]
        enc = bytearray(move_insn(ins, here, long=ins.rva in long, code_map=entry, data_map=data_map))
        lo = bisect.bisect_left(cells, ins.rva)
        hi = bisect.bisect_left(cells, ins.end)
        if hi > lo:
            offs = _reloc_offsets(ins, cells[lo:hi], ptr)
            if len(enc) != ins.length:
                raise UnrelocatableInsn(f"relocated branch operand at {ins.rva:#x}")
            for o, size in offs:
                val = int.from_bytes(enc[o:o + size], "little") - base
                if val in entry:
                    enc[o:o + size] = (base + entry[val]).to_bytes(size, "little")
                added.append((here + o, _ptr_kind(size)))
        code += enc
    assert at + len(code) == end_code
    if tables:
        code += b"\xcc" * (pos - end_code)
        code += tables

    # redirect entry, exports and relocation-backed code pointers outside the text
    if out.entry_point in entry:
        out.entry_point = entry[out.entry_point]
    for slot in pe.export_slots(out):
        v = struct.unpack("<I", out.read(slot, 4))[0]
        if v in entry:
            out.write(slot, struct.pack("<I", entry[v]))
            report.redirected_cells.append((slot, 4))
    for c, kind in sorted(reloc_cells.items()):
        if in_text(c) or kind not in (pe.RelocKind.HIGHLOW, pe.RelocKind.DIR64):
            continue
        size = 4 if kind == pe.RelocKind.HIGHLOW else 8
        sec = out.section_for_rva(c)
        if sec is None or sec.name_str.startswith(".spot") or c - sec.virtual_address + size > sec.raw_size:
            continue
        v = int.from_bytes(out.read(c, size), "little") - base
        if v in entry:
            out.write(c, (base + entry[v]).to_bytes(size, "little"))
            report.redirected_cells.append((c, size))

    report.instrumented = len(heads)
    for b in blocks:
        if b.start_rva in entry:
            report.clone_map[b.start_rva] = entry[b.start_rva]
    for h in heads:
        report.trampolines[h] = entry[h]
    return bytes(code), [], added
