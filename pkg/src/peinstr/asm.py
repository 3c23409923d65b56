"""Minimal x86/x64 assembler for the instruction subset the sandbox executes.

Used to build trampoline stubs and synthetic fixture programs.  Branches to
labels are relaxed (rel8 when it fits, rel32 otherwise) unless a size is
forced.  Absolute references to labels produce relocation records.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

EAX, ECX, EDX, EBX, ESP, EBP, ESI, EDI = range(8)
R8, R9, R10, R11, R12, R13, R14, R15 = range(8, 16)

CC = {
    "o": 0, "no": 1, "b": 2, "ae": 3, "e": 4, "ne": 5, "be": 6, "a": 7,
    "s": 8, "ns": 9, "p": 0xA, "np": 0xB, "l": 0xC, "ge": 0xD, "le": 0xE, "g": 0xF,
}
ALU = {"add": 0, "or": 1, "and": 4, "sub": 5, "xor": 6, "cmp": 7}


class AsmError(Exception):
    pass


@dataclass(frozen=True)
class Ref:
    """Symbolic address: ``label`` + ``addend``."""

    label: str
    addend: int = 0


@dataclass(frozen=True)
class Mem:
    base: Optional[int] = None
    index: Optional[int] = None
    scale: int = 1
    disp: int = 0
    ref: Optional[Ref] = None  # absolute (32-bit) or rip-relative (64-bit) symbol
    absolute: bool = False  # force SIB absolute form in 64-bit mode
    seg: Optional[int] = None  # segment override prefix byte


Imm = Union[int, Ref]


@dataclass
class _Fixup:
    offset: int  # within the item
    size: int
    kind: str  # 'abs', 'rip', 'rel'
    ref: Ref
    end: int  # instruction end offset within the item (for rip/rel)


@dataclass
class _Item:
    data: bytearray
    fixups: list[_Fixup] = field(default_factory=list)
    # branch items are laid out by the relaxer
    branch: Optional[tuple[str, int, Ref, Optional[int]]] = None  # (kind, cc, target, forced size)
    label: Optional[str] = None
    align: int = 0


@dataclass
class Assembled:
    code: bytes
    labels: dict[str, int]  # label -> offset
    relocs: list[tuple[int, int]]  # (offset, size) of absolute cells
    insn_starts: list[int]


def _fits8(v: int) -> bool:
    return -128 <= v <= 127


class Asm:
    def __init__(self, bits: int = 32):
        if bits not in (32, 64):
            raise ValueError(bits)
        self.bits = bits
        self.items: list[_Item] = []

    # ------------------------------------------------------------------ plumbing
    def label(self, name: str) -> "Asm":
        self.items.append(_Item(bytearray(), label=name))
        return self

    def align(self, n: int) -> "Asm":
        self.items.append(_Item(bytearray(), align=n))
        return self

    def raw(self, data: bytes) -> "Asm":
        self.items.append(_Item(bytearray(data)))
        return self

    def _rex(self, w: bool, reg: int = 0, index: int = 0, base: int = 0, force: bool = False) -> bytes:
        r = 0x40 | (8 if w else 0) | ((reg >> 3) << 2) | ((index >> 3) << 1) | (base >> 3)
        if self.bits == 32:
            if r != 0x40:
                raise AsmError("REX-only operand in 32-bit mode")
            return b""
        return bytes([r]) if (r != 0x40 or force) else b""

    def _modrm(self, reg: int, rm: Union[int, Mem]) -> tuple[bytes, list[tuple[int, int, str, Ref]]]:
        """ModRM/SIB/disp bytes and fixups as (offset-in-bytes, size, kind, ref)."""
        reg &= 7
        if isinstance(rm, int):
            return bytes([0xC0 | (reg << 3) | (rm & 7)]), []
        m = rm
        fix: list[tuple[int, int, str, Ref]] = []
        if m.base is None and m.index is None:
            if self.bits == 64 and not m.absolute:
                out = bytes([(reg << 3) | 5]) + m.disp.to_bytes(4, "little", signed=True)
                if m.ref:
                    fix.append((1, 4, "rip", m.ref))
                return out, fix
            if self.bits == 64:
                out = bytes([(reg << 3) | 4, 0x25]) + (m.disp & 0xFFFFFFFF).to_bytes(4, "little")
                if m.ref:
                    fix.append((2, 4, "abs", m.ref))
                return out, fix
            out = bytes([(reg << 3) | 5]) + (m.disp & 0xFFFFFFFF).to_bytes(4, "little")
            if m.ref:
                fix.append((1, 4, "abs", m.ref))
            return out, fix
        need_disp32 = m.ref is not None
        if m.index is None and m.base is not None and (m.base & 7) != 4:
            base = m.base & 7
            if not need_disp32 and m.disp == 0 and base != 5:
                return bytes([(reg << 3) | base]), []
            if not need_disp32 and _fits8(m.disp):
                return bytes([0x40 | (reg << 3) | base, m.disp & 0xFF]), []
            out = bytes([0x80 | (reg << 3) | base]) + (m.disp & 0xFFFFFFFF).to_bytes(4, "little")
            if m.ref:
                fix.append((1, 4, "abs", m.ref))
            return out, fix
        scale_bits = {1: 0, 2: 1, 4: 2, 8: 3}[m.scale]
        index = 4 if m.index is None else m.index & 7
        if m.index is not None and m.index == ESP:
            raise AsmError("esp cannot be an index")
        if m.base is None:
            sib = (scale_bits << 6) | (index << 3) | 5
            out = bytes([(reg << 3) | 4, sib]) + (m.disp & 0xFFFFFFFF).to_bytes(4, "little")
            if m.ref:
                fix.append((2, 4, "abs", m.ref))
            return out, fix
        base = m.base & 7
        sib = (scale_bits << 6) | (index << 3) | base
        if not need_disp32 and m.disp == 0 and base != 5:
            return bytes([(reg << 3) | 4, sib]), []
        if not need_disp32 and _fits8(m.disp):
            return bytes([0x44 | (reg << 3), sib, m.disp & 0xFF]), []
        out = bytes([0x84 | (reg << 3), sib]) + (m.disp & 0xFFFFFFFF).to_bytes(4, "little")
        if m.ref:
            fix.append((2, 4, "abs", m.ref))
        return out, fix

    def _op(self, opcode: bytes, reg: int, rm: Union[int, Mem], w: bool = False,
            imm: Optional[Imm] = None, imm_size: int = 0, byte_reg: bool = False) -> "Asm":
        prefix = b""
        idx = base = 0
        if isinstance(rm, Mem):
            if rm.seg is not None:
                prefix += bytes([rm.seg])
            idx = rm.index or 0
            base = rm.base or 0
        else:
            base = rm
        if byte_reg and (reg & 7) >= 4:
            raise AsmError("byte operands limited to al/cl/dl/bl")
        rex = self._rex(w, reg, idx, base)
        body, fix = self._modrm(reg, rm)
        data = bytearray(prefix + rex + opcode)
        head = len(data)
        data += body
        fixups = [_Fixup(head + o, s, k, r, 0) for o, s, k, r in fix]
        if imm is not None:
            if isinstance(imm, Ref):
                fixups.append(_Fixup(len(data), imm_size, "abs", imm, 0))
                data += bytes(imm_size)
            else:
                data += (imm & ((1 << (8 * imm_size)) - 1)).to_bytes(imm_size, "little")
        for f in fixups:
            f.end = len(data)
        self.items.append(_Item(data, fixups))
        return self

    # ------------------------------------------------------------------ data movement
    def mov_rr(self, dst: int, src: int, w: bool = False) -> "Asm":
        return self._op(b"\x89", src, dst, w)

    def mov_ri(self, dst: int, imm: Imm, w: bool = False) -> "Asm":
        """mov reg, imm; with ``w`` in 64-bit mode, Ref immediates use the imm64 form."""
        if w and self.bits == 64:
            if isinstance(imm, Ref) or not (-(1 << 31) <= imm < (1 << 31)):
                rex = self._rex(True, 0, 0, dst)
                data = bytearray(rex + bytes([0xB8 + (dst & 7)]))
                fix = []
                if isinstance(imm, Ref):
                    fix.append(_Fixup(len(data), 8, "abs", imm, len(data) + 8))
                    data += bytes(8)
                else:
                    data += (imm & (2**64 - 1)).to_bytes(8, "little")
                self.items.append(_Item(data, fix))
                return self
            return self._op(b"\xc7", 0, dst, True, imm, 4)
        rex = self._rex(False, 0, 0, dst)
        data = bytearray(rex + bytes([0xB8 + (dst & 7)]))
        fix = []
        if isinstance(imm, Ref):
            fix.append(_Fixup(len(data), 4, "abs", imm, len(data) + 4))
            data += bytes(4)
        else:
            data += (imm & 0xFFFFFFFF).to_bytes(4, "little")
        self.items.append(_Item(data, fix))
        return self

    def mov_rm(self, dst: int, src: Mem, w: bool = False) -> "Asm":
        return self._op(b"\x8b", dst, src, w)

    def mov_mr(self, dst: Mem, src: int, w: bool = False) -> "Asm":
        return self._op(b"\x89", src, dst, w)

    def mov_mi(self, dst: Mem, imm: Imm, w: bool = False) -> "Asm":
        return self._op(b"\xc7", 0, dst, w, imm, 4)

    def mov_m8r(self, dst: Mem, src: int) -> "Asm":
        return self._op(b"\x88", src, dst, byte_reg=True)

    def mov_m8i(self, dst: Mem, imm: int) -> "Asm":
        return self._op(b"\xc6", 0, dst, imm=imm, imm_size=1)

    def movzx8(self, dst: int, src: Union[int, Mem]) -> "Asm":
        return self._op(b"\x0f\xb6", dst, src, byte_reg=isinstance(src, int))

    def movsx8(self, dst: int, src: Union[int, Mem]) -> "Asm":
        return self._op(b"\x0f\xbe", dst, src, byte_reg=isinstance(src, int))

    def movsxd(self, dst: int, src: Union[int, Mem]) -> "Asm":
        if self.bits != 64:
            raise AsmError("movsxd is 64-bit only")
        return self._op(b"\x63", dst, src, True)

    def lea(self, dst: int, src: Mem, w: bool = False) -> "Asm":
        return self._op(b"\x8d", dst, src, w)

    def push(self, reg: int) -> "Asm":
        return self.raw(self._rex(False, 0, 0, reg) + bytes([0x50 + (reg & 7)]))

    def pop(self, reg: int) -> "Asm":
        return self.raw(self._rex(False, 0, 0, reg) + bytes([0x58 + (reg & 7)]))

    def pushf(self) -> "Asm":
        return self.raw(b"\x9c")

    def popf(self) -> "Asm":
        return self.raw(b"\x9d")

    def nop(self, n: int = 1) -> "Asm":
        return self.raw(b"\x90" * n)

    # ------------------------------------------------------------------ arithmetic
    def alu_rr(self, op: str, dst: int, src: int, w: bool = False) -> "Asm":
        return self._op(bytes([ALU[op] * 8 + 1]), src, dst, w)

    def alu_ri(self, op: str, dst: Union[int, Mem], imm: Imm, w: bool = False) -> "Asm":
        if isinstance(imm, int) and _fits8(imm):
            return self._op(b"\x83", ALU[op], dst, w, imm, 1)
        return self._op(b"\x81", ALU[op], dst, w, imm, 4)

    def alu_rm(self, op: str, dst: int, src: Mem, w: bool = False) -> "Asm":
        return self._op(bytes([ALU[op] * 8 + 3]), dst, src, w)

    def alu_mr(self, op: str, dst: Mem, src: int, w: bool = False) -> "Asm":
        return self._op(bytes([ALU[op] * 8 + 1]), src, dst, w)

    def test_rr(self, a: int, b: int, w: bool = False) -> "Asm":
        return self._op(b"\x85", b, a, w)

    def test_ri(self, a: int, imm: int, w: bool = False) -> "Asm":
        return self._op(b"\xf7", 0, a, w, imm, 4)

    def inc(self, dst: Union[int, Mem], w: bool = False) -> "Asm":
        if isinstance(dst, int) and self.bits == 32:
            return self.raw(bytes([0x40 + dst]))
        return self._op(b"\xff", 0, dst, w)

    def dec(self, dst: Union[int, Mem], w: bool = False) -> "Asm":
        if isinstance(dst, int) and self.bits == 32:
            return self.raw(bytes([0x48 + dst]))
        return self._op(b"\xff", 1, dst, w)

    def inc8(self, dst: Mem) -> "Asm":
        return self._op(b"\xfe", 0, dst)

    def or8_mi(self, dst: Mem, imm: int) -> "Asm":
        return self._op(b"\x80", 1, dst, imm=imm, imm_size=1)

    # ------------------------------------------------------------------ control flow
    def jmp(self, target: Union[str, Ref], size: Optional[int] = None) -> "Asm":
        self.items.append(_Item(bytearray(), branch=("jmp", 0, _ref(target), size)))
        return self

    def jcc(self, cc: str, target: Union[str, Ref], size: Optional[int] = None) -> "Asm":
        self.items.append(_Item(bytearray(), branch=("jcc", CC[cc], _ref(target), size)))
        return self

    def call(self, target: Union[str, Ref]) -> "Asm":
        self.items.append(_Item(bytearray(), branch=("call", 0, _ref(target), 4)))
        return self

    def jmp_r(self, reg: int) -> "Asm":
        return self._op(b"\xff", 4, reg)

    def call_r(self, reg: int) -> "Asm":
        return self._op(b"\xff", 2, reg)

    def jmp_m(self, mem: Mem) -> "Asm":
        return self._op(b"\xff", 4, mem)

    def call_m(self, mem: Mem) -> "Asm":
        return self._op(b"\xff", 2, mem)

    def ret(self) -> "Asm":
        return self.raw(b"\xc3")

    # ------------------------------------------------------------------ layout
    def assemble(self, origin: int = 0, symbols: Optional[dict[str, int]] = None,
                 image_base: int = 0) -> Assembled:
        """Lay out at rva ``origin``.

        ``symbols`` maps external labels to RVAs.  Absolute fixups get
        ``image_base + rva``; rip-relative and branch fixups are RVA deltas.
        """
        symbols = dict(symbols or {})
        sizes: dict[int, int] = {}
        for i, it in enumerate(self.items):
            if it.branch:
                kind, _, _, forced = it.branch
                sizes[i] = forced or 1
        for _ in range(64):
            offsets, labels = self._layout(sizes)
            changed = False
            for i, it in enumerate(self.items):
                if not it.branch:
                    continue
                kind, cc, ref, forced = it.branch
                if forced:
                    continue
                tgt = _resolve(ref, labels, symbols, origin)
                if tgt is None:
                    if sizes[i] != 4:
                        sizes[i] = 4
                        changed = True
                    continue
                end = origin + offsets[i] + self._branch_len(kind, sizes[i])
                if sizes[i] == 1 and not _fits8(tgt - end):
                    sizes[i] = 4
                    changed = True
            if not changed:
                break
        offsets, labels = self._layout(sizes)
        out = bytearray()
        relocs: list[tuple[int, int]] = []
        starts: list[int] = []
        all_syms = {**symbols, **{k: origin + v for k, v in labels.items()}}
        for i, it in enumerate(self.items):
            pad = offsets[i] - len(out)
            if pad > 0:
                out += b"\xcc" * pad
            if it.branch:
                kind, cc, ref, _ = it.branch
                size = sizes[i]
                blen = self._branch_len(kind, size)
                tgt = _resolve(ref, labels, symbols, origin)
                if tgt is None:
                    raise AsmError(f"undefined label {ref.label}")
                rel = tgt - (origin + offsets[i] + blen)
                if size == 1 and not _fits8(rel):
                    raise AsmError(f"short branch to {ref.label} out of range")
                starts.append(len(out))
                if kind == "jmp":
                    op = b"\xeb" if size == 1 else b"\xe9"
                elif kind == "call":
                    op = b"\xe8"
                else:
                    op = bytes([0x70 + cc]) if size == 1 else bytes([0x0F, 0x80 + cc])
                out += op + rel.to_bytes(size, "little", signed=True)
                continue
            if not it.data:
                continue
            base = len(out)
            data = bytearray(it.data)
            for f in it.fixups:
                tgt = all_syms.get(f.ref.label)
                if tgt is None:
                    raise AsmError(f"undefined label {f.ref.label}")
                tgt += f.ref.addend
                if f.kind == "abs":
                    val = image_base + tgt
                    relocs.append((base + f.offset, f.size))
                else:
                    val = tgt - (origin + base + f.end)
                data[f.offset:f.offset + f.size] = (val & ((1 << (8 * f.size)) - 1)).to_bytes(f.size, "little")
            starts.append(base)
            out += data
        return Assembled(bytes(out), labels, relocs, starts)

    @staticmethod
    def _branch_len(kind: str, size: int) -> int:
        if size == 1:
            return 2
        return 6 if kind == "jcc" else 5

    def _layout(self, sizes: dict[int, int]) -> tuple[list[int], dict[str, int]]:
        offsets = []
        labels: dict[str, int] = {}
        pos = 0
        for i, it in enumerate(self.items):
            if it.align:
                pos = (pos + it.align - 1) // it.align * it.align
            offsets.append(pos)
            if it.label is not None:
                if it.label in labels:
                    raise AsmError(f"duplicate label {it.label}")
                labels[it.label] = pos
            if it.branch:
                pos += self._branch_len(it.branch[0], sizes[i])
            else:
                pos += len(it.data)
        return offsets, labels


def _ref(t: Union[str, Ref]) -> Ref:
    return Ref(t) if isinstance(t, str) else t


def _resolve(ref: Ref, labels: dict[str, int], symbols: dict[str, int], origin: int) -> Optional[int]:
    if ref.label in labels:
        return origin + labels[ref.label] + ref.addend
    if ref.label in symbols:
        return symbols[ref.label] + ref.addend
    return None
