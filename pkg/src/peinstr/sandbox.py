"""Deterministic interpreter for a small x86/x64 subset.

The interpreter decodes instructions on its own (it does not use
:mod:`peinstr.decode`) so that it can act as an independent oracle for the
rewriter.  Decoded instructions are compiled to closures and cached per
virtual address; code is never writable, so the cache never goes stale.

Supported: mov/movzx/movsx/movsxd/lea, add/or/and/sub/xor/cmp/test, inc/dec,
not/neg, shl/shr/sar, push/pop/pushf/popf, jmp/jcc/call/ret (direct and
indirect), loop/jcxz, nop, moffs loads/stores, fs/gs segment overrides.  Flags modelled: CF, ZF,
SF, OF.  Anything else faults with ``Unsupported``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import pe

PAGE = 0x1000
SENTINEL_32 = 0xFFFFF000
SENTINEL_64 = 0x00007FFFFFFF0000
STACK_32 = 0x00100000
STACK_64 = 0x0000000010000000
TEB_32 = 0x7FFD0000
TEB_64 = 0x000007FFFFFD0000
TEB_SIZE = 0x2000
TLS_ARRAY_OFFSET = {32: 0x2C, 64: 0x58}
TLS_ARRAY = 0x800  # per-thread slot array, inside the TEB page pair
TLS_BLOCK = 0x1000

FLAG_BASE = 0x202  # reserved bit 1 and IF
_CF, _ZF, _SF, _OF = 0x1, 0x40, 0x80, 0x800


class RelocOutOfRange(Exception):
    pass


class FaultKind(enum.Enum):
    Unmapped = "unmapped"
    WriteProtect = "write_protect"
    NotExecutable = "not_executable"
    Unsupported = "unsupported"
    Breakpoint = "breakpoint"


class ExitKind(enum.Enum):
    Running = "running"
    Returned = "returned"
    Fault = "fault"
    FuelExhausted = "fuel_exhausted"


@dataclass(frozen=True)
class Exit:
    kind: ExitKind
    fault: Optional[FaultKind] = None
    addr: Optional[int] = None

    def __str__(self) -> str:
        if self.kind is ExitKind.Fault:
            return f"Fault({self.fault.value}, {self.addr:#x})"
        return self.kind.value


RUNNING = Exit(ExitKind.Running)

# exception codes reported for faults, in the style of the target platform
EXCEPTION_CODES = {
    FaultKind.Unmapped: 0xC0000005,
    FaultKind.WriteProtect: 0xC0000005,
    FaultKind.NotExecutable: 0xC0000005,
    FaultKind.Unsupported: 0xC000001D,
    FaultKind.Breakpoint: 0x80000003,
}


class SandboxFault(Exception):
    def __init__(self, kind: FaultKind, addr: int):
        super().__init__(f"{kind.value} at {addr:#x}")
        self.kind = kind
        self.addr = addr


@dataclass
class Region:
    start: int
    end: int
    buf: bytearray | memoryview
    writable: bool
    executable: bool
    name: str


class Memory:
    def __init__(self) -> None:
        self.regions: list[Region] = []
        self._last: Optional[Region] = None

    def map(self, start: int, size: int, *, writable: bool, executable: bool = False, name: str = "",
            buf: Optional[bytearray | memoryview] = None) -> Region:
        if buf is None:
            buf = bytearray(size)
        elif len(buf) < size:
            raise ValueError(f"backing buffer for {name} too small")
        end = start + size
        for r in self.regions:
            if start < r.end and r.start < end:
                raise ValueError(f"region {name} overlaps {r.name}")
        reg = Region(start, end, buf, writable, executable, name)
        self.regions.append(reg)
        self.regions.sort(key=lambda r: r.start)
        return reg

    def region(self, name: str) -> Optional[Region]:
        for r in self.regions:
            if r.name == name:
                return r
        return None

    def find(self, addr: int, size: int = 1) -> Region:
        r = self._last
        if r is not None and r.start <= addr and addr + size <= r.end:
            return r
        for r in self.regions:
            if r.start <= addr and addr + size <= r.end:
                self._last = r
                return r
        raise SandboxFault(FaultKind.Unmapped, addr)

    def read(self, addr: int, size: int) -> int:
        r = self.find(addr, size)
        off = addr - r.start
        return int.from_bytes(r.buf[off:off + size], "little")

    def write(self, addr: int, size: int, value: int) -> None:
        r = self.find(addr, size)
        if not r.writable:
            raise SandboxFault(FaultKind.WriteProtect, addr)
        off = addr - r.start
        r.buf[off:off + size] = (value & ((1 << (8 * size)) - 1)).to_bytes(size, "little")

    def read_bytes(self, addr: int, size: int) -> bytes:
        r = self.find(addr, size)
        off = addr - r.start
        return bytes(r.buf[off:off + size])

    def write_bytes(self, addr: int, data: bytes, force: bool = False) -> None:
        r = self.find(addr, len(data))
        if not (r.writable or force):
            raise SandboxFault(FaultKind.WriteProtect, addr)
        off = addr - r.start
        r.buf[off:off + len(data)] = data

    def fetch(self, addr: int) -> bytes:
        r = self.find(addr, 1)
        if not r.executable:
            raise SandboxFault(FaultKind.NotExecutable, addr)
        off = addr - r.start
        return bytes(r.buf[off:off + 16])


@dataclass
class Thread:
    regs: list[int]
    pc: int
    fs_base: int = 0
    gs_base: int = 0
    cf: int = 0
    zf: int = 0
    sf: int = 0
    of: int = 0
    exit: Exit = RUNNING
    trace: list[int] = field(default_factory=list)
    at_head: bool = False

    @property
    def flags(self) -> int:
        return FLAG_BASE | (self.cf and _CF) | (self.zf and _ZF) | (self.sf and _SF) | (self.of and _OF)

    @flags.setter
    def flags(self, v: int) -> None:
        self.cf = 1 if v & _CF else 0
        self.zf = 1 if v & _ZF else 0
        self.sf = 1 if v & _SF else 0
        self.of = 1 if v & _OF else 0


@dataclass
class SandboxState:
    bits: int
    mem: Memory
    threads: list[Thread]
    base: int
    image_base: int
    sections: dict[str, tuple[int, int]]  # name -> (va, size)
    heads: frozenset[int] = frozenset()
    steps: int = 0
    current: int = 0
    stack_regions: list[str] = field(default_factory=list)
    _cache: dict[int, Callable[[Thread], None]] = field(default_factory=dict, repr=False)

    # single-thread conveniences
    @property
    def regs(self) -> list[int]:
        return self.threads[0].regs

    @property
    def pc(self) -> int:
        return self.threads[0].pc

    @property
    def exit(self) -> Exit:
        return self.threads[0].exit

    @property
    def trace(self) -> list[int]:
        return self.threads[0].trace

    @property
    def sentinel(self) -> int:
        return SENTINEL_32 if self.bits == 32 else SENTINEL_64

    def section_va(self, name: str) -> int:
        return self.sections[name][0]

    def section_bytes(self, name: str) -> bytes:
        va, size = self.sections[name]
        return self.mem.read_bytes(va, size)

    def rva_trace(self, thread: int = 0) -> list[int]:
        return [va - self.base for va in self.threads[thread].trace]


# ---------------------------------------------------------------- loading

def apply_relocations(img: pe.PeImage, read: Callable[[int, int], int], write: Callable[[int, int, int], None],
                      delta: int) -> int:
    """Apply base relocations through accessor callbacks; returns cells touched."""
    n = 0
    for rva, kind in img.relocations.addresses():
        if kind == pe.RelocKind.HIGHLOW:
            v = read(rva, 4) + delta
            if not 0 <= v < 1 << 32:
                raise RelocOutOfRange(f"HIGHLOW at {rva:#x} overflows")
            write(rva, 4, v)
        elif kind == pe.RelocKind.DIR64:
            write(rva, 8, (read(rva, 8) + delta) & ((1 << 64) - 1))
        else:
            raise RelocOutOfRange(f"unsupported relocation type {kind} at {rva:#x}")
        n += 1
    return n


def load_image(img: pe.PeImage, base: Optional[int] = None, *, heads: Iterable[int] = (),
               threads: int = 1, shm: Optional[memoryview | bytearray] = None,
               stack_size: int = 0x10000, entry: Optional[int] = None) -> SandboxState:
    """Map ``img`` at ``base`` with relocations applied.

    ``heads`` are VAs whose execution is recorded in the per-thread trace.
    When ``shm`` is given the feedback section is backed by that buffer
    instead of private memory.
    """
    img.validate()
    bits = img.arch.bits
    base = img.image_base if base is None else base
    mem = Memory()
    salign = img.section_alignment
    hdr_size = min([pe.align_up(img.headers_end(), PAGE)] + [x.virtual_address for x in img.sections])
    mem.map(base, hdr_size, writable=False, name="<headers>",
            buf=bytearray(bytes(img.raw[:hdr_size]).ljust(hdr_size, b"\0")))
    secs: dict[str, tuple[int, int]] = {}
    bufs: dict[str, tuple[pe.Section, bytearray]] = {}
    for s in img.sections:
        size = pe.align_up(max(s.virtual_size, len(s.data), 1), max(PAGE, min(salign, PAGE)))
        buf = bytearray(size)
        n = min(len(s.data), max(s.virtual_size, len(s.data)))
        buf[:n] = s.data[:n]
        bufs[s.name_str] = (s, buf)
        secs[s.name_str] = (base + s.virtual_address, size)

    def locate(rva: int, size: int) -> tuple[bytearray, int]:
        for s, buf in bufs.values():
            off = rva - s.virtual_address
            if 0 <= off and off + size <= len(buf):
                return buf, off
        raise RelocOutOfRange(f"relocation target {rva:#x} outside the image")

    def rd(rva: int, size: int) -> int:
        buf, off = locate(rva, size)
        return int.from_bytes(buf[off:off + size], "little")

    def wr(rva: int, size: int, v: int) -> None:
        buf, off = locate(rva, size)
        buf[off:off + size] = v.to_bytes(size, "little")

    delta = base - img.image_base
    if delta:
        apply_relocations(img, rd, wr, delta)
    for name, (s, buf) in bufs.items():
        backing: bytearray | memoryview = buf
        size = len(buf)
        if shm is not None and name == ".spot1":
            if len(shm) < s.virtual_size:
                raise ValueError("shared coverage buffer smaller than the feedback section")
            size = min(size, len(shm))
            backing = memoryview(shm)[:size]
        mem.map(base + s.virtual_address, size, writable=s.writable, executable=s.executable,
                name=name, buf=backing)

    ptr = bits // 8
    sentinel = SENTINEL_32 if bits == 32 else SENTINEL_64
    stack_base = STACK_32 if bits == 32 else STACK_64
    teb_base = TEB_32 if bits == 32 else TEB_64
    tls = img.directory(pe.DIR_TLS)
    tls_info = None
    if tls is not None and tls.size:
        fmt = (4, 4, 4, 4) if bits == 32 else (8, 8, 8, 8)
        vals = []
        off = 0
        for sz in fmt:
            vals.append(rd(tls.rva + off, sz))
            off += sz
        zero_fill = rd(tls.rva + off, 4)
        start, end, index_va = vals[0], vals[1], vals[2]
        template = mem.read_bytes(start, end - start) if end > start else b""
        ir = mem.find(index_va, 4)
        ir.buf[index_va - ir.start:index_va - ir.start + 4] = (0).to_bytes(4, "little")
        tls_info = template + bytes(zero_fill)

    state_threads = []
    stack_names = []
    ep = img.entry_point if entry is None else entry
    for k in range(threads):
        lo = stack_base + k * (stack_size + PAGE)
        name = f"<stack{k}>"
        mem.map(lo, stack_size, writable=True, name=name)
        stack_names.append(name)
        sp = lo + stack_size - 2 * ptr
        mem.write(sp, ptr, sentinel)
        regs = [0] * (16 if bits == 64 else 8)
        regs[4] = sp
        t = Thread(regs, base + ep)
        teb = teb_base - k * TEB_SIZE
        mem.map(teb, TEB_SIZE, writable=True, name=f"<teb{k}>")
        if tls_info is not None:
            block = teb + TLS_BLOCK
            array = teb + TLS_ARRAY
            mem.write_bytes(block, tls_info)
            mem.write(array, ptr, block)
            mem.write(teb + TLS_ARRAY_OFFSET[bits], ptr, array)
        mem.write(teb + (0x18 if bits == 32 else 0x30), ptr, teb)
        if bits == 32:
            t.fs_base = teb
        else:
            t.gs_base = teb
        state_threads.append(t)
    return SandboxState(bits, mem, state_threads, base, img.image_base, secs, frozenset(heads),
                        stack_regions=stack_names)


@dataclass
class Snapshot:
    memory: dict[str, bytes]
    threads: list[tuple]


def snapshot(state: SandboxState) -> Snapshot:
    """Contents of the writable mappings plus thread registers, for cheap resets."""
    mem = {r.name: bytes(r.buf[:r.end - r.start]) for r in state.mem.regions if r.writable}
    ths = [(list(t.regs), t.pc, t.fs_base, t.gs_base, t.flags) for t in state.threads]
    return Snapshot(mem, ths)


def restore(state: SandboxState, snap: Snapshot) -> SandboxState:
    """Rewind ``state`` to ``snap``; compiled code stays cached (code is read-only)."""
    for r in state.mem.regions:
        saved = snap.memory.get(r.name)
        if saved is not None:
            r.buf[:len(saved)] = saved
    for t, (regs, pc, fs, gs, flags) in zip(state.threads, snap.threads):
        t.regs[:] = regs
        t.pc, t.fs_base, t.gs_base, t.flags = pc, fs, gs, flags
        t.exit = RUNNING
        t.trace = []
        t.at_head = False
    state.steps = 0
    state.current = 0
    return state


# ---------------------------------------------------------------- execution

_B8 = ["al", "cl", "dl", "bl", "ah", "ch", "dh", "bh"]


class _Decoder:
    """Compile one instruction at a VA into a closure."""

    def __init__(self, st: SandboxState):
        self.st = st
        self.mem = st.mem
        self.bits = st.bits
        self.amask = (1 << st.bits) - 1

    # register access -----------------------------------------------------
    def getter(self, r: int, size: int, rex: int) -> Callable[[Thread], int]:
        if size == 8:
            if r >= 4 and not rex and r < 8:
                return lambda t: (t.regs[r - 4] >> 8) & 0xFF
            return lambda t: t.regs[r] & 0xFF
        m = (1 << size) - 1
        return lambda t: t.regs[r] & m

    def setter(self, r: int, size: int, rex: int) -> Callable[[Thread, int], None]:
        if size == 8:
            if r >= 4 and not rex and r < 8:
                def s8h(t, v, q=r - 4):
                    t.regs[q] = (t.regs[q] & ~0xFF00) | ((v & 0xFF) << 8)
                return s8h

            def s8(t, v):
                t.regs[r] = (t.regs[r] & ~0xFF) | (v & 0xFF)
            return s8
        m = (1 << size) - 1

        def s(t, v):
            t.regs[r] = v & m
        return s

    # operands ------------------------------------------------------------
    def modrm(self, code: bytes, p: int, rex: int):
        b = code[p]
        p += 1
        mod, reg, rm = b >> 6, (b >> 3) & 7, b & 7
        reg |= (rex & 4) << 1
        if mod == 3:
            return ("r", rm | ((rex & 1) << 3)), reg, p
        base = index = None
        scale = 1
        rip = False
        if rm == 4:
            sib = code[p]
            p += 1
            scale = 1 << (sib >> 6)
            idx = ((sib >> 3) & 7) | ((rex & 2) << 2)
            if idx != 4:
                index = idx
            bb = sib & 7
            if bb == 5 and mod == 0:
                disp = int.from_bytes(code[p:p + 4], "little", signed=True)
                p += 4
            else:
                base = bb | ((rex & 1) << 3)
                disp = 0
        elif rm == 5 and mod == 0:
            disp = int.from_bytes(code[p:p + 4], "little", signed=True)
            p += 4
            rip = self.bits == 64
        else:
            base = rm | ((rex & 1) << 3)
            disp = 0
        if mod == 1:
            disp = int.from_bytes(code[p:p + 1], "little", signed=True)
            p += 1
        elif mod == 2:
            disp = int.from_bytes(code[p:p + 4], "little", signed=True)
            p += 4
        return ("m", base, index, scale, disp, rip), reg, p

    def ea(self, desc, seg: Optional[int], end: int) -> Callable[[Thread], int]:
        _, base, index, scale, disp, rip = desc
        mask = self.amask
        if rip:
            const = (end + disp) & mask
            if seg is None:
                return lambda t: const
            base, index, disp = None, None, const
        segf = None
        if seg == 0x64:
            segf = "fs_base"
        elif seg == 0x65:
            segf = "gs_base"
        if segf is not None:
            def f(t, b=base, i=index, s=scale, d=disp, sf=segf):
                a = d + getattr(t, sf)
                if b is not None:
                    a += t.regs[b]
                if i is not None:
                    a += t.regs[i] * s
                return a & mask
            return f
        if index is None:
            if base is None:
                c = disp & mask
                return lambda t: c
            return lambda t: (t.regs[base] + disp) & mask
        if base is None:
            return lambda t: (t.regs[index] * scale + disp) & mask
        return lambda t: (t.regs[base] + t.regs[index] * scale + disp) & mask

    def rm_access(self, desc, size: int, rex: int, seg, end: int):
        if desc[0] == "r":
            return self.getter(desc[1], size, rex), self.setter(desc[1], size, rex), None
        ea = self.ea(desc, seg, end)
        mem = self.mem
        n = size // 8
        return (lambda t: mem.read(ea(t), n)), (lambda t, v: mem.write(ea(t), n, v)), ea

    # main ----------------------------------------------------------------
    def compile(self, va: int) -> Callable[[Thread], None]:
        code = self.mem.fetch(va)
        try:
            return self._compile(code, va)
        except IndexError:
            raise SandboxFault(FaultKind.Unmapped, va + len(code)) from None

    def _compile(self, code: bytes, va: int) -> Callable[[Thread], None]:
        bits = self.bits
        mem = self.mem
        amask = self.amask
        p = 0
        seg = None
        while code[p] in (0x64, 0x65):
            seg = code[p]
            p += 1
        if code[p] in (0x66, 0x67, 0xF0, 0xF2, 0xF3, 0x26, 0x2E, 0x36, 0x3E):
            raise SandboxFault(FaultKind.Unsupported, va)
        rex = 0
        if bits == 64 and 0x40 <= code[p] <= 0x4F:
            rex = code[p]
            p += 1
        op = code[p]
        p += 1
        osz = 64 if rex & 8 else 32
        ptr = bits // 8
        unsupported = SandboxFault(FaultKind.Unsupported, va)

        def imm(size: int, signed: bool = True) -> int:
            nonlocal p
            v = int.from_bytes(code[p:p + size], "little", signed=signed)
            p += size
            return v

        # ALU r/m forms 00..3D
        if op < 0x40 and (op & 7) < 6 and op not in (0x0F,):
            aop = op >> 3
            form = op & 7
            if form in (0, 1, 2, 3):
                size = 8 if form in (0, 2) else osz
                desc, reg, p = self.modrm(code, p, rex)
                nxt = va + p
                g_rm, s_rm, _ = self.rm_access(desc, size, rex, seg, nxt)
                g_r, s_r = self.getter(reg, size, rex), self.setter(reg, size, rex)
                if form in (0, 1):
                    src, dst_g, dst_s = g_r, g_rm, s_rm
                else:
                    src, dst_g, dst_s = g_rm, g_r, s_r
                return self._alu(aop, dst_g, dst_s, src, size, nxt)
            size = 8 if form == 4 else osz
            val = imm(1 if form == 4 else 4)
            nxt = va + p
            return self._alu(aop, self.getter(0, size, rex), self.setter(0, size, rex),
                             lambda t, v=val & ((1 << size) - 1): v, size, nxt)

        if bits == 32 and 0x40 <= op <= 0x4F:
            r = op & 7
            nxt = va + p
            return self._incdec(op >= 0x48, self.getter(r, 32, 0), self.setter(r, 32, 0), 32, nxt)

        if 0x50 <= op <= 0x5F:
            r = (op & 7) | ((rex & 1) << 3)
            nxt = va + p
            if op < 0x58:
                def push(t):
                    v = t.regs[r]
                    sp = (t.regs[4] - ptr) & amask
                    mem.write(sp, ptr, v)
                    t.regs[4] = sp
                    t.pc = nxt
                return push

            def pop(t):
                sp = t.regs[4]
                v = mem.read(sp, ptr)
                t.regs[4] = (sp + ptr) & amask
                t.regs[r] = v
                t.pc = nxt
            return pop

        if op == 0x63 and bits == 64:
            desc, reg, p = self.modrm(code, p, rex)
            nxt = va + p
            g, _, _ = self.rm_access(desc, 32, rex, seg, nxt)
            s = self.setter(reg, osz, rex)

            def movsxd(t):
                v = g(t)
                if v & 0x80000000:
                    v -= 1 << 32
                s(t, v)
                t.pc = nxt
            return movsxd

        if op in (0x68, 0x6A):
            v = imm(4 if op == 0x68 else 1) & amask
            nxt = va + p

            def pushi(t):
                sp = (t.regs[4] - ptr) & amask
                mem.write(sp, ptr, v)
                t.regs[4] = sp
                t.pc = nxt
            return pushi

        if 0x70 <= op <= 0x7F or 0xE0 <= op <= 0xE3:
            rel = imm(1)
            nxt = va + p
            tgt = (nxt + rel) & amask
            if op >= 0xE0:
                return self._loop(op, tgt, nxt)
            return self._jcc(op & 0xF, tgt, nxt, va)

        if op in (0x80, 0x81, 0x83):
            size = 8 if op == 0x80 else osz
            desc, reg, p = self.modrm(code, p, rex)
            v = imm(4 if op == 0x81 else 1)
            nxt = va + p
            g, s, _ = self.rm_access(desc, size, rex, seg, nxt)
            return self._alu(reg & 7, g, s, lambda t, c=v & ((1 << size) - 1): c, size, nxt)

        if op in (0x84, 0x85):
            size = 8 if op == 0x84 else osz
            desc, reg, p = self.modrm(code, p, rex)
            nxt = va + p
            g, _, _ = self.rm_access(desc, size, rex, seg, nxt)
            return self._alu(8, g, None, self.getter(reg, size, rex), size, nxt)

        if op in (0xA8, 0xA9):
            size = 8 if op == 0xA8 else osz
            v = imm(1 if op == 0xA8 else 4) & ((1 << size) - 1)
            nxt = va + p
            return self._alu(8, self.getter(0, size, rex), None, lambda t: v, size, nxt)

        if op in (0xA1, 0xA3):
            addr = imm(ptr, False)
            nxt = va + p
            n = osz // 8
            segf = {0x64: "fs_base", 0x65: "gs_base"}.get(seg)

            def moffs(t):
                a = (addr + (getattr(t, segf) if segf else 0)) & amask
                if op == 0xA1:
                    t.regs[0] = mem.read(a, n)
                else:
                    mem.write(a, n, t.regs[0])
                t.pc = nxt
            return moffs

        if op in (0x88, 0x89, 0x8A, 0x8B):
            size = 8 if op in (0x88, 0x8A) else osz
            desc, reg, p = self.modrm(code, p, rex)
            nxt = va + p
            g_rm, s_rm, _ = self.rm_access(desc, size, rex, seg, nxt)
            g_r, s_r = self.getter(reg, size, rex), self.setter(reg, size, rex)
            if op in (0x88, 0x89):
                def mov_to_rm(t):
                    s_rm(t, g_r(t))
                    t.pc = nxt
                return mov_to_rm

            def mov_to_r(t):
                s_r(t, g_rm(t))
                t.pc = nxt
            return mov_to_r

        if op == 0x8D:
            desc, reg, p = self.modrm(code, p, rex)
            if desc[0] == "r":
                raise unsupported
            nxt = va + p
            ea = self.ea(desc, None, nxt)
            s = self.setter(reg, osz, rex)

            def lea(t):
                s(t, ea(t))
                t.pc = nxt
            return lea

        if op == 0x90 and not rex & 1:
            nxt = va + p

            def nop(t):
                t.pc = nxt
            return nop

        if op in (0x9C, 0x9D):
            nxt = va + p
            if op == 0x9C:
                def pushf(t):
                    sp = (t.regs[4] - ptr) & amask
                    mem.write(sp, ptr, t.flags)
                    t.regs[4] = sp
                    t.pc = nxt
                return pushf

            def popf(t):
                sp = t.regs[4]
                t.flags = mem.read(sp, ptr)
                t.regs[4] = (sp + ptr) & amask
                t.pc = nxt
            return popf

        if 0xB0 <= op <= 0xBF:
            r = (op & 7) | ((rex & 1) << 3)
            if op < 0xB8:
                v = imm(1, False)
                s = self.setter(r, 8, rex)
            else:
                v = imm(8 if osz == 64 else 4, False)
                s = self.setter(r, osz, rex)
            nxt = va + p

            def movi(t):
                s(t, v)
                t.pc = nxt
            return movi

        if op in (0xC1, 0xD1):
            desc, reg, p = self.modrm(code, p, rex)
            cnt = imm(1, False) if op == 0xC1 else 1
            nxt = va + p
            if reg & 7 not in (4, 5, 7):
                raise unsupported
            g, s, _ = self.rm_access(desc, osz, rex, seg, nxt)
            return self._shift(reg & 7, g, s, cnt & (0x3F if osz == 64 else 0x1F), osz, nxt)

        if op in (0xC2, 0xC3):
            extra = imm(2, False) if op == 0xC2 else 0

            def ret(t):
                sp = t.regs[4]
                t.pc = mem.read(sp, ptr)
                t.regs[4] = (sp + ptr + extra) & amask
            return ret

        if op in (0xC6, 0xC7):
            size = 8 if op == 0xC6 else osz
            desc, reg, p = self.modrm(code, p, rex)
            if reg & 7:
                raise unsupported
            v = imm(1 if op == 0xC6 else 4) & ((1 << size) - 1)
            nxt = va + p
            _, s, _ = self.rm_access(desc, size, rex, seg, nxt)

            def movmi(t):
                s(t, v)
                t.pc = nxt
            return movmi

        if op == 0xCC:
            def int3(t):
                raise SandboxFault(FaultKind.Breakpoint, va)
            return int3

        if op in (0xE8, 0xE9, 0xEB):
            rel = imm(1 if op == 0xEB else 4)
            nxt = va + p
            tgt = (nxt + rel) & amask
            if op == 0xE8:
                def call(t):
                    sp = (t.regs[4] - ptr) & amask
                    mem.write(sp, ptr, nxt)
                    t.regs[4] = sp
                    t.pc = tgt
                return call

            def jmp(t):
                t.pc = tgt
            return jmp

        if op == 0xF7:
            desc, reg, p = self.modrm(code, p, rex)
            sub = reg & 7
            if sub == 0:
                v = imm(4) & ((1 << osz) - 1)
                nxt = va + p
                g, _, _ = self.rm_access(desc, osz, rex, seg, nxt)
                return self._alu(8, g, None, lambda t: v, osz, nxt)
            nxt = va + p
            g, s, _ = self.rm_access(desc, osz, rex, seg, nxt)
            if sub == 2:
                def not_(t):
                    s(t, ~g(t))
                    t.pc = nxt
                return not_
            if sub == 3:
                return self._alu(5, lambda t: 0, s, g, osz, nxt)
            raise unsupported

        if op in (0xFE, 0xFF):
            desc, reg, p = self.modrm(code, p, rex)
            sub = reg & 7
            nxt = va + p
            if op == 0xFE:
                if sub > 1:
                    raise unsupported
                g, s, _ = self.rm_access(desc, 8, rex, seg, nxt)
                return self._incdec(sub == 1, g, s, 8, nxt)
            if sub in (0, 1):
                g, s, _ = self.rm_access(desc, osz, rex, seg, nxt)
                return self._incdec(sub == 1, g, s, osz, nxt)
            wsize = bits
            g, _, _ = self.rm_access(desc, wsize, rex | (8 if bits == 64 else 0), seg, nxt)
            if sub == 2:
                def call_ind(t):
                    tgt = g(t)
                    sp = (t.regs[4] - ptr) & amask
                    mem.write(sp, ptr, nxt)
                    t.regs[4] = sp
                    t.pc = tgt
                return call_ind
            if sub == 4:
                def jmp_ind(t):
                    t.pc = g(t)
                return jmp_ind
            if sub == 6:
                def push_m(t):
                    v = g(t)
                    sp = (t.regs[4] - ptr) & amask
                    mem.write(sp, ptr, v)
                    t.regs[4] = sp
                    t.pc = nxt
                return push_m
            raise unsupported

        if op == 0x0F:
            op2 = code[p]
            p += 1
            if 0x80 <= op2 <= 0x8F:
                rel = imm(4)
                nxt = va + p
                return self._jcc(op2 & 0xF, (nxt + rel) & amask, nxt, va)
            if op2 == 0x1F:
                desc, reg, p = self.modrm(code, p, rex)
                nxt = va + p

                def nopl(t):
                    t.pc = nxt
                return nopl
            if op2 in (0xB6, 0xB7, 0xBE, 0xBF):
                src = 8 if op2 in (0xB6, 0xBE) else 16
                desc, reg, p = self.modrm(code, p, rex)
                nxt = va + p
                if desc[0] == "r" and src == 16:
                    raise unsupported
                g, _, _ = self.rm_access(desc, src, rex, seg, nxt)
                s = self.setter(reg, osz, rex)
                signed = op2 >= 0xBE
                top = 1 << (src - 1)

                def movx(t):
                    v = g(t)
                    if signed and v & top:
                        v -= top << 1
                    s(t, v)
                    t.pc = nxt
                return movx
        raise unsupported

    # semantic helpers --------------------------------------------------------
    def _alu(self, aop: int, g, s, src, size: int, nxt: int):
        """aop: 0 add 1 or 4 and 5 sub 6 xor 7 cmp 8 test."""
        mask = (1 << size) - 1
        sign = size - 1
        if aop in (2, 3):
            raise SandboxFault(FaultKind.Unsupported, nxt)
        if aop == 0:
            def add(t):
                a, b = g(t), src(t)
                r = a + b
                t.cf = r >> size & 1
                r &= mask
                t.of = ((a ^ r) & (b ^ r)) >> sign & 1
                t.zf = 1 if r == 0 else 0
                t.sf = r >> sign
                s(t, r)
                t.pc = nxt
            return add
        if aop in (5, 7):
            write = aop == 5

            def sub(t):
                a, b = g(t), src(t)
                r = (a - b) & mask
                t.cf = 1 if a < b else 0
                t.of = ((a ^ b) & (a ^ r)) >> sign & 1
                t.zf = 1 if r == 0 else 0
                t.sf = r >> sign
                if write:
                    s(t, r)
                t.pc = nxt
            return sub
        if aop in (1, 4, 6, 8):
            write = aop != 8
            if aop == 1:
                fn = int.__or__
            elif aop == 6:
                fn = int.__xor__
            else:
                fn = int.__and__

            def logic(t):
                r = fn(g(t), src(t)) & mask
                t.cf = t.of = 0
                t.zf = 1 if r == 0 else 0
                t.sf = r >> sign
                if write:
                    s(t, r)
                t.pc = nxt
            return logic
        raise SandboxFault(FaultKind.Unsupported, nxt)

    def _incdec(self, dec: bool, g, s, size: int, nxt: int):
        mask = (1 << size) - 1
        sign = size - 1
        top = 1 << sign
        if dec:
            def dec_(t):
                a = g(t)
                r = (a - 1) & mask
                t.of = 1 if a == top else 0
                t.zf = 1 if r == 0 else 0
                t.sf = r >> sign
                s(t, r)
                t.pc = nxt
            return dec_

        def inc_(t):
            a = g(t)
            r = (a + 1) & mask
            t.of = 1 if r == top else 0
            t.zf = 1 if r == 0 else 0
            t.sf = r >> sign
            s(t, r)
            t.pc = nxt
        return inc_

    def _shift(self, kind: int, g, s, cnt: int, size: int, nxt: int):
        mask = (1 << size) - 1
        sign = size - 1

        def shift(t):
            if cnt == 0:
                t.pc = nxt
                return
            a = g(t)
            if kind == 4:
                r = (a << cnt) & mask
                cf = (a >> (size - cnt)) & 1
                of = (r >> sign) ^ cf
            elif kind == 5:
                r = a >> cnt
                cf = (a >> (cnt - 1)) & 1
                of = a >> sign
            else:
                sa = a - (1 << size) if a >> sign else a
                r = (sa >> cnt) & mask
                cf = (sa >> (cnt - 1)) & 1
                of = 0
            t.cf, t.of = cf, of
            t.zf = 1 if r == 0 else 0
            t.sf = r >> sign
            s(t, r)
            t.pc = nxt
        return shift

    def _jcc(self, cc: int, tgt: int, nxt: int, va: int):
        if cc in (0xA, 0xB):
            raise SandboxFault(FaultKind.Unsupported, va)
        conds = {
            0x0: lambda t: t.of,
            0x1: lambda t: not t.of,
            0x2: lambda t: t.cf,
            0x3: lambda t: not t.cf,
            0x4: lambda t: t.zf,
            0x5: lambda t: not t.zf,
            0x6: lambda t: t.cf or t.zf,
            0x7: lambda t: not (t.cf or t.zf),
            0x8: lambda t: t.sf,
            0x9: lambda t: not t.sf,
            0xC: lambda t: t.sf != t.of,
            0xD: lambda t: t.sf == t.of,
            0xE: lambda t: t.zf or t.sf != t.of,
            0xF: lambda t: not t.zf and t.sf == t.of,
        }
        c = conds[cc]

        def jcc(t):
            t.pc = tgt if c(t) else nxt
        return jcc

    def _loop(self, op: int, tgt: int, nxt: int):
        m = self.amask

        def loop(t):
            if op == 0xE3:
                t.pc = tgt if t.regs[1] == 0 else nxt
                return
            c = (t.regs[1] - 1) & m
            t.regs[1] = c
            take = c != 0
            if op == 0xE0:
                take = take and not t.zf
            elif op == 0xE1:
                take = take and t.zf
            t.pc = tgt if take else nxt
        return loop


def run(state: SandboxState, fuel: int) -> SandboxState:
    """Execute until every thread has exited or ``fuel`` instructions ran.

    With several threads, control passes round-robin each time the current
    thread reaches a head address.
    """
    dec = _Decoder(state)
    cache = state._cache
    heads = state.heads
    threads = state.threads
    sentinel = state.sentinel
    multi = len(threads) > 1
    cur = state.current
    t = threads[cur]
    while True:
        if t.exit is not RUNNING:
            alive = [k for k, th in enumerate(threads) if th.exit is RUNNING]
            if not alive:
                break
            cur = min(alive, key=lambda k: (k - cur) % len(threads))
            t = threads[cur]
        if fuel <= 0:
            for th in threads:
                if th.exit is RUNNING:
                    th.exit = Exit(ExitKind.FuelExhausted)
            break
        pc = t.pc
        if pc == sentinel:
            t.exit = Exit(ExitKind.Returned)
            continue
        if pc in heads and not t.at_head:
            t.trace.append(pc)
            t.at_head = True
            if multi:
                alive = [k for k, th in enumerate(threads) if th.exit is RUNNING and k != cur]
                if alive:
                    cur = min(alive, key=lambda k: (k - cur) % len(threads))
                    t = threads[cur]
                    continue
        fn = cache.get(pc)
        try:
            if fn is None:
                fn = dec.compile(pc)
                cache[pc] = fn
            fn(t)
        except SandboxFault as f:
            t.exit = Exit(ExitKind.Fault, f.kind, f.addr)
        t.at_head = False
        fuel -= 1
        state.steps += 1
    state.current = cur
    return state


# ---------------------------------------------------------------- comparison

def tls_slot_ranges(state: SandboxState, slot_offset: int, *, created: bool) -> list[tuple[int, int]]:
    """VA ranges holding the per-thread prev slot of a multi-thread rewrite.

    With ``created`` the whole TLS setup (array pointer, array, block) is
    the rewriter's, since the original image had no TLS directory.
    """
    ptr = state.bits // 8
    teb0 = TEB_32 if state.bits == 32 else TEB_64
    out = []
    for k in range(len(state.threads)):
        teb = teb0 - k * TEB_SIZE
        blk = teb + TLS_BLOCK
        if created:
            out += [(teb + TLS_ARRAY_OFFSET[state.bits], teb + TLS_ARRAY_OFFSET[state.bits] + ptr),
                    (teb + TLS_ARRAY, teb + TLS_ARRAY + ptr), (blk, blk + slot_offset + 8)]
        else:
            out.append((blk + slot_offset, blk + slot_offset + 8))
    return out


@dataclass(frozen=True)
class Difference:
    what: str
    where: str
    a: object
    b: object
    ignored: bool = False


def diff_states(a: SandboxState, b: SandboxState, ignore: Sequence[tuple[int, int]] = (), *,
                include_ignored: bool = False) -> list[Difference]:
    """Registers, flags, exit status and memory that differ between two runs.

    Read-only mappings, regions named ``.spot*`` and ``ignore`` ranges
    (VAs, half-open) are skipped, as is stack memory below each thread's final stack pointer.
    With ``include_ignored`` those differences are returned too, flagged.
    """
    out: list[Difference] = []
    if len(a.threads) != len(b.threads):
        out.append(Difference("threads", "", len(a.threads), len(b.threads)))
        return out
    for k, (ta, tb) in enumerate(zip(a.threads, b.threads)):
        if ta.exit != tb.exit:
            out.append(Difference("exit", f"thread{k}", str(ta.exit), str(tb.exit)))
        for r, (x, y) in enumerate(zip(ta.regs, tb.regs)):
            if x != y:
                out.append(Difference("reg", f"thread{k}.r{r}", x, y))
        if ta.flags != tb.flags:
            out.append(Difference("flags", f"thread{k}", ta.flags, tb.flags))
    ignore = list(ignore)
    stack_floor = {}
    for k, th in enumerate(a.threads):
        stack_floor[f"<stack{k}>"] = (th.regs[4], b.threads[k].regs[4])
    for ra in a.mem.regions:
        rb = b.mem.region(ra.name)
        if rb is None:
            out.append(Difference("region", ra.name, "mapped", "missing"))
            continue
        if ra.start != rb.start:
            out.append(Difference("region", ra.name, ra.start, rb.start))
            continue
        skip_all = ra.name.startswith(".spot") or not ra.writable
        floor = None
        if ra.name in stack_floor:
            floor = max(stack_floor[ra.name])
        ba, bb = bytes(ra.buf[:ra.end - ra.start]), bytes(rb.buf[:rb.end - rb.start])
        if ba == bb:
            continue
        n = min(len(ba), len(bb))
        xa = np.frombuffer(ba, dtype=np.uint8)[:n]
        xb = np.frombuffer(bb, dtype=np.uint8)[:n]
        for off in np.flatnonzero(xa != xb).tolist():
            va = ra.start + off
            ign = skip_all or any(lo <= va < hi for lo, hi in ignore) or (floor is not None and va < floor)
            if ign and not include_ignored:
                continue
            out.append(Difference("mem", f"{ra.name}+{off:#x}", ba[off], bb[off], ign))
    for rb in b.mem.regions:
        if a.mem.region(rb.name) is None and not rb.name.startswith(".spot") and include_ignored:
            out.append(Difference("region", rb.name, "missing", "mapped", True))
    return out
