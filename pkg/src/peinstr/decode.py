"""x86 / x86-64 instruction length decoding and control-flow classification.

The decoder covers the one-byte and two-byte (``0F``) opcode maps with legacy
prefixes and REX.  Three-byte maps (``0F 38``/``0F 3A``), VEX, EVEX and XOP
encodings are rejected with :class:`Undecodable`, as are encodings whose
validity depends on details the tables below do not model.  Rejection is
always safe for the callers: undecodable bytes are never instrumented.
"""

from __future__ import annotations

import bisect
import enum
from dataclasses import dataclass
from typing import Optional


class DecodeError(Exception):
    pass


class Undecodable(DecodeError):
    pass


class Truncated(DecodeError):
    pass


class Mode(enum.IntEnum):
    Bits32 = 32
    Bits64 = 64


class Kind(enum.Enum):
    Plain = "plain"
    CallDirect = "call"
    CallIndirect = "call_indirect"
    JmpDirect = "jmp"
    JmpIndirectReg = "jmp_reg"
    JmpIndirectMem = "jmp_mem"
    Jcc = "jcc"
    Ret = "ret"


DIRECT_KINDS = frozenset({Kind.CallDirect, Kind.JmpDirect, Kind.Jcc})
TRANSFER_KINDS = frozenset(Kind) - {Kind.Plain}


@dataclass(frozen=True)
class ModRM:
    """Decoded ModRM/SIB addressing summary."""

    mod: int
    reg: int  # REX.R applied
    rm: int  # REX.B applied (register form) or raw rm (memory form)
    base: Optional[int] = None  # register number incl. REX.B, None if absent
    index: Optional[int] = None  # register number incl. REX.X, None if absent
    scale: int = 1
    disp: int = 0
    disp_offset: int = 0  # offset of displacement within the instruction
    disp_size: int = 0
    rip_relative: bool = False
    addr_size: int = 32

    @property
    def is_memory(self) -> bool:
        return self.mod != 3

    @property
    def is_absolute(self) -> bool:
        """Memory operand with neither base nor index (plain disp32)."""
        return self.is_memory and self.base is None and self.index is None and not self.rip_relative


@dataclass(frozen=True)
class DecodedInsn:
    rva: int
    length: int
    kind: Kind
    target: Optional[int]
    reads_memory: bool
    writes_memory: bool
    modrm: Optional[ModRM]
    opcode: int  # one byte, or 0x0Fxx for the two-byte map
    mode: Mode
    raw: bytes
    rex: int = 0
    opsize: int = 32
    imm_offset: int = 0
    imm_size: int = 0
    rel_offset: int = 0  # offset of the branch displacement (0 if none)
    rel_size: int = 0
    far: bool = False
    implicit_write: bool = False  # string stores through [e/rdi]

    @property
    def end(self) -> int:
        return self.rva + self.length

    @property
    def is_transfer(self) -> bool:
        return self.kind is not Kind.Plain

    @property
    def mnemonic_class(self) -> str:
        return self.kind.value


# Immediate kinds
_B, _W, _Z, _V, _A, _P, _WB, _REL8, _RELZ = range(1, 10)

# one-byte map: opcode -> (has_modrm, imm kind)
_ONE: dict[int, tuple[bool, int]] = {}
for _base in range(0, 0x40, 8):
    for _i in range(4):
        _ONE[_base + _i] = (True, 0)
    _ONE[_base + 4] = (False, _B)
    _ONE[_base + 5] = (False, _Z)
for _op in (0x06, 0x07, 0x0E, 0x16, 0x17, 0x1E, 0x1F, 0x27, 0x2F, 0x37, 0x3F):
    _ONE[_op] = (False, 0)
for _op in range(0x40, 0x60):
    _ONE[_op] = (False, 0)
_ONE.update({
    0x60: (False, 0), 0x61: (False, 0), 0x62: (True, 0), 0x63: (True, 0),
    0x68: (False, _Z), 0x69: (True, _Z), 0x6A: (False, _B), 0x6B: (True, _B),
    0x6C: (False, 0), 0x6D: (False, 0), 0x6E: (False, 0), 0x6F: (False, 0),
})
for _op in range(0x70, 0x80):
    _ONE[_op] = (False, _REL8)
_ONE.update({0x80: (True, _B), 0x81: (True, _Z), 0x82: (True, _B), 0x83: (True, _B)})
for _op in range(0x84, 0x90):
    _ONE[_op] = (True, 0)
for _op in range(0x90, 0xA0):
    _ONE[_op] = (False, 0)
_ONE[0x9A] = (False, _P)
for _op in range(0xA0, 0xA4):
    _ONE[_op] = (False, _A)
for _op in range(0xA4, 0xB0):
    _ONE[_op] = (False, 0)
_ONE[0xA8] = (False, _B)
_ONE[0xA9] = (False, _Z)
for _op in range(0xB0, 0xB8):
    _ONE[_op] = (False, _B)
for _op in range(0xB8, 0xC0):
    _ONE[_op] = (False, _V)
_ONE.update({
    0xC0: (True, _B), 0xC1: (True, _B), 0xC2: (False, _W), 0xC3: (False, 0),
    0xC4: (True, 0), 0xC5: (True, 0), 0xC6: (True, _B), 0xC7: (True, _Z),
    0xC8: (False, _WB), 0xC9: (False, 0), 0xCA: (False, _W), 0xCB: (False, 0),
    0xCC: (False, 0), 0xCD: (False, _B), 0xCE: (False, 0), 0xCF: (False, 0),
    0xD0: (True, 0), 0xD1: (True, 0), 0xD2: (True, 0), 0xD3: (True, 0),
    0xD4: (False, _B), 0xD5: (False, _B), 0xD7: (False, 0),
})
for _op in range(0xD8, 0xE0):
    _ONE[_op] = (True, 0)
for _op in range(0xE0, 0xE4):
    _ONE[_op] = (False, _REL8)
_ONE.update({
    0xE4: (False, _B), 0xE5: (False, _B), 0xE6: (False, _B), 0xE7: (False, _B),
    0xE8: (False, _RELZ), 0xE9: (False, _RELZ), 0xEA: (False, _P), 0xEB: (False, _REL8),
    0xEC: (False, 0), 0xED: (False, 0), 0xEE: (False, 0), 0xEF: (False, 0),
    0xF1: (False, 0), 0xF4: (False, 0), 0xF5: (False, 0),
    0xF6: (True, 0), 0xF7: (True, 0),
    0xF8: (False, 0), 0xF9: (False, 0), 0xFA: (False, 0), 0xFB: (False, 0),
    0xFC: (False, 0), 0xFD: (False, 0), 0xFE: (True, 0), 0xFF: (True, 0),
})

_INVALID_64 = frozenset({
    0x06, 0x07, 0x0E, 0x16, 0x17, 0x1E, 0x1F, 0x27, 0x2F, 0x37, 0x3F,
    0x60, 0x61, 0x62, 0x82, 0x9A, 0xC4, 0xC5, 0xCE, 0xD4, 0xD5, 0xEA,
})

_PREFIXES = frozenset({0xF0, 0xF2, 0xF3, 0x2E, 0x36, 0x3E, 0x26, 0x64, 0x65, 0x66, 0x67})

# two-byte map: opcode -> (has_modrm, imm kind). Absent -> Undecodable.
_TWO: dict[int, tuple[bool, int]] = {
    0x00: (True, 0), 0x01: (True, 0), 0x02: (True, 0), 0x03: (True, 0),
    0x05: (False, 0), 0x06: (False, 0), 0x07: (False, 0), 0x08: (False, 0), 0x09: (False, 0),
    0x0B: (False, 0), 0x0D: (True, 0),
    0x30: (False, 0), 0x31: (False, 0), 0x32: (False, 0), 0x33: (False, 0),
    0x34: (False, 0), 0x35: (False, 0),
    0x77: (False, 0),
    0xA0: (False, 0), 0xA1: (False, 0), 0xA2: (False, 0), 0xA3: (True, 0),
    0xA4: (True, _B), 0xA5: (True, 0), 0xA8: (False, 0), 0xA9: (False, 0),
    0xAA: (False, 0), 0xAB: (True, 0), 0xAC: (True, _B), 0xAD: (True, 0),
    0xAE: (True, 0), 0xAF: (True, 0),
    0xB8: (True, 0), 0xB9: (True, 0), 0xBA: (True, _B),
    0xC2: (True, _B), 0xC3: (True, 0), 0xC4: (True, _B), 0xC5: (True, _B), 0xC6: (True, _B),
    0xC7: (True, 0),
}
for _op in list(range(0x10, 0x24)) + list(range(0x28, 0x30)) + list(range(0x40, 0x77)) + [0x78, 0x79, 0x7C, 0x7D, 0x7E, 0x7F]:
    _TWO[_op] = (True, _B if 0x70 <= _op <= 0x73 else 0)
for _op in range(0x80, 0x90):
    _TWO[_op] = (False, _RELZ)
for _op in range(0x90, 0xA0):
    _TWO[_op] = (True, 0)
for _op in range(0xB0, 0xB8):
    _TWO[_op] = (True, 0)
for _op in range(0xBB, 0xC2):
    _TWO[_op] = (True, 0)
for _op in range(0xC8, 0xD0):
    _TWO[_op] = (False, 0)
for _op in range(0xD0, 0x100):
    _TWO[_op] = (True, 0)
_TWO[0xFF] = (True, 0)

# Mandatory-prefix tables for SSE/MMX opcodes: opcode -> allowed prefix classes.
# '' = none, then '66', 'F3', 'F2'.  Opcodes missing here treat 66 as operand
# size and ignore F2/F3.
_N, _66, _F3, _F2 = "", "66", "F3", "F2"
_ALL = frozenset({_N, _66, _F3, _F2})
_NP66 = frozenset({_N, _66})
_SSE: dict[int, frozenset[str]] = {
    0x10: _ALL, 0x11: _ALL, 0x12: _ALL, 0x13: _NP66, 0x14: _NP66, 0x15: _NP66,
    0x16: frozenset({_N, _66, _F3}), 0x17: _NP66,
    0x28: _NP66, 0x29: _NP66, 0x2A: _ALL, 0x2B: _NP66, 0x2C: _ALL, 0x2D: _ALL,
    0x2E: _NP66, 0x2F: _NP66,
    0x50: _NP66, 0x51: _ALL, 0x52: frozenset({_N, _F3}), 0x53: frozenset({_N, _F3}),
    0x54: _NP66, 0x55: _NP66, 0x56: _NP66, 0x57: _NP66, 0x58: _ALL, 0x59: _ALL,
    0x5A: _ALL, 0x5B: frozenset({_N, _66, _F3}), 0x5C: _ALL, 0x5D: _ALL, 0x5E: _ALL, 0x5F: _ALL,
    0x6C: frozenset({_66}), 0x6D: frozenset({_66}), 0x6E: _NP66,
    0x6F: frozenset({_N, _66, _F3}),
    0x70: _ALL, 0x71: _NP66, 0x72: _NP66, 0x73: _NP66, 0x74: _NP66, 0x75: _NP66, 0x76: _NP66,
    0x77: frozenset({_N}), 0x78: frozenset({_N}), 0x79: frozenset({_N}),
    0x7C: frozenset({_66, _F2}), 0x7D: frozenset({_66, _F2}),
    0x7E: frozenset({_N, _66, _F3}), 0x7F: frozenset({_N, _66, _F3}),
    0xB8: frozenset({_F3}), 0xC2: _ALL, 0xC3: frozenset({_N}), 0xC4: _NP66, 0xC5: _NP66,
    0xC6: _NP66, 0xD0: frozenset({_66, _F2}), 0xD6: frozenset({_66, _F3, _F2}),
    0xE6: frozenset({_66, _F3, _F2}), 0xF0: frozenset({_F2}),
}
for _op in range(0x60, 0x6C):
    _SSE[_op] = _NP66
for _op in list(range(0xD1, 0xD6)) + list(range(0xD7, 0xE6)) + list(range(0xE7, 0xF0)) + list(range(0xF1, 0xFF)):
    _SSE[_op] = _NP66
# mod == 3 required
_SSE_REG_ONLY = frozenset({0x50, 0x71, 0x72, 0x73, 0xC5, 0xD7, 0xF7})
# mod != 3 required
_SSE_MEM_ONLY = frozenset({0x2B, 0x13, 0x17, 0xC3, 0xE7, 0xF0})


def _prefix_class(rep: int, has66: bool) -> str:
    if rep == 0xF3:
        return _F3
    if rep == 0xF2:
        return _F2
    return _66 if has66 else _N


# x87 register forms (second byte C0..FF) considered valid, per escape.
def _x87_reg_ok(op: int, b: int) -> bool:
    if op in (0xD8, 0xDC):
        return True
    if op == 0xD9:
        return b <= 0xD0 or b in (0xE0, 0xE1, 0xE4, 0xE5) or 0xE8 <= b <= 0xEE or b >= 0xF0
    if op == 0xDA:
        return b <= 0xDF or b == 0xE9
    if op == 0xDB:
        return b <= 0xDF or b in (0xE2, 0xE3) or 0xE8 <= b <= 0xF7
    if op == 0xDD:
        return b <= 0xC7 or 0xD0 <= b <= 0xEF
    if op == 0xDE:
        return b <= 0xCF or b == 0xD9 or b >= 0xE0
    if op == 0xDF:
        return b == 0xE0 or 0xE8 <= b <= 0xF7
    return False


_X87_MEM_BAD = {(0xD9, 1), (0xDD, 5), (0xDB, 4), (0xDB, 6)}

# lockable (opcode, reg or None) pairs; memory destination required
_LOCKABLE_ONE = frozenset({0x00, 0x01, 0x08, 0x09, 0x10, 0x11, 0x18, 0x19, 0x20, 0x21,
                           0x28, 0x29, 0x30, 0x31, 0x86, 0x87})
_LOCKABLE_TWO = frozenset({0x0FAB, 0x0FB3, 0x0FBB, 0x0FB0, 0x0FB1, 0x0FC0, 0x0FC1})

# 0F 01 register forms accepted (conservative whitelist)
_GRP7_REG_OK = frozenset({0xD0, 0xD5, 0xD6, 0xF9})
_GRP7_REG_OK_64 = frozenset({0xF8})


def _writes_rm(op: int, reg: int) -> bool:
    """Whether the r/m operand of opcode ``op`` (with ModRM.reg ``reg``) is written."""
    if op < 0x40:
        return (op & 7) in (0, 1) and (op & 0x38) != 0x38
    if op in (0x80, 0x81, 0x82, 0x83):
        return reg != 7
    if op in (0x86, 0x87, 0x88, 0x89, 0x8C, 0x8F, 0xC6, 0xC7, 0xC0, 0xC1, 0xD0, 0xD1, 0xD2, 0xD3):
        return True
    if op in (0xF6, 0xF7):
        return reg in (2, 3)
    if op == 0xFE or op == 0xFF:
        return reg in (0, 1)
    if op == 0xD9:
        return reg in (2, 3, 6, 7)
    if op in (0xDB,):
        return reg in (1, 2, 3, 7)
    if op in (0xDD, 0xDF):
        return reg in (1, 2, 3, 6, 7)
    if op == 0x0F00:
        return reg in (0, 1)
    if op == 0x0F01:
        return reg in (0, 1, 4)
    if 0x0F90 <= op <= 0x0F9F:
        return True
    if op in (0x0FAB, 0x0FB3, 0x0FBB, 0x0FB0, 0x0FB1, 0x0FC0, 0x0FC1, 0x0FA4, 0x0FA5, 0x0FAC, 0x0FAD):
        return True
    if op == 0x0FBA:
        return reg >= 5
    if op == 0x0FAE:
        return reg in (0, 3, 4, 6)
    if op == 0x0FC7:
        return reg in (1, 4, 5, 7)
    if op in (0x0F11, 0x0F13, 0x0F17, 0x0F29, 0x0F2B, 0x0F7E, 0x0F7F, 0x0FC3, 0x0FD6, 0x0FE7):
        return True
    return False


def _reads_rm(op: int, reg: int) -> bool:
    if op in (0x88, 0x89, 0x8C, 0x8F, 0xC6, 0xC7, 0x8D) or 0x0F90 <= op <= 0x0F9F:
        return False
    if op == 0x0F01:
        return reg not in (0, 1, 4)
    if op in (0x0F11, 0x0F13, 0x0F17, 0x0F29, 0x0F2B, 0x0F7F, 0x0FC3, 0x0FE7):
        return False
    if op in (0x0F18, 0x0F0D, 0x0F1F):
        return False
    return True


def _decode_modrm(code: bytes, pos: int, start: int, addr_size: int, rex: int, mode: Mode) -> tuple[ModRM, int]:
    if pos >= len(code):
        raise Truncated("missing ModRM")
    m = code[pos]
    pos += 1
    mod, reg, rm = m >> 6, (m >> 3) & 7, m & 7
    reg |= (rex & 4) << 1
    if mod == 3:
        return ModRM(mod, reg, rm | ((rex & 1) << 3), addr_size=addr_size), pos
    if addr_size == 16:
        disp_size = {0: 2 if rm == 6 else 0, 1: 1, 2: 2}[mod]
        bases = [(3, 6), (3, 7), (5, 6), (5, 7), (6, None), (7, None), (5, None), (3, None)]
        base, index = bases[rm]
        if mod == 0 and rm == 6:
            base = None
        disp_off = pos - start
        if pos + disp_size > len(code):
            raise Truncated("displacement")
        disp = int.from_bytes(code[pos:pos + disp_size], "little", signed=True) if disp_size else 0
        return ModRM(mod, reg, rm, base, index, 1, disp, disp_off, disp_size, False, 16), pos + disp_size
    base: Optional[int] = None
    index: Optional[int] = None
    scale = 1
    rip = False
    if rm == 4:
        if pos >= len(code):
            raise Truncated("missing SIB")
        sib = code[pos]
        pos += 1
        scale = 1 << (sib >> 6)
        idx = ((sib >> 3) & 7) | ((rex & 2) << 2)
        index = None if idx == 4 else idx
        b = sib & 7
        if b == 5 and mod == 0:
            base = None
            disp_size = 4
        else:
            base = b | ((rex & 1) << 3)
            disp_size = {0: 0, 1: 1, 2: 4}[mod]
    elif rm == 5 and mod == 0:
        disp_size = 4
        rip = mode is Mode.Bits64
    else:
        base = rm | ((rex & 1) << 3)
        disp_size = {0: 0, 1: 1, 2: 4}[mod]
    disp_off = pos - start
    if pos + disp_size > len(code):
        raise Truncated("displacement")
    disp = int.from_bytes(code[pos:pos + disp_size], "little", signed=True) if disp_size else 0
    return ModRM(mod, reg, rm, base, index, scale, disp, disp_off, disp_size, rip, addr_size), pos + disp_size


def decode_one(code: bytes, rva: int, mode: Mode = Mode.Bits32) -> DecodedInsn:
    """Decode the instruction at the start of ``code``, located at ``rva``.

    Raises :class:`Truncated` when ``code`` ends mid-instruction and
    :class:`Undecodable` for encodings outside the supported set.
    """
    if not code:
        raise Truncated("empty input")
    mode = Mode(mode)
    is64 = mode is Mode.Bits64
    n = len(code)
    pos = 0
    has66 = has67 = lock = False
    rep = 0
    rex = 0
    while True:
        if pos >= n:
            raise Truncated("prefixes only")
        b = code[pos]
        if b in _PREFIXES:
            rex = 0  # REX is only honoured directly before the opcode
            if b == 0x66:
                has66 = True
            elif b == 0x67:
                has67 = True
            elif b == 0xF0:
                lock = True
            elif b in (0xF2, 0xF3):
                rep = b
            pos += 1
        elif is64 and 0x40 <= b <= 0x4F:
            rex = b
            pos += 1
        else:
            break
        if pos >= 15:
            raise Undecodable("instruction longer than 15 bytes")
    rex_w = bool(rex & 8)
    if is64:
        opsize = 64 if rex_w else (16 if has66 else 32)
        addr_size = 32 if has67 else 64
    else:
        opsize = 16 if has66 else 32
        addr_size = 16 if has67 else 32

    op = code[pos]
    pos += 1
    two = op == 0x0F
    if two:
        if pos >= n:
            raise Truncated("two-byte opcode")
        op2 = code[pos]
        pos += 1
        if op2 in (0x38, 0x3A):
            raise Undecodable("three-byte opcode map")
        if op2 not in _TWO:
            raise Undecodable(f"unsupported opcode 0F {op2:02X}")
        has_modrm, imm_kind = _TWO[op2]
        full_op = 0x0F00 | op2
        if op2 in (0x05, 0x07) and not is64:
            raise Undecodable("syscall/sysret outside 64-bit mode")
        if op2 in (0xA6, 0xA7, 0xAA, 0x20, 0x21, 0x22, 0x23):
            raise Undecodable(f"privileged or reserved opcode 0F {op2:02X}")
        if op2 in _SSE:
            pcls = _prefix_class(rep, has66)
            if pcls not in _SSE[op2]:
                raise Undecodable(f"0F {op2:02X} with prefix {pcls or 'none'}")
            if pcls != _66 and has66 and op2 not in (0xB8,):
                # 66 combined with F2/F3 on SSE opcodes is ambiguous across decoders
                raise Undecodable("66 with F2/F3 mandatory prefix")
            if pcls in (_F2, _F3) and lock:
                raise Undecodable
    else:
        if is64 and op in _INVALID_64:
            raise Undecodable(f"opcode {op:02X} invalid in 64-bit mode")
        if op == 0xD6 or op not in _ONE:
            raise Undecodable(f"unsupported opcode {op:02X}")
        if op in (0xC4, 0xC5, 0x62) and pos < n and code[pos] >> 6 == 3:
            raise Undecodable("VEX/EVEX prefix")
        has_modrm, imm_kind = _ONE[op]
        full_op = op

    start = 0
    mrm: Optional[ModRM] = None
    if has_modrm:
        mrm, pos = _decode_modrm(code, pos, start, addr_size, rex, mode)
    reg3 = mrm.reg & 7 if mrm else 0

    # encoding validity checks for forms the decoder does not accept
    if mrm is not None:
        is_mem = mrm.mod != 3
        if not two:
            if op in (0x8D, 0x62, 0xC4, 0xC5) and not is_mem:
                raise Undecodable("memory operand required")
            if op == 0x8F and reg3 != 0:
                raise Undecodable("XOP / invalid 8F")
            if op in (0xC6, 0xC7) and reg3 != 0:
                raise Undecodable("invalid C6/C7 form")
            if op == 0xFE and reg3 > 1:
                raise Undecodable
            if op == 0xFF and (reg3 == 7 or (reg3 in (3, 5) and not is_mem)):
                raise Undecodable
            if op in (0x8C, 0x8E) and reg3 > 5:
                raise Undecodable("bad segment register")
            if op == 0x8E and reg3 == 1:
                raise Undecodable("mov cs")
            if 0xD8 <= op <= 0xDF:
                if is_mem and (op, reg3) in _X87_MEM_BAD:
                    raise Undecodable
                if not is_mem and not _x87_reg_ok(op, code[pos - 1]):
                    raise Undecodable("x87 register form")
        else:
            if op2 == 0x00 and reg3 > 5:
                raise Undecodable
            if op2 == 0x01:
                if is_mem and reg3 == 5:
                    raise Undecodable
                if not is_mem:
                    mb = code[pos - 1]
                    if rep or has66:
                        raise Undecodable("prefixed 0F 01 register form")
                    if not (mb in _GRP7_REG_OK or (is64 and mb in _GRP7_REG_OK_64)
                            or reg3 in (4, 6)):
                        raise Undecodable("0F 01 register form")
            if op2 in (0xB2, 0xB4, 0xB5) and not is_mem:
                raise Undecodable
            if op2 == 0x0D and (not is_mem or reg3 > 1):
                raise Undecodable
            if op2 == 0x18 and (not is_mem or reg3 > 3):
                raise Undecodable
            if op2 in (0x1A, 0x1B, 0x1C, 0x1D, 0x1E):
                raise Undecodable("MPX / CET hint space")
            if op2 == 0xBA and reg3 < 4:
                raise Undecodable
            if op2 == 0xB9:
                raise Undecodable("ud1")
            if op2 == 0xFF:
                raise Undecodable("ud0")
            if op2 == 0xC7:
                if is_mem and reg3 != 1:
                    raise Undecodable
                if not is_mem and reg3 not in (6, 7):
                    raise Undecodable
                if rep or has66:
                    raise Undecodable
            if op2 == 0xAE:
                if rep or has66:
                    raise Undecodable
                if not is_mem and code[pos - 1] not in (0xE8, 0xF0, 0xF8):
                    raise Undecodable
            if op2 in _SSE_REG_ONLY and is_mem:
                raise Undecodable("register operand required")
            if op2 in _SSE_MEM_ONLY and not is_mem:
                raise Undecodable("memory operand required")
            if op2 in (0x12, 0x16) and not is_mem and _prefix_class(rep, has66) == _66:
                raise Undecodable("movlpd/movhpd need a memory operand")
            if op2 in (0x71, 0x72) and reg3 not in (2, 4, 6):
                raise Undecodable
            if op2 == 0x73 and not (reg3 in (2, 6) or (reg3 in (3, 7) and has66 and not rep)):
                raise Undecodable
            if op2 == 0xD6 and _prefix_class(rep, has66) in (_F3, _F2) and is_mem:
                raise Undecodable
    if lock:
        lockable = mrm is not None and mrm.mod != 3 and (
            (not two and (op in _LOCKABLE_ONE
                          or (op in (0x80, 0x81, 0x83) and reg3 != 7)
                          or (op in (0xF6, 0xF7) and reg3 in (2, 3))
                          or (op in (0xFE, 0xFF) and reg3 in (0, 1))))
            or (two and (full_op in _LOCKABLE_TWO
                         or (op2 == 0xBA and reg3 >= 5)
                         or (op2 == 0xC7 and reg3 == 1))))
        if not lockable:
            raise Undecodable("lock prefix on non-lockable instruction")

    # immediates
    imm_size = 0
    rel_size = 0
    if not two and op in (0xF6, 0xF7) and reg3 in (0, 1):
        imm_kind = _B if op == 0xF6 else _Z
    if imm_kind == _B:
        imm_size = 1
    elif imm_kind == _W:
        imm_size = 2
    elif imm_kind == _Z:
        imm_size = 2 if opsize == 16 else 4
    elif imm_kind == _V:
        imm_size = {16: 2, 32: 4, 64: 8}[opsize]
    elif imm_kind == _A:
        imm_size = addr_size // 8
    elif imm_kind == _P:
        imm_size = (2 if opsize == 16 else 4) + 2
    elif imm_kind == _WB:
        imm_size = 3
    elif imm_kind == _REL8:
        if has66:
            raise Undecodable("16-bit near branch")
        rel_size = 1
    elif imm_kind == _RELZ:
        if has66:
            raise Undecodable("16-bit near branch")
        rel_size = 4
    imm_offset = pos
    if pos + imm_size + rel_size > n:
        raise Truncated("immediate")
    rel_offset = pos if rel_size else 0
    pos += imm_size + rel_size
    length = pos
    if length > 15:
        raise Undecodable("instruction longer than 15 bytes")

    # classification
    kind = Kind.Plain
    target = None
    far = False
    if rel_size:
        if not two and op in (0xE8,):
            kind = Kind.CallDirect
        elif not two and op in (0xE9, 0xEB):
            kind = Kind.JmpDirect
        else:
            kind = Kind.Jcc
        disp = int.from_bytes(code[rel_offset:rel_offset + rel_size], "little", signed=True)
        target = (rva + length + disp) & ((1 << mode.value) - 1)
    elif not two:
        if op in (0xC2, 0xC3, 0xCA, 0xCB, 0xCF):
            kind = Kind.Ret
        elif op == 0x9A:
            kind, far = Kind.CallIndirect, True
        elif op == 0xEA:
            kind, far = Kind.JmpIndirectMem, True
        elif op == 0xFF and mrm is not None:
            if reg3 in (2, 3):
                kind, far = Kind.CallIndirect, reg3 == 3
            elif reg3 in (4, 5):
                far = reg3 == 5
                kind = Kind.JmpIndirectMem if mrm.is_memory else Kind.JmpIndirectReg
    elif op2 in (0x07, 0x35):
        kind = Kind.Ret

    reads = writes = False
    implicit_write = False
    if mrm is not None and mrm.is_memory:
        writes = _writes_rm(full_op, reg3)
        reads = _reads_rm(full_op, reg3)
        if not two and op in (0x88, 0x89):
            writes, reads = True, False
    if not two and op in (0xA4, 0xA5, 0xAA, 0xAB, 0x6C, 0x6D):
        implicit_write = writes = True
    if not two and op in (0xA0, 0xA1, 0xA4, 0xA5, 0xA6, 0xA7, 0xAC, 0xAD, 0xAE, 0xAF):
        reads = True
    if not two and op in (0xA2, 0xA3):
        writes = True

    return DecodedInsn(
        rva=rva, length=length, kind=kind, target=target, reads_memory=reads,
        writes_memory=writes, modrm=mrm, opcode=full_op, mode=mode,
        raw=bytes(code[:length]), rex=rex, opsize=opsize,
        imm_offset=imm_offset if imm_size else 0, imm_size=imm_size,
        rel_offset=rel_offset, rel_size=rel_size, far=far,
        implicit_write=implicit_write,
    )


@dataclass(frozen=True)
class UndecodableRegion:
    start: int
    end: int
    reason: str = ""

    @property
    def size(self) -> int:
        return self.end - self.start


def sweep(code: bytes, base_rva: int, mode: Mode = Mode.Bits32,
          resume_points: Optional[set[int]] = None) -> tuple[list[DecodedInsn], list[UndecodableRegion]]:
    """Linear-sweep ``code`` starting at ``base_rva``.

    When a byte sequence fails to decode, an :class:`UndecodableRegion` is
    recorded and decoding resumes at the next resume point (a known leader
    candidate) if one is given, otherwise one byte further on.  Adjacent
    failing bytes are merged into a single region.
    """
    insns: list[DecodedInsn] = []
    regions: list[UndecodableRegion] = []
    resume = sorted(resume_points or ())
    n = len(code)
    off = 0
    bad_start: Optional[int] = None
    reason = ""
    mv = memoryview(code)
    while off < n:
        try:
            insn = decode_one(bytes(mv[off:off + 15]), base_rva + off, mode)
        except DecodeError as exc:
            if bad_start is None:
                bad_start, reason = off, str(exc) or type(exc).__name__
            nxt = off + 1
            if resume:
                i = bisect.bisect_right(resume, base_rva + off)
                if i < len(resume):
                    nxt = max(nxt, min(resume[i] - base_rva, n))
                else:
                    nxt = n
            off = nxt
            continue
        if bad_start is not None:
            regions.append(UndecodableRegion(base_rva + bad_start, base_rva + off, reason))
            bad_start = None
        insns.append(insn)
        off += insn.length
    if bad_start is not None:
        regions.append(UndecodableRegion(base_rva + bad_start, base_rva + n, reason))
    return insns, regions
