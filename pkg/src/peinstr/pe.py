"""Byte-exact model of PE32 / PE32+ images.

``parse`` keeps every byte of the input: structured header fields are patched
back over the original header bytes on ``serialize``, section payloads are
written at their raw offsets, and anything after the last section (overlay)
is re-emitted verbatim.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional


class PeError(Exception):
    pass


class MalformedHeader(PeError):
    pass


class SectionOutOfBounds(PeError):
    pass


class SectionOverlap(MalformedHeader):
    pass


class NameTooLong(PeError, ValueError):
    pass


class Arch(enum.Enum):
    PE32 = "pe32"
    PE64 = "pe64"

    @property
    def ptr_size(self) -> int:
        return 4 if self is Arch.PE32 else 8

    @property
    def bits(self) -> int:
        return 32 if self is Arch.PE32 else 64


MAGIC_PE32 = 0x10B
MAGIC_PE64 = 0x20B
MACHINE_I386 = 0x14C
MACHINE_AMD64 = 0x8664

SCN_CNT_CODE = 0x00000020
SCN_CNT_INITIALIZED_DATA = 0x00000040
SCN_MEM_EXECUTE = 0x20000000
SCN_MEM_READ = 0x40000000
SCN_MEM_WRITE = 0x80000000

EXECUTE_READ = SCN_CNT_CODE | SCN_MEM_EXECUTE | SCN_MEM_READ
READ_WRITE = SCN_CNT_INITIALIZED_DATA | SCN_MEM_READ | SCN_MEM_WRITE
READ_ONLY = SCN_CNT_INITIALIZED_DATA | SCN_MEM_READ

DIR_EXPORT = 0
DIR_IMPORT = 1
DIR_SECURITY = 4
DIR_BASERELOC = 5
DIR_DEBUG = 6
DIR_TLS = 9
DIR_IAT = 12

_COFF = struct.Struct("<4sHHIIIHH")
_SECTION = struct.Struct("<8sIIIIIIHHI")
_OPT32 = struct.Struct("<HBBIIIIIIIIIHHHHHHIIIIHHIIIIII")
_OPT64 = struct.Struct("<HBBIIIIIQIIHHHHHHIIIIHHQQQQII")
_OPT32_FIELDS = (
    "magic", "major_linker", "minor_linker", "size_of_code", "size_of_init_data",
    "size_of_uninit_data", "entry_point", "base_of_code", "base_of_data", "image_base",
    "section_alignment", "file_alignment", "major_os", "minor_os", "major_image",
    "minor_image", "major_subsystem", "minor_subsystem", "win32_version", "size_of_image",
    "size_of_headers", "checksum", "subsystem", "dll_characteristics", "stack_reserve",
    "stack_commit", "heap_reserve", "heap_commit", "loader_flags", "number_of_rva_and_sizes",
)
_OPT64_FIELDS = tuple(f for f in _OPT32_FIELDS if f != "base_of_data")


def align_up(value: int, alignment: int) -> int:
    if alignment <= 1:
        return value
    return (value + alignment - 1) // alignment * alignment


# --------------------------------------------------------------------------- relocations

class RelocKind(enum.IntEnum):
    ABS = 0
    HIGHLOW = 3
    DIR64 = 10


@dataclass(frozen=True, order=True)
class RelocEntry:
    offset: int
    kind: RelocKind


@dataclass
class RelocBlock:
    page_rva: int
    entries: list[RelocEntry] = field(default_factory=list)


@dataclass
class RelocationTable:
    """Decoded base-relocation directory.

    ABS padding entries are dropped on decode and re-inserted by ``encode``
    only where a block has an odd number of entries, so ``decode(encode(t))``
    is the identity on tables without padding.
    """

    blocks: list[RelocBlock] = field(default_factory=list)

    @classmethod
    def decode(cls, data: bytes) -> "RelocationTable":
        blocks: list[RelocBlock] = []
        pos = 0
        while pos + 8 <= len(data):
            page, size = struct.unpack_from("<II", data, pos)
            if size == 0 and page == 0:
                break
            if size < 8 or pos + size > len(data) or size % 2:
                raise MalformedHeader(f"bad relocation block size {size:#x} at {pos:#x}")
            entries = []
            for (word,) in struct.iter_unpack("<H", data[pos + 8:pos + size]):
                kind, off = word >> 12, word & 0xFFF
                if kind == RelocKind.ABS:
                    continue
                try:
                    entries.append(RelocEntry(off, RelocKind(kind)))
                except ValueError:
                    raise MalformedHeader(f"unsupported relocation type {kind}") from None
            blocks.append(RelocBlock(page, sorted(entries)))
            pos += size
        return cls(blocks)

    def encode(self) -> bytes:
        out = bytearray()
        for block in sorted(self.blocks, key=lambda b: b.page_rva):
            entries = sorted(block.entries)
            if not entries:
                continue
            words = [(e.kind << 12) | e.offset for e in entries]
            if len(words) % 2:
                words.append(0)
            out += struct.pack("<II", block.page_rva, 8 + 2 * len(words))
            out += struct.pack(f"<{len(words)}H", *words)
        return bytes(out)

    def addresses(self) -> list[tuple[int, RelocKind]]:
        """Flat, sorted list of (rva, kind)."""
        return sorted((b.page_rva + e.offset, e.kind) for b in self.blocks for e in b.entries)

    @classmethod
    def from_addresses(cls, items: Iterable[tuple[int, RelocKind]]) -> "RelocationTable":
        pages: dict[int, set[RelocEntry]] = {}
        for rva, kind in items:
            pages.setdefault(rva & ~0xFFF, set()).add(RelocEntry(rva & 0xFFF, RelocKind(kind)))
        return cls([RelocBlock(p, sorted(e)) for p, e in sorted(pages.items())])

    def __len__(self) -> int:
        return sum(len(b.entries) for b in self.blocks)


# --------------------------------------------------------------------------- sections

@dataclass
class Section:
    name: bytes
    virtual_size: int
    virtual_address: int
    raw_size: int
    raw_offset: int
    characteristics: int
    data: bytearray
    ptr_relocs: int = 0
    ptr_linenos: int = 0
    n_relocs: int = 0
    n_linenos: int = 0

    @property
    def name_str(self) -> str:
        return self.name.rstrip(b"\0").decode("latin-1")

    @property
    def virtual_end(self) -> int:
        return self.virtual_address + max(self.virtual_size, 0 if self.virtual_size else self.raw_size)

    @property
    def mapped_size(self) -> int:
        return self.virtual_size or self.raw_size

    @property
    def executable(self) -> bool:
        return bool(self.characteristics & SCN_MEM_EXECUTE)

    @property
    def writable(self) -> bool:
        return bool(self.characteristics & SCN_MEM_WRITE)

    @property
    def readable(self) -> bool:
        return bool(self.characteristics & SCN_MEM_READ)

    def contains_rva(self, rva: int) -> bool:
        return self.virtual_address <= rva < self.virtual_address + self.mapped_size

    def header_bytes(self) -> bytes:
        return _SECTION.pack(self.name, self.virtual_size, self.virtual_address, self.raw_size,
                             self.raw_offset, self.ptr_relocs, self.ptr_linenos,
                             self.n_relocs, self.n_linenos, self.characteristics)


@dataclass
class DataDirectory:
    rva: int
    size: int


# --------------------------------------------------------------------------- image

@dataclass
class PeImage:
    arch: Arch
    raw: bytes  # file bytes up to the end of section data: canvas for padding and gaps
    e_lfanew: int
    machine: int
    timestamp: int
    ptr_symbols: int
    n_symbols: int
    size_of_opt_header: int
    file_characteristics: int
    opt: dict[str, int]
    dirs: list[DataDirectory]
    sections: list[Section]
    overlay: bytes = b""
    _relocs: Optional[RelocationTable] = field(default=None, repr=False)

    # -- geometry helpers
    @property
    def image_base(self) -> int:
        return self.opt["image_base"]

    @property
    def entry_point(self) -> int:
        return self.opt["entry_point"]

    @entry_point.setter
    def entry_point(self, rva: int) -> None:
        self.opt["entry_point"] = rva

    @property
    def section_alignment(self) -> int:
        return self.opt["section_alignment"]

    @property
    def file_alignment(self) -> int:
        return self.opt["file_alignment"]

    @property
    def size_of_image(self) -> int:
        return self.opt["size_of_image"]

    @property
    def checksum(self) -> int:
        return self.opt["checksum"]

    @property
    def opt_header_offset(self) -> int:
        return self.e_lfanew + _COFF.size

    @property
    def section_table_offset(self) -> int:
        return self.opt_header_offset + self.size_of_opt_header

    @property
    def checksum_offset(self) -> int:
        return self.opt_header_offset + 64

    def directory(self, index: int) -> Optional[DataDirectory]:
        if index < len(self.dirs) and self.dirs[index].rva:
            return self.dirs[index]
        return None

    def section_for_rva(self, rva: int) -> Optional[Section]:
        for s in self.sections:
            if s.contains_rva(rva):
                return s
        return None

    def section_by_name(self, name: str) -> Optional[Section]:
        for s in self.sections:
            if s.name_str == name:
                return s
        return None

    def read(self, rva: int, size: int) -> bytes:
        """Read ``size`` bytes at ``rva`` as mapped (uninitialised tail reads as zero)."""
        sec = self.section_for_rva(rva)
        if sec is None:
            hdr_end = self.opt["size_of_headers"]
            if rva + size <= hdr_end:
                return self.serialize()[rva:rva + size]
            raise PeError(f"rva {rva:#x} not mapped")
        off = rva - sec.virtual_address
        chunk = bytes(sec.data[off:off + size])
        if len(chunk) < size:
            if rva + size > sec.virtual_address + sec.mapped_size:
                raise PeError(f"read {rva:#x}+{size:#x} crosses section end")
            chunk += b"\0" * (size - len(chunk))
        return chunk

    def write(self, rva: int, data: bytes) -> None:
        sec = self.section_for_rva(rva)
        if sec is None:
            raise PeError(f"rva {rva:#x} not mapped")
        off = rva - sec.virtual_address
        if off + len(data) > sec.raw_size:
            raise PeError(f"write {rva:#x}+{len(data):#x} beyond raw data of {sec.name_str}")
        sec.data[off:off + len(data)] = data
        d = self.directory(DIR_BASERELOC)
        if d is not None and rva < d.rva + d.size and d.rva < rva + len(data):
            self._relocs = None

    def read_ptr(self, rva: int) -> int:
        size = self.arch.ptr_size
        return int.from_bytes(self.read(rva, size), "little")

    def rva_to_offset(self, rva: int) -> int:
        sec = self.section_for_rva(rva)
        if sec is None or rva - sec.virtual_address >= sec.raw_size:
            raise PeError(f"rva {rva:#x} has no file backing")
        return sec.raw_offset + rva - sec.virtual_address

    # -- relocations
    @property
    def relocations(self) -> RelocationTable:
        if self._relocs is None:
            d = self.directory(DIR_BASERELOC)
            self._relocs = RelocationTable.decode(self.read(d.rva, d.size)) if d and d.size else RelocationTable()
        return self._relocs

    def set_relocations(self, table: RelocationTable, rva: int) -> None:
        """Write ``table`` at ``rva`` (which must have room) and point the directory at it."""
        blob = table.encode()
        self.write(rva, blob)
        self.dirs[DIR_BASERELOC] = DataDirectory(rva if blob else 0, len(blob))
        self._relocs = RelocationTable.decode(blob)

    # -- structure
    def validate(self) -> None:
        prev_va_end = 0
        prev_raw_end = 0
        for s in self.sections:
            if s.virtual_address < prev_va_end:
                raise SectionOverlap(f"section {s.name_str} overlaps its predecessor")
            prev_va_end = s.virtual_address + align_up(s.mapped_size, self.section_alignment)
            if s.raw_size:
                if s.raw_offset < prev_raw_end:
                    raise SectionOverlap(f"section {s.name_str} raw data overlaps its predecessor")
                prev_raw_end = s.raw_offset + s.raw_size

    def headers_end(self) -> int:
        return self.section_table_offset + _SECTION.size * len(self.sections)

    def _raw_end(self) -> int:
        ends = [s.raw_offset + s.raw_size for s in self.sections if s.raw_size]
        return max(ends + [self.opt["size_of_headers"]])

    def add_section(self, name: str | bytes, size: int, characteristics: int,
                    data: bytes = b"") -> Section:
        """Append a section of ``size`` mapped bytes after the last one."""
        bname = name.encode() if isinstance(name, str) else bytes(name)
        if len(bname) > 8:
            raise NameTooLong(f"section name {bname!r} exceeds 8 bytes")
        if size <= 0:
            raise ValueError("section size must be positive")
        if len(data) > size:
            raise ValueError("initial data larger than section")
        fa, sa = self.file_alignment, self.section_alignment
        if self.headers_end() + _SECTION.size > self.opt["size_of_headers"]:
            self._grow_headers()
        last = self.sections[-1] if self.sections else None
        va = align_up(last.virtual_address + last.mapped_size, sa) if last else align_up(self.opt["size_of_headers"], sa)
        raw_off = align_up(self._raw_end(), fa)
        raw_size = align_up(size, fa)
        payload = bytearray(data) + bytearray(raw_size - len(data))
        sec = Section(bname.ljust(8, b"\0"), size, va, raw_size, raw_off, characteristics, payload)
        self.sections.append(sec)
        self.file_characteristics &= 0xFFFF
        self._refresh_sizes()
        return sec

    def resize_section(self, sec: Section, size: int) -> None:
        """Grow the last section to ``size`` mapped bytes."""
        if sec is not self.sections[-1]:
            raise PeError("only the last section can be resized")
        sec.virtual_size = size
        new_raw = align_up(size, self.file_alignment)
        if new_raw > sec.raw_size:
            sec.data += bytearray(new_raw - sec.raw_size)
            sec.raw_size = new_raw
        self._refresh_sizes()

    def _grow_headers(self) -> None:
        fa = self.file_alignment
        first_va = min((s.virtual_address for s in self.sections), default=self.section_alignment)
        new_size = align_up(self.headers_end() + _SECTION.size, fa)
        if new_size > first_va:
            raise PeError("no room to grow the header region")
        delta = new_size - self.opt["size_of_headers"]
        delta = align_up(delta, fa)
        for s in self.sections:
            if s.raw_size:
                s.raw_offset += delta
        hdr = self.opt["size_of_headers"]
        self.raw = self.raw[:hdr] + bytes(delta) + self.raw[hdr:]
        self.opt["size_of_headers"] += delta

    def _refresh_sizes(self) -> None:
        last = self.sections[-1]
        self.opt["size_of_image"] = align_up(last.virtual_address + last.mapped_size, self.section_alignment)
        self.opt["size_of_code"] = sum(s.raw_size for s in self.sections if s.characteristics & SCN_CNT_CODE)
        self.opt["size_of_init_data"] = sum(
            s.raw_size for s in self.sections if s.characteristics & SCN_CNT_INITIALIZED_DATA)

    def strip_certificate(self) -> bool:
        d = self.directory(DIR_SECURITY)
        if d is None:
            return False
        raw_end = self._raw_end()
        if d.rva >= raw_end:
            cut = d.rva - raw_end
            self.overlay = self.overlay[:cut]
        self.dirs[DIR_SECURITY] = DataDirectory(0, 0)
        return True

    # -- serialization
    def header_bytes(self) -> bytes:
        fields = _OPT32_FIELDS if self.arch is Arch.PE32 else _OPT64_FIELDS
        fmt = _OPT32 if self.arch is Arch.PE32 else _OPT64
        opt = bytearray(fmt.pack(*(self.opt[f] for f in fields)))
        for d in self.dirs:
            opt += struct.pack("<II", d.rva, d.size)
        coff = _COFF.pack(b"PE\0\0", self.machine, len(self.sections), self.timestamp,
                          self.ptr_symbols, self.n_symbols, self.size_of_opt_header,
                          self.file_characteristics)
        return coff + bytes(opt)

    def serialize(self) -> bytes:
        hdr_size = self.opt["size_of_headers"]
        canvas = bytearray(self.raw)
        end = self._raw_end()
        if len(canvas) < end:
            canvas += bytearray(end - len(canvas))
        del canvas[end:]
        hdr = self.header_bytes()
        canvas[self.e_lfanew:self.e_lfanew + len(hdr)] = hdr
        pos = self.section_table_offset
        for s in self.sections:
            canvas[pos:pos + _SECTION.size] = s.header_bytes()
            pos += _SECTION.size
        if pos > hdr_size:
            raise PeError("section table overflows the header region")
        for s in self.sections:
            if s.raw_size:
                blob = bytes(s.data[:s.raw_size]).ljust(s.raw_size, b"\0")
                canvas[s.raw_offset:s.raw_offset + s.raw_size] = blob
        return bytes(canvas) + self.overlay

    def clone(self) -> "PeImage":
        return parse(self.serialize())


def detect_arch(data: bytes) -> Arch:
    """Architecture from the optional-header magic."""
    e_lfanew = _nt_offset(data)
    off = e_lfanew + _COFF.size
    if len(data) < off + 2:
        raise MalformedHeader("truncated optional header")
    magic = struct.unpack_from("<H", data, off)[0]
    if magic == MAGIC_PE32:
        return Arch.PE32
    if magic == MAGIC_PE64:
        return Arch.PE64
    raise MalformedHeader(f"unknown optional header magic {magic:#x}")


def _nt_offset(data: bytes) -> int:
    if len(data) < 64 or data[:2] != b"MZ":
        raise MalformedHeader("missing DOS signature")
    e_lfanew = struct.unpack_from("<I", data, 0x3C)[0]
    if e_lfanew + _COFF.size > len(data):
        raise MalformedHeader("NT header beyond end of file")
    if data[e_lfanew:e_lfanew + 4] != b"PE\0\0":
        raise MalformedHeader("missing PE signature")
    return e_lfanew


def parse(data: bytes) -> PeImage:
    data = bytes(data)
    e_lfanew = _nt_offset(data)
    arch = detect_arch(data)
    (_, machine, nsec, ts, psym, nsym, opt_size, chars) = _COFF.unpack_from(data, e_lfanew)
    opt_off = e_lfanew + _COFF.size
    fmt, names = (_OPT32, _OPT32_FIELDS) if arch is Arch.PE32 else (_OPT64, _OPT64_FIELDS)
    if opt_size < fmt.size or opt_off + opt_size > len(data):
        raise MalformedHeader("truncated optional header")
    opt = dict(zip(names, fmt.unpack_from(data, opt_off)))
    ndirs = opt["number_of_rva_and_sizes"]
    if fmt.size + 8 * ndirs > opt_size:
        raise MalformedHeader("data directories exceed optional header")
    dirs = [DataDirectory(*struct.unpack_from("<II", data, opt_off + fmt.size + 8 * i)) for i in range(ndirs)]
    sec_off = opt_off + opt_size
    if sec_off + nsec * _SECTION.size > len(data):
        raise MalformedHeader("truncated section table")
    sections = []
    for i in range(nsec):
        (name, vsize, va, rsize, roff, prel, plin, nrel, nlin, sch) = _SECTION.unpack_from(data, sec_off + i * _SECTION.size)
        if rsize and roff + rsize > len(data):
            raise SectionOutOfBounds(f"section {name.rstrip(bytes(1))!r} raw data beyond end of file")
        sections.append(Section(name, vsize, va, rsize, roff, sch, bytearray(data[roff:roff + rsize]) if rsize else bytearray(),
                                prel, plin, nrel, nlin))
    raw_end = max([s.raw_offset + s.raw_size for s in sections if s.raw_size] + [opt["size_of_headers"]])
    raw_end = min(raw_end, len(data))
    img = PeImage(arch, data[:raw_end], e_lfanew, machine, ts, psym, nsym, opt_size, chars, opt, dirs,
                  sections, overlay=data[raw_end:])
    img.validate()
    return img


def serialize(img: PeImage) -> bytes:
    return img.serialize()


def compute_checksum(data: bytes, checksum_offset: int) -> int:
    """PE image checksum over ``data`` with the checksum field treated as zero."""
    buf = bytearray(data)
    buf[checksum_offset:checksum_offset + 4] = b"\0\0\0\0"
    if len(buf) % 2:
        buf.append(0)
    total = 0
    for (word,) in struct.iter_unpack("<H", buf):
        total += word
        total = (total & 0xFFFF) + (total >> 16)
    total = (total & 0xFFFF) + (total >> 16)
    return (total & 0xFFFF) + len(data)


def update_checksum(img: PeImage) -> int:
    img.opt["checksum"] = 0
    value = compute_checksum(img.serialize(), img.checksum_offset)
    img.opt["checksum"] = value
    return value


def verify_checksum(data: bytes) -> bool:
    img = parse(data)
    return img.checksum == compute_checksum(data, img.checksum_offset)


# --------------------------------------------------------------------------- exports / imports

def _cstring(img: PeImage, rva: int, limit: int = 512) -> str:
    sec = img.section_for_rva(rva)
    if sec is None:
        return ""
    off = rva - sec.virtual_address
    raw = bytes(sec.data[off:off + limit])
    return raw.split(b"\0", 1)[0].decode("latin-1")


def exports(img: PeImage) -> list[tuple[int, Optional[str]]]:
    """(rva, name) for every exported function; forwarders are skipped."""
    d = img.directory(DIR_EXPORT)
    if d is None:
        return []
    (_, _, _, _, _, _, nfuncs, nnames, afuncs, anames, aords) = struct.unpack("<IIHHIIIIIII", img.read(d.rva, 40))
    names: dict[int, str] = {}
    for i in range(nnames):
        name_rva = struct.unpack("<I", img.read(anames + 4 * i, 4))[0]
        ordinal = struct.unpack("<H", img.read(aords + 2 * i, 2))[0]
        names[ordinal] = _cstring(img, name_rva)
    out = []
    for i in range(nfuncs):
        rva = struct.unpack("<I", img.read(afuncs + 4 * i, 4))[0]
        if rva == 0 or d.rva <= rva < d.rva + d.size:
            continue
        out.append((rva, names.get(i)))
    return out


def export_slots(img: PeImage) -> list[int]:
    """RVAs of the export-address-table cells (for redirecting exports)."""
    d = img.directory(DIR_EXPORT)
    if d is None:
        return []
    nfuncs, afuncs = struct.unpack_from("<I4xI", img.read(d.rva + 20, 12))
    return [afuncs + 4 * i for i in range(nfuncs)]


def imports(img: PeImage) -> list[tuple[int, str]]:
    """(iat slot rva, "dll!name") for every named or ordinal import."""
    d = img.directory(DIR_IMPORT)
    if d is None:
        return []
    ptr = img.arch.ptr_size
    ord_flag = 1 << (ptr * 8 - 1)
    out = []
    pos = d.rva
    while True:
        desc = img.read(pos, 20)
        ilt, _, _, name_rva, iat = struct.unpack("<IIIII", desc)
        if not (ilt or name_rva or iat):
            break
        dll = _cstring(img, name_rva)
        lookup = ilt or iat
        i = 0
        while True:
            entry = img.read_ptr(lookup + i * ptr)
            if entry == 0:
                break
            if entry & ord_flag:
                name = f"#{entry & 0xFFFF}"
            else:
                name = _cstring(img, (entry & 0x7FFFFFFF) + 2)
            out.append((iat + i * ptr, f"{dll}!{name}"))
            i += 1
        pos += 20
    return out
