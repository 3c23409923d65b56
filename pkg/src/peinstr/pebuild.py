"""Write PE32/PE32+ files from scratch.

This writer shares no code with :mod:`peinstr.pe`; the test-suite uses it as
an independent producer of fixtures that the parser must read back exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

IMAGE_BASE_32 = 0x00400000
IMAGE_BASE_64 = 0x0000000140000000

TEXT = 0x60000020  # code | execute | read
RDATA = 0x40000040  # initialized | read
DATA = 0xC0000040  # initialized | read | write


@dataclass
class SectionSpec:
    name: str
    data: bytes
    characteristics: int
    virtual_size: Optional[int] = None


@dataclass
class BuildSpec:
    bits: int = 32
    sections: list[SectionSpec] = field(default_factory=list)
    entry_rva: int = 0x1000
    image_base: Optional[int] = None
    relocs: Sequence[tuple[int, int]] = ()  # (rva, type) ; type 3 HIGHLOW / 10 DIR64
    exports: Sequence[tuple[str, int]] = ()
    imports: dict[str, Sequence[str]] = field(default_factory=dict)
    tls: Optional[dict] = None  # raw template bytes + callbacks (rvas) + index rva
    overlay: bytes = b""
    file_alignment: int = 0x200
    section_alignment: int = 0x1000
    dll: bool = False
    checksum: int = 0
    timestamp: int = 0x5F000000
    extra_dirs: dict[int, tuple[int, int]] = field(default_factory=dict)


def _up(v: int, a: int) -> int:
    return (v + a - 1) // a * a


def _reloc_blob(relocs: Sequence[tuple[int, int]]) -> bytes:
    pages: dict[int, list[int]] = {}
    for rva, typ in sorted(set(relocs)):
        pages.setdefault(rva >> 12 << 12, []).append((typ << 12) | (rva & 0xFFF))
    out = b""
    for page in sorted(pages):
        words = pages[page]
        if len(words) & 1:
            words = words + [0]
        out += struct.pack("<II", page, 8 + 2 * len(words)) + struct.pack("<%dH" % len(words), *words)
    return out


def build_pe(spec: BuildSpec) -> bytes:
    """Produce file bytes for ``spec``.

    Section RVAs are assigned in order from ``section_alignment``; export,
    import, TLS and relocation data are appended as extra sections
    (``.edata``, ``.idata``, ``.tls``, ``.reloc``) when requested.
    """
    bits = spec.bits
    sa, fa = spec.section_alignment, spec.file_alignment
    base = spec.image_base if spec.image_base is not None else (IMAGE_BASE_32 if bits == 32 else IMAGE_BASE_64)
    ptr = 4 if bits == 32 else 8
    secs = [SectionSpec(s.name, bytes(s.data), s.characteristics, s.virtual_size) for s in spec.sections]
    relocs = list(spec.relocs)
    dirs = [(0, 0)] * 16
    for k, v in spec.extra_dirs.items():
        dirs[k] = v

    def next_rva() -> int:
        rva = sa
        for s in secs:
            rva = _up(rva + max(len(s.data), s.virtual_size or 0), sa)
        return rva

    if spec.exports:
        rva0 = next_rva()
        names = sorted(spec.exports)
        n = len(names)
        dll_name = b"fixture.dll\0"
        hdr_size = 40
        funcs_off = hdr_size
        names_off = funcs_off + 4 * n
        ords_off = names_off + 4 * n
        str_off = ords_off + 2 * n
        strings = bytearray(dll_name)
        name_rvas = []
        for nm, _ in names:
            name_rvas.append(rva0 + str_off + len(strings))
            strings += nm.encode() + b"\0"
        blob = struct.pack("<IIHHIIIIIII", 0, 0, 0, 0, rva0 + str_off, 1, n, n,
                           rva0 + funcs_off, rva0 + names_off, rva0 + ords_off)
        blob += b"".join(struct.pack("<I", r) for _, r in names)
        blob += b"".join(struct.pack("<I", r) for r in name_rvas)
        blob += b"".join(struct.pack("<H", i) for i in range(n))
        blob += bytes(strings)
        secs.append(SectionSpec(".edata", blob, RDATA))
        dirs[0] = (rva0, len(blob))

    if spec.imports:
        rva0 = next_rva()
        dlls = list(spec.imports.items())
        desc_size = 20 * (len(dlls) + 1)
        # layout: descriptors | per dll: ILT, IAT | hint/name strings
        pos = desc_size
        ilt_pos, iat_pos = [], []
        for _, fns in dlls:
            ilt_pos.append(pos)
            pos += ptr * (len(fns) + 1)
            iat_pos.append(pos)
            pos += ptr * (len(fns) + 1)
        strings = bytearray()
        str_base = pos
        hint_rvas: list[list[int]] = []
        dll_rvas = []
        for dll, fns in dlls:
            dll_rvas.append(rva0 + str_base + len(strings))
            strings += dll.encode() + b"\0"
            if len(strings) & 1:
                strings += b"\0"
            hr = []
            for fn in fns:
                hr.append(rva0 + str_base + len(strings))
                strings += b"\0\0" + fn.encode() + b"\0"
                if len(strings) & 1:
                    strings += b"\0"
            hint_rvas.append(hr)
        blob = bytearray(str_base) + strings
        for i, (dll, fns) in enumerate(dlls):
            struct.pack_into("<IIIII", blob, 20 * i, rva0 + ilt_pos[i], 0, 0, dll_rvas[i], rva0 + iat_pos[i])
            fmt = "<I" if ptr == 4 else "<Q"
            for j, hr in enumerate(hint_rvas[i]):
                struct.pack_into(fmt, blob, ilt_pos[i] + ptr * j, hr)
                struct.pack_into(fmt, blob, iat_pos[i] + ptr * j, hr)
        secs.append(SectionSpec(".idata", bytes(blob), DATA))
        dirs[1] = (rva0, desc_size)

    if spec.tls is not None:
        rva0 = next_rva()
        template = bytes(spec.tls.get("template", b"\0" * 8))
        callbacks = list(spec.tls.get("callbacks", ()))
        dir_size = 24 if bits == 32 else 40
        tmpl_off = dir_size
        cb_off = _up(tmpl_off + len(template), ptr)
        idx_off = cb_off + ptr * (len(callbacks) + 1)
        blob = bytearray(idx_off + 4)
        fmt = "<IIIIII" if bits == 32 else "<QQQQII"
        struct.pack_into(fmt, blob, 0, base + rva0 + tmpl_off, base + rva0 + tmpl_off + len(template),
                         base + rva0 + idx_off, base + rva0 + cb_off if callbacks else 0,
                         spec.tls.get("zero_fill", 0), 0)
        blob[tmpl_off:tmpl_off + len(template)] = template
        rtype = 3 if bits == 32 else 10
        for k in range(4 if callbacks else 3):
            relocs.append((rva0 + k * ptr, rtype))
        for j, cb in enumerate(callbacks):
            struct.pack_into("<I" if ptr == 4 else "<Q", blob, cb_off + ptr * j, base + cb)
            relocs.append((rva0 + cb_off + ptr * j, rtype))
        secs.append(SectionSpec(".tls", bytes(blob), DATA))
        dirs[9] = (rva0, dir_size)

    if relocs:
        rva0 = next_rva()
        blob = _reloc_blob(relocs)
        secs.append(SectionSpec(".reloc", blob, 0x42000040))
        dirs[5] = (rva0, len(blob))

    # ---- headers
    e_lfanew = 0x80
    opt_size = (96 if bits == 32 else 112) + 16 * 8
    sec_table = e_lfanew + 24 + opt_size
    size_of_headers = _up(sec_table + 40 * (len(secs) + 8), fa)
    out = bytearray(size_of_headers)
    out[0:2] = b"MZ"
    struct.pack_into("<I", out, 0x3C, e_lfanew)
    stub = b"\x0e\x1f\xba\x0e\x00\xb4\x09\xcd\x21\xb8\x01\x4c\xcd\x21This program cannot be run in DOS mode.\r\r\n$"
    out[0x40:0x40 + len(stub)] = stub

    rva = sa
    raw = size_of_headers
    headers = []
    body = bytearray()
    for s in secs:
        vsize = max(len(s.data), s.virtual_size or 0)
        rsize = _up(len(s.data), fa)
        headers.append(struct.pack("<8sIIIIIIHHI", s.name.encode()[:8], vsize, rva, rsize,
                                   raw if rsize else 0, 0, 0, 0, 0, s.characteristics))
        body += s.data + bytes(rsize - len(s.data))
        raw += rsize
        rva = _up(rva + vsize, sa)
    size_of_image = rva
    size_of_code = sum(_up(len(s.data), fa) for s in secs if s.characteristics & 0x20)
    size_of_idata = sum(_up(len(s.data), fa) for s in secs if s.characteristics & 0x40)
    machine = 0x14C if bits == 32 else 0x8664
    chars = 0x0102 if bits == 32 else 0x0022
    if spec.dll:
        chars |= 0x2000
    struct.pack_into("<4sHHIIIHH", out, e_lfanew, b"PE\0\0", machine, len(secs), spec.timestamp,
                     0, 0, opt_size, chars)
    o = e_lfanew + 24
    if bits == 32:
        struct.pack_into("<HBBIIIIIIIIIHHHHHHIIIIHHIIIIII", out, o,
                         0x10B, 14, 0, size_of_code, size_of_idata, 0, spec.entry_rva, sa, 0, base,
                         sa, fa, 6, 0, 0, 0, 6, 0, 0, size_of_image, size_of_headers, spec.checksum,
                         3, 0x0140, 0x100000, 0x1000, 0x100000, 0x1000, 0, 16)
        d = o + 96
    else:
        struct.pack_into("<HBBIIIIIQIIHHHHHHIIIIHHQQQQII", out, o,
                         0x20B, 14, 0, size_of_code, size_of_idata, 0, spec.entry_rva, sa, base,
                         sa, fa, 6, 0, 0, 0, 6, 0, 0, size_of_image, size_of_headers, spec.checksum,
                         3, 0x0160, 0x100000, 0x1000, 0x100000, 0x1000, 0, 16)
        d = o + 112
    for i, (r, sz) in enumerate(dirs):
        struct.pack_into("<II", out, d + 8 * i, r, sz)
    for i, h in enumerate(headers):
        out[sec_table + 40 * i:sec_table + 40 * (i + 1)] = h
    return bytes(out + body + spec.overlay)


def section_rvas(spec: BuildSpec) -> list[int]:
    """RVAs the writer assigns to ``spec.sections`` (in order)."""
    rva = spec.section_alignment
    out = []
    for s in spec.sections:
        out.append(rva)
        rva = _up(rva + max(len(s.data), s.virtual_size or 0), spec.section_alignment)
    return out
