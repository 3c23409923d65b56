"""Synthetic PE programs over the sandbox instruction subset.

Every generated program terminates (loops have constant trip counts, calls
only go to later functions), never faults, and leaves no code address in a
live register or live memory cell.  The last point matters for inline-mode
comparisons, where code pointers legitimately differ.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .asm import CC, EAX, EBX, ECX, EDI, EDX, ESI, R8, R9, R11, Asm, Mem, Ref
from .pebuild import DATA, RDATA, TEXT, BuildSpec, SectionSpec, build_pe, section_rvas

TEXT_RVA = 0x1000
_CONDS = [c for c in CC if c not in ("p", "np")]
BUF_SIZE = 64
N_GLOBALS = 4


@dataclass
class Fixture:
    data: bytes
    bits: int
    functions: dict[str, int]  # name -> rva
    symbols: dict[str, int] = field(default_factory=dict)  # data labels -> rva
    seed: Optional[int] = None
    input_rva: Optional[int] = None
    input_len_rva: Optional[int] = None
    input_cap: int = 0
    jump_tables: list[list[int]] = field(default_factory=list)  # planted case RVAs per switch


@dataclass
class _Table:
    label: str
    cases: list[str]


class _Gen:
    def __init__(self, rng: random.Random, bits: int, nfuncs: int):
        self.rng = rng
        self.bits = bits
        self.a = Asm(bits)
        self.gp = [EAX, ECX, EDX, EBX] + ([R8, R9] if bits == 64 else [])
        self.nfuncs = nfuncs
        self.n = 0
        self.tables: list[_Table] = []
        self.cur = 0
        self.size = 0  # statements emitted so far, bounds program length

    def lbl(self, p: str) -> str:
        self.n += 1
        return f".{p}{self.n}"

    def reg(self, *avoid: int) -> int:
        return self.rng.choice([r for r in self.gp if r not in avoid])

    def imm(self) -> int:
        return self.rng.choice([0, 1, 2, 3, 7, 0x7F, 0x80, 0xFF, 0x7FFFFFFF, -1, -2, -0x80000000,
                                self.rng.randrange(-(1 << 31), 1 << 31)])

    # memory operands
    def buf_mem(self, idx: int) -> Mem:
        if self.bits == 32:
            return Mem(index=idx, ref=Ref("buf"))
        self.a.lea(R11, Mem(ref=Ref("buf")), w=True)
        return Mem(base=R11, index=idx)

    def glob(self, k: int) -> Mem:
        return Mem(ref=Ref(f"g{k}"))

    # statements ------------------------------------------------------------
    def stmt(self, depth: int, in_loop: bool, counters: list[int]) -> None:
        rng, a = self.rng, self.a
        self.size += 1
        kinds = ["arith"] * 4 + ["store_idx"] * 2 + ["store_g", "load_g", "load_idx", "short_if", "short_if",
                                                        "push_pop"]
        if depth < 3 and self.size < 60:
            kinds += ["if", "if"]
        if depth < 2 and counters and self.size < 60:
            kinds.append("loop")
        if self.cur + 1 < self.nfuncs:
            kinds += ["call", "icall"]
        if depth < 2 and self.size < 60:
            kinds.append("switch")
        k = rng.choice(kinds)
        w = self.bits == 64 and rng.random() < 0.3
        if k == "arith":
            r = self.reg()
            op = rng.randrange(9)
            if op == 0:
                a.mov_ri(r, self.imm())
            elif op == 1:
                a.alu_rr(rng.choice(["add", "sub", "xor", "and", "or"]), r, self.reg(), w)
            elif op == 2:
                a.alu_ri(rng.choice(["add", "sub", "xor", "and", "or"]), r, self.imm(), w)
            elif op == 3:
                (a.inc if rng.random() < 0.5 else a.dec)(r, w)
            elif op == 4:
                a.lea(r, Mem(base=self.reg(), index=self.reg(), scale=rng.choice([1, 2, 4, 8]),
                             disp=rng.randrange(-100, 100)), w)
            elif op == 5:
                a._op(b"\xc1", rng.choice([4, 5, 7]), r, w, rng.randrange(1, 31), 1)
            elif op == 6:
                a.mov_rr(r, self.reg(), w)
            elif op == 7:
                a._op(b"\xf7", rng.choice([2, 3]), r, w)
            else:
                a.alu_rr("xor", r, r)
        elif k == "store_idx":
            idx = self.reg()
            val = self.reg(idx)
            a.alu_ri("and", idx, BUF_SIZE - 4)
            m = self.buf_mem(idx)
            if val in (EAX, ECX, EDX, EBX) and rng.random() < 0.3:
                a.mov_m8r(m, val)
            else:
                a.mov_mr(m, val)
        elif k == "store_g":
            a.mov_mr(self.glob(rng.randrange(N_GLOBALS)), self.reg())
        elif k == "load_g":
            a.mov_rm(self.reg(), self.glob(rng.randrange(N_GLOBALS)))
        elif k == "load_idx":
            idx = self.reg()
            a.alu_ri("and", idx, BUF_SIZE - 1)
            m = self.buf_mem(idx)
            a.movzx8(self.reg(), m)
        elif k == "short_if":
            r = self.reg()
            end = self.lbl("s")
            if rng.random() < 0.5:
                a.alu_ri("cmp", r, rng.randrange(-100, 100))
            else:
                a.test_rr(r, self.reg())
            a.jcc(rng.choice(_CONDS), end)
            # tiny block with a leader right behind it
            if rng.random() < 0.5:
                (a.inc if rng.random() < 0.5 else a.dec)(self.reg())
            else:
                r2 = self.reg()
                a.alu_rr("xor", r2, r2)
            a.label(end)
        elif k == "push_pop":
            a.push(self.reg())
            self.stmt_arith_only()
            a.pop(self.reg())
        elif k == "if":
            r = self.reg()
            els, end = self.lbl("else"), self.lbl("end")
            a.alu_ri("cmp", r, self.imm())
            a.jcc(rng.choice(_CONDS), els)
            for _ in range(rng.randrange(1, 3)):
                self.stmt(depth + 1, in_loop, counters)
            a.jmp(end)
            a.label(els)
            for _ in range(rng.randrange(1, 3)):
                self.stmt(depth + 1, in_loop, counters)
            a.label(end)
        elif k == "loop":
            c = counters[0]
            top = self.lbl("loop")
            a.mov_ri(c, rng.randrange(1, 4))
            a.label(top)
            for _ in range(rng.randrange(1, 3)):
                self.stmt(depth + 1, True, counters[1:])
            a.dec(c)
            a.jcc("ne", top)
        elif k in ("call", "icall"):
            if in_loop:
                callee = self.nfuncs - 1
            else:
                callee = rng.randrange(self.cur + 1, self.nfuncs)
            f = f"f{callee}"
            if k == "call":
                a.call(f)
            elif self.bits == 32:
                if rng.random() < 0.5:
                    a.mov_ri(EAX, Ref(f))
                    a.call_r(EAX)
                else:
                    a.call_m(Mem(ref=Ref("fptr", 4 * callee)))
                a.mov_ri(EAX, self.imm())
            else:
                if rng.random() < 0.5:
                    a.lea(EAX, Mem(ref=Ref(f)), w=True)
                    a.call_r(EAX)
                else:
                    a.lea(EAX, Mem(ref=Ref("fptr")), w=True)
                    a.call_m(Mem(base=EAX, disp=8 * callee))
                a.mov_ri(EAX, self.imm())
        elif k == "switch":
            n = rng.choice([2, 4])
            r = self.reg()
            t = _Table(self.lbl("jt").lstrip("."), [self.lbl("case") for _ in range(n)])
            self.tables.append(t)
            end = self.lbl("swend")
            a.alu_ri("and", r, n - 1)
            if self.bits == 32:
                a.jmp_m(Mem(index=r, scale=4, ref=Ref(t.label)))
            else:
                a.lea(R11, Mem(ref=Ref(t.label)), w=True)
                a.movsxd(r, Mem(base=R11, index=r, scale=4))
                a.alu_rr("add", r, R11, w=True)
                a.jmp_r(r)
            for case in t.cases:
                a.label(case)
                if self.bits == 64:
                    # the dispatch registers held code/table addresses
                    a.mov_ri(r, self.imm())
                    a.mov_ri(R11, self.imm())
                for _ in range(rng.randrange(1, 3)):
                    self.stmt(depth + 1, in_loop, counters)
                a.jmp(end)
            a.label(end)

    def stmt_arith_only(self) -> None:
        r = self.reg()
        self.a.alu_ri(self.rng.choice(["add", "xor", "or"]), r, self.imm())

    def function(self, k: int) -> None:
        a, rng = self.a, self.rng
        self.cur = k
        self.size = 0
        a.align(rng.choice([1, 4, 16]))
        a.label(f"f{k}")
        if k == 0:
            # entry block: no memory writes, comfortably >= 5 bytes
            a.mov_ri(EAX, rng.randrange(1 << 31))
            a.mov_ri(ECX, rng.randrange(1 << 31))
            nxt = self.lbl("go")
            a.jmp(nxt)
            a.label(nxt)
        else:
            # eax may still hold this function's address (indirect call); never observe it
            a.mov_ri(EAX, self.imm())
        a.push(ESI)
        a.push(EDI)
        for _ in range(rng.randrange(2, 7)):
            self.stmt(0, False, [ESI, EDI])
        a.pop(EDI)
        a.pop(ESI)
        a.ret()


def random_program(seed: int, bits: int = 32, *, nfuncs: Optional[int] = None,
                   exports: bool = True, tls: bool = False) -> Fixture:
    """Generate a terminating program with loops, calls, switches and tiny blocks."""
    rng = random.Random(seed)
    nfuncs = nfuncs or rng.randrange(1, 5)
    g = _Gen(rng, bits, nfuncs)
    for k in range(nfuncs):
        g.function(k)
    return _link(g, bits, seed, exports, tls)


def _link(g: _Gen, bits: int, seed: Optional[int], exports: bool, tls: bool,
          extra_data: bytes = b"", extra_labels: Optional[dict[str, int]] = None,
          entry_label: str = "f0", data_exports: Sequence[str] = ()) -> Fixture:
    base = 0x00400000 if bits == 32 else 0x140000000
    ptr = bits // 8
    # .rdata: jump tables (each followed by a zero terminator), then function pointers
    rdata_layout: dict[str, int] = {}
    off = 0
    for t in g.tables:
        rdata_layout[t.label] = off
        off += 4 * (len(t.cases) + 1)
    off = (off + 7) & ~7
    rdata_layout["fptr"] = off
    off += ptr * g.nfuncs
    rdata_size = max(off, 8)
    data_layout = {"buf": 0}
    for k in range(N_GLOBALS):
        data_layout[f"g{k}"] = BUF_SIZE + 4 * k
    data_size = BUF_SIZE + 4 * N_GLOBALS
    for name, o in (extra_labels or {}).items():
        data_layout[name] = data_size + o
    data_size += len(extra_data)

    # first pass with placeholders to learn the code size
    placeholder = {k: 0x100000 for k in list(rdata_layout) + list(data_layout)}
    asm1 = g.a.assemble(TEXT_RVA, placeholder, base)
    text_size = len(asm1.code)
    rdata_rva = (TEXT_RVA + text_size + 0xFFF) & ~0xFFF
    data_rva = (rdata_rva + rdata_size + 0xFFF) & ~0xFFF
    syms = {k: rdata_rva + v for k, v in rdata_layout.items()}
    syms.update({k: data_rva + v for k, v in data_layout.items()})
    asm = g.a.assemble(TEXT_RVA, syms, base)
    assert len(asm.code) == text_size
    labels = {k: TEXT_RVA + v for k, v in asm.labels.items()}

    relocs = [(TEXT_RVA + o, 3 if s == 4 else 10) for o, s in asm.relocs]
    rdata = bytearray(rdata_size)
    for t in g.tables:
        tro = rdata_layout[t.label]
        for j, case in enumerate(t.cases):
            if bits == 32:
                rdata[tro + 4 * j:tro + 4 * j + 4] = (base + labels[case]).to_bytes(4, "little")
                relocs.append((rdata_rva + tro + 4 * j, 3))
            else:
                rel = labels[case] - (rdata_rva + tro)
                rdata[tro + 4 * j:tro + 4 * j + 4] = (rel & 0xFFFFFFFF).to_bytes(4, "little")
    fo = rdata_layout["fptr"]
    for k in range(g.nfuncs):
        rdata[fo + ptr * k:fo + ptr * (k + 1)] = (base + labels[f"f{k}"]).to_bytes(ptr, "little")
        relocs.append((rdata_rva + fo + ptr * k, 3 if bits == 32 else 10))
    data = bytearray(data_size)
    rng = random.Random(seed)
    data[:BUF_SIZE + 4 * N_GLOBALS] = bytes(rng.randrange(256) for _ in range(BUF_SIZE + 4 * N_GLOBALS))
    data[BUF_SIZE + 4 * N_GLOBALS:] = extra_data

    funcs = {f"f{k}": labels[f"f{k}"] for k in range(g.nfuncs)}
    exp = [(f"fn_{k}", labels[f"f{k}"]) for k in range(1, g.nfuncs)] if exports else []
    exp += [(name, syms[name]) for name in data_exports]
    tls_spec = None
    if tls:
        tls_spec = {"template": bytes(range(1, 9)), "callbacks": [labels[f"f{g.nfuncs - 1}"]]}
    spec = BuildSpec(bits=bits, sections=[SectionSpec(".text", asm.code, TEXT),
                                          SectionSpec(".rdata", bytes(rdata), RDATA),
                                          SectionSpec(".data", bytes(data), DATA)],
                     entry_rva=labels[entry_label], relocs=relocs, exports=exp, tls=tls_spec)
    assert section_rvas(spec)[1:] == [rdata_rva, data_rva]
    fx = Fixture(build_pe(spec), bits, funcs, syms, seed)
    fx.jump_tables = [[labels[c] for c in t.cases] for t in g.tables]
    return fx


def planted_bug(bits: int = 32, guard: bytes = b"FUZ", cap: int = 64) -> Fixture:
    """Reads ``input``; crashes with an unmapped write iff it starts with ``guard``.

    Each guard byte sits behind its own branch so coverage feedback can find
    them one at a time.
    """
    g = _Gen(random.Random(0), bits, 1)
    a = g.a
    a.label("f0")
    a.mov_ri(EAX, 0)
    a.mov_ri(ECX, 0)
    done = ".done"
    a.jmp(".go")
    a.label(".go")
    a.push(ESI)
    a.push(EDI)
    lenm = Mem(ref=Ref("input_len"))
    a.mov_rm(EDX, lenm)
    a.alu_ri("cmp", EDX, len(guard))
    a.jcc("b", done)
    for k, ch in enumerate(guard):
        a.movzx8(EAX, Mem(ref=Ref("input", k)))
        a.alu_ri("cmp", EAX, ch)
        a.jcc("ne", done)
        a.alu_ri("add", ECX, k + 1)
    # all guards passed: store to an unmapped address
    a.mov_ri(EBX, 0xDEAD0000)
    a.mov_mr(Mem(base=EBX), ECX)
    a.label(done)
    # some harmless work on the rest of the input
    a.mov_ri(ESI, 0)
    a.label(".sum")
    a.alu_rr("cmp", ESI, EDX)
    a.jcc("ae", ".out")
    if bits == 32:
        a.movzx8(EAX, Mem(index=ESI, ref=Ref("input")))
    else:
        a.lea(R11, Mem(ref=Ref("input")), w=True)
        a.movzx8(EAX, Mem(base=R11, index=ESI))
    a.alu_rr("add", ECX, EAX)
    a.inc(ESI)
    a.alu_ri("cmp", ESI, 8)
    a.jcc("b", ".sum")
    a.label(".out")
    a.pop(EDI)
    a.pop(ESI)
    a.ret()
    extra = bytes(4 + cap)
    fx = _link(g, bits, None, exports=False, tls=False, extra_data=extra,
               extra_labels={"input_len": 0, "input": 4},
               data_exports=("input", "input_len"))
    fx.input_rva = fx.symbols["input"]
    fx.input_len_rva = fx.symbols["input_len"]
    fx.input_cap = cap
    return fx


def jump_table_fixture(bits: int, entries: int = 3, break_at: Optional[int] = None) -> tuple[bytes, list[int]]:
    """A single switch with ``entries`` cases; returns (file, planted target RVAs).

    ``break_at`` makes that entry point outside the text section.
    """
    base = 0x00400000 if bits == 32 else 0x140000000
    a = Asm(bits)
    a.label("f0")
    a.alu_ri("and", EAX, 3)
    if bits == 32:
        a.jmp_m(Mem(index=EAX, scale=4, ref=Ref("table")))
    else:
        a.lea(EDX, Mem(ref=Ref("table")), w=True)
        a.movsxd(EAX, Mem(base=EDX, index=EAX, scale=4))
        a.alu_rr("add", EAX, EDX, w=True)
        a.jmp_r(EAX)
    for k in range(entries):
        a.label(f"c{k}")
        a.mov_ri(ECX, k)
        a.ret()
    code = a.assemble(TEXT_RVA, {"table": 0x2000}, base)
    rdata_rva = (TEXT_RVA + len(code.code) + 0xFFF) & ~0xFFF
    code = a.assemble(TEXT_RVA, {"table": rdata_rva}, base)
    targets = [TEXT_RVA + code.labels[f"c{k}"] for k in range(entries)]
    table = bytearray()
    relocs = [(TEXT_RVA + o, 3 if s == 4 else 10) for o, s in code.relocs]
    for k, t in enumerate(targets):
        v = t if break_at != k else 0x7FFF0000
        if bits == 32:
            table += (base + v).to_bytes(4, "little") if break_at != k else (0x10).to_bytes(4, "little")
            relocs.append((rdata_rva + 4 * k, 3))
        else:
            table += ((v - rdata_rva) & 0xFFFFFFFF).to_bytes(4, "little")
    table += bytes(4)
    spec = BuildSpec(bits=bits, sections=[SectionSpec(".text", code.code, TEXT),
                                          SectionSpec(".rdata", bytes(table), RDATA)],
                     relocs=relocs)
    return build_pe(spec), targets


def corpus(n: int, bits_choices=(32, 64), start: int = 0) -> list[Fixture]:
    return [random_program(start + k, bits_choices[k % len(bits_choices)]) for k in range(n)]
