import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import pefile_rebase
from peinstr import fixtures, pe, sandbox
from peinstr.pebuild import DATA, TEXT, BuildSpec, SectionSpec, build_pe
from peinstr.sandbox import ExitKind, FaultKind


def image(code, bits=32, **kw):
    return pe.parse(build_pe(BuildSpec(bits=bits, sections=[SectionSpec(".text", code, TEXT)], **kw)))


def run_code(code, bits=32, fuel=1000, heads=()):
    img = image(code, bits)
    st_ = sandbox.load_image(img, heads={img.image_base + h for h in heads})
    return sandbox.run(st_, fuel)


@pytest.mark.parametrize("bits", [32, 64])
def test_jnz_not_taken(bits):
    s = run_code(bytes.fromhex("31C0750231C9C3"), bits, heads=(0x1000, 0x1004))
    assert s.exit.kind is ExitKind.Returned
    assert s.rva_trace() == [0x1000, 0x1004]
    assert s.regs[0] == 0 and s.regs[1] == 0


def test_jnz_trace_all_heads():
    s = run_code(bytes.fromhex("31C0750231C9C3"), heads=(0x1000, 0x1004, 0x1006))
    assert s.rva_trace() == [0x1000, 0x1004, 0x1006]


def test_infinite_loop_runs_out_of_fuel():
    s = run_code(b"\xeb\xfe", fuel=100)
    assert s.exit.kind is ExitKind.FuelExhausted
    assert s.steps == 100


@pytest.mark.parametrize("bits", [32, 64])
def test_unmapped_read(bits):
    # mov eax, 0xDEAD0000 ; mov eax, [rax]  (a 64-bit disp32 would sign-extend)
    code = b"\xb8\x00\x00\xad\xde\x8b\x00\xc3"
    s = run_code(code, bits)
    assert s.exit.kind is ExitKind.Fault
    assert (s.exit.fault, s.exit.addr) == (FaultKind.Unmapped, 0xDEAD0000)


def test_write_to_text_faults():
    img = image(b"\xb8\x00\x10\x40\x00\xc6\x00\x01\xc3")
    s = sandbox.run(sandbox.load_image(img), 100)
    assert s.exit.fault is FaultKind.WriteProtect and s.exit.addr == 0x401000


def test_unsupported_opcode_is_a_fault_not_an_exception():
    s = run_code(b"\x0f\x0b")
    assert s.exit.kind is ExitKind.Fault


def test_preferred_base_maps_file_bytes():
    fx = fixtures.random_program(4, 32)
    img = pe.parse(fx.data)
    s = sandbox.load_image(img)
    for sec in img.sections:
        assert s.section_bytes(sec.name_str)[:len(sec.data)] == bytes(sec.data)[:len(s.section_bytes(sec.name_str))]


@pytest.mark.parametrize("bits", [32, 64])
def test_rebase_matches_independent_applier(bits):
    kind = 3 if bits == 32 else 10
    ptr = 4 if bits == 32 else 8
    base = 0x400000 if bits == 32 else 0x140000000
    cells = b"".join((base + 0x1000 + 4 * k).to_bytes(ptr, "little") for k in range(4))
    data = build_pe(BuildSpec(bits=bits, sections=[SectionSpec(".text", b"\xc3" * 16, TEXT),
                                                   SectionSpec(".data", cells, DATA)],
                              relocs=[(0x2000 + ptr * k, kind) for k in range(4)]))
    img = pe.parse(data)
    s = sandbox.load_image(img, base + 0x10000)
    want = pefile_rebase(data, base + 0x10000)
    got = s.section_bytes(".data")
    assert got[:len(cells)] == want[".data"][:len(cells)]
    for k in range(4):
        assert int.from_bytes(got[ptr * k:ptr * (k + 1)], "little") == base + 0x11000 + 4 * k


@pytest.mark.parametrize("seed", range(4))
def test_rebase_of_generated_fixtures(seed):
    fx = fixtures.random_program(seed, 32 if seed % 2 == 0 else 64)
    img = pe.parse(fx.data)
    nb = img.image_base + 0x10000
    s = sandbox.load_image(img, nb)
    want = pefile_rebase(fx.data, nb)
    for sec in img.sections:
        n = len(sec.data)
        assert s.section_bytes(sec.name_str)[:n] == want[sec.name_str][:n], sec.name_str


def test_overflowing_relocation_rejected():
    data = build_pe(BuildSpec(bits=32, sections=[SectionSpec(".text", b"\xc3", TEXT),
                                                 SectionSpec(".data", b"\xff\xff\xff\xff", DATA)],
                              relocs=[(0x2000, 3)]))
    with pytest.raises(sandbox.RelocOutOfRange):
        sandbox.load_image(pe.parse(data), 0x410000)


def _final(fx, base=None):
    img = pe.parse(fx.data)
    s = sandbox.run(sandbox.load_image(img, base, heads=[img.image_base + r for r in fx.functions.values()]),
                    200_000)
    return s


@settings(max_examples=20)
@given(st.integers(0, 10_000), st.sampled_from([32, 64]))
def test_determinism(seed, bits):
    fx = fixtures.random_program(seed, bits)
    a, b = _final(fx), _final(fx)
    assert a.exit == b.exit and a.trace == b.trace and a.steps == b.steps
    assert sandbox.diff_states(a, b) == []


def test_diff_reports_register_and_memory_changes():
    fx = fixtures.random_program(7, 32)
    a, b = _final(fx), _final(fx)
    assert sandbox.diff_states(a, a) == []
    b.threads[0].regs[3] ^= 1
    data = next(r for r in b.mem.regions if r.writable and r.name.startswith(".data"))
    data.buf[0] ^= 0xFF
    kinds = {d.what for d in sandbox.diff_states(a, b)}
    assert kinds == {"reg", "mem"}
    # the same byte inside an ignored range disappears
    rest = sandbox.diff_states(a, b, [(data.start, data.start + 1)])
    assert {d.what for d in rest} == {"reg"}


def test_snapshot_restore_replays():
    fx = fixtures.planted_bug(32)
    img = pe.parse(fx.data)
    s = sandbox.load_image(img)
    snap = sandbox.snapshot(s)
    sandbox.run(s, 50_000)
    first = (s.exit, list(s.regs), s.steps)
    sandbox.restore(s, snap)
    assert s.steps == 0 and s.trace == []
    sandbox.run(s, 50_000)
    assert (s.exit, list(s.regs), s.steps) == first
