import struct

import pefile
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from harness import Analysis, compare_runs, rebased_traces
from peinstr import cfg, fixtures, pe, rewrite, select
from peinstr.cfg import BasicBlock, Terminator
from peinstr.decode import Mode as Bits
from peinstr.decode import decode_one, sweep
from peinstr.pebuild import DATA, RDATA, TEXT, BuildSpec, SectionSpec, build_pe
from peinstr.rewrite import TooSmall, TrampolineLayout
from peinstr.select import Mode, Point, ThreadMode


def site_of(code, size):
    insns, _ = sweep(code, 0x1000)
    bl = cfg.extract_basic_blocks(insns, [0x1000])
    block = BasicBlock(0x1000, size, 1, Terminator.FallThrough)
    return rewrite.plan_patch_site(block, insns, bl.starts()), insns


def test_site_exact_fit():
    site, _ = site_of(bytes.fromhex("B801000000C3"), 6)
    assert site.size == 5 and len(site.insns) == 1 and not site.expanded


def test_site_accumulates_whole_insns():
    site, _ = site_of(bytes.fromhex("31C031C9C3"), 5)
    assert site.size == 5 and len(site.insns) == 3


def test_site_too_small_before_leader():
    insns, _ = sweep(bytes.fromhex("31C0EB0031C9C3"), 0x1000)
    block = BasicBlock(0x1004, 2, 1, Terminator.FallThrough)
    with pytest.raises(TooSmall):
        rewrite.plan_patch_site(block, insns, {0x1004, 0x1006})


def test_site_not_grown_past_ret():
    insns, _ = sweep(bytes.fromhex("31C0C390909090"), 0x1000)
    with pytest.raises(TooSmall):
        rewrite.plan_patch_site(BasicBlock(0x1000, 3, 2, Terminator.Ret), insns, {0x1000})


def test_patch_and_back_jump_bytes():
    lay = TrampolineLayout(0x1000, 0x5000, b"\x90" * 0x30, b"\x90" * 0x10, 0x1005, 5)
    assert lay.patch == bytes.fromhex("E9FB3F0000")
    code = lay.code
    assert len(code) == 0x45
    assert code[-5] == 0xE9
    assert struct.unpack("<i", code[-4:])[0] == 0x1005 - 0x5045


def test_patch_padding_is_int3():
    lay = TrampolineLayout(0x1000, 0x5000, b"", b"", 0x1007, 7)
    assert lay.patch[5:] == b"\xcc\xcc"


@given(st.integers(0x1000, 0x100000), st.integers(0x1000, 0x100000), st.integers(-0x800, 0x800))
def test_displaced_call_retargeted(old_rva, new_rva, disp):
    code = b"\xe8" + struct.pack("<i", disp)
    ins = decode_one(code, old_rva, Bits.Bits32)
    moved = rewrite.move_insn(ins, new_rva, long=True)
    assert moved[0] == 0xE8 and len(moved) == 5
    assert struct.unpack("<i", moved[1:])[0] == ins.target - (new_rva + 5)


def test_short_jcc_promoted():
    ins = decode_one(b"\x74\x10", 0x1000, Bits.Bits32)
    moved = rewrite.move_insn(ins, 0x5000, long=True)
    assert moved[:2] == b"\x0f\x84"
    assert 0x5006 + struct.unpack("<i", moved[2:])[0] == 0x1012


def test_loop_refused_in_trampoline():
    ins = decode_one(b"\xe2\x10", 0x1000, Bits.Bits32)
    with pytest.raises(rewrite.UnrelocatableInsn):
        rewrite.move_insn(ins, 0x5000, long=True, allow_loops=False)


def test_rip_relative_redisplaced():
    ins = decode_one(bytes.fromhex("8B0500100000"), 0x1000, Bits.Bits64)
    moved = rewrite.move_insn(ins, 0x9000)
    assert 0x9006 + struct.unpack("<i", moved[2:])[0] == 0x2006


def plan_of(n_points, log2=16, linear=False, multi=False):
    pts = [Point(BasicBlock(0x1000 + 8 * k, 8, 1, Terminator.Ret), k) for k in range(n_points)]
    return select.InstrumentationPlan(pts, Mode.Jump, ThreadMode.Multi if multi else ThreadMode.Single,
                                      linear, log2)


def test_feedback_sizes():
    sec = rewrite.build_feedback_section(plan_of(3))
    assert sec.virtual_size == 64 + 65536 + 8
    lin = rewrite.build_feedback_section(plan_of(100, linear=True))
    assert lin.virtual_size == 64 + 65536 + 13 + 8
    assert sec.data[:8] == b"SPOTFB\0\0"


def test_feedback_header_fields():
    sec = rewrite.build_feedback_section(plan_of(100, log2=12, linear=True, multi=True))
    h = rewrite.feedback_header(sec.data)
    assert h == {"version": 1, "map_size": 4096, "extra_size": 13, "flags": 3, "prev": 0}
    assert sec.data[32:64] == bytes(32)


def reloc_fixture():
    base = 0x400000
    text = bytes.fromhex("8B0500304000") + b"\x31\xc9\xc3"
    data = build_pe(BuildSpec(bits=32, sections=[SectionSpec(".text", text, TEXT),
                                                 SectionSpec(".rdata", b"\0" * 16, RDATA),
                                                 SectionSpec(".data", struct.pack("<I", 0x1234), DATA)],
                              relocs=[(0x1002, 3)]))
    assert pe.parse(data).image_base == base
    return data


def test_relocation_moves_into_trampoline():
    an = Analysis.of(reloc_fixture())
    plan = an.plan()
    out, rep = an.instrument(plan)
    assert rep.instrumented == 1 and rep.relocs_deleted == 1
    tramp = rep.trampolines[0x1000]
    stub_len = len(rewrite.assemble_stub(32, plan.points[0].id, ThreadMode.Single,
                                         rewrite.FeedbackLayout(rep.feedback_rva, 65536), None, tramp,
                                         0x400000)[0])
    addrs = {a for a, _ in out.relocations.addresses()}
    assert 0x1002 not in addrs
    assert tramp + stub_len + 2 in addrs
    assert out.read(tramp + stub_len, 6) == bytes.fromhex("8B0500304000")
    # independent parser sees the same table
    p = pefile.PE(data=out.serialize())
    seen = {e.rva for b in p.DIRECTORY_ENTRY_BASERELOC for e in b.entries if e.type == 3}
    assert seen == addrs
    cmp_ = compare_runs(an, plan)
    assert cmp_.ok, (cmp_.diffs, cmp_.problems)
    assert cmp_.original.regs[0] == 0x1234


def test_zero_point_plan():
    data = fixtures.random_program(2, 32).data
    an = Analysis.of(data)
    empty = select.InstrumentationPlan([], Mode.Jump)
    out, rep = an.instrument(empty)
    assert rep.instrumented == 0 and rep.relocs_deleted == rep.relocs_added == 0
    assert out.relocations.addresses() == an.img.relocations.addresses()
    for a, b in zip(an.img.sections, out.sections):
        assert a.name == b.name and bytes(a.data) == bytes(b.data)
    assert [s.name_str for s in out.sections[len(an.img.sections):]] == [".spot1", ".spot0"]


def test_one_point_plan():
    an = Analysis.of(fixtures.random_program(5, 64).data)
    full = an.plan()
    site_ok = next(p for p in full.points if p.block.size >= 5)
    plan = select.InstrumentationPlan([site_ok], Mode.Jump)
    out, rep = an.instrument(plan)
    assert rep.instrumented == 1 and len(rep.patch_sites) == 1
    changed = [k for k, (a, b) in enumerate(zip(an.img.sections[0].data, out.sections[0].data)) if a != b]
    head = site_ok.block.start_rva - an.img.sections[0].virtual_address
    assert changed and changed[0] >= head and changed[-1] < head + rep.patch_sites[0][1]
    assert out.sections[0].data[head] == 0xE9
    assert compare_runs(an, plan).ok


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("mode", [Mode.Jump, Mode.Inline])
def test_report_identity_and_validity(seed, mode):
    an = Analysis.of(fixtures.random_program(seed, 32 if seed % 2 else 64).data)
    plan = an.plan(mode)
    out, rep = an.instrument(plan)
    assert rep.instrumented + rep.skipped_too_small + rep.skipped_unrelocatable == len(plan)
    data = out.serialize()
    assert pe.verify_checksum(data)
    again = pe.parse(data)
    again.validate()
    spans = sorted((s.virtual_address, s.virtual_address + s.mapped_size) for s in again.sections)
    assert all(a[1] <= b[0] for a, b in zip(spans, spans[1:]))
    assert again.relocations.addresses() == out.relocations.addresses()
    p = pefile.PE(data=data)
    spot0 = next(s for s in p.sections if s.Name.startswith(b".spot0"))
    assert spot0.Characteristics == pe.EXECUTE_READ


def test_jump_mode_skips_accounted_and_small():
    an = Analysis.of(fixtures.random_program(11, 32).data)
    out, rep = an.instrument(an.plan())
    blocks = {b.start_rva: b for b in an.blocks}
    for head, why in rep.skipped:
        if why == "too_small":
            assert blocks[head].size < 5


@pytest.mark.parametrize("mode", [Mode.Jump, Mode.Inline])
def test_deterministic_output(mode):
    data = fixtures.random_program(8, 64).data
    a = Analysis.of(data)
    b = Analysis.of(data)
    oa, ra = a.instrument(a.plan(mode, ThreadMode.Multi, linear=True))
    ob, rb = b.instrument(b.plan(mode, ThreadMode.Multi, linear=True))
    assert oa.serialize() == ob.serialize() and ra.to_json() == rb.to_json()


def test_single_thread_has_no_tls_section():
    an = Analysis.of(fixtures.random_program(1, 32).data)
    out, _ = an.instrument(an.plan())
    assert ".spot2" not in [s.name_str for s in out.sections]
    assert out.directory(pe.DIR_TLS) is None or not out.directory(pe.DIR_TLS).size


@pytest.mark.parametrize("bits", [32, 64])
def test_multi_thread_creates_tls(bits):
    an = Analysis.of(fixtures.random_program(3, bits).data)
    assert an.img.directory(pe.DIR_TLS) is None or not an.img.directory(pe.DIR_TLS).size
    out, rep = an.instrument(an.plan(threads=ThreadMode.Multi))
    names = [s.name_str for s in out.sections]
    assert names[-3:] == [".spot1", ".spot2", ".spot0"]
    p = pefile.PE(data=out.serialize())
    tls = p.DIRECTORY_ENTRY_TLS.struct
    base = p.OPTIONAL_HEADER.ImageBase
    tpl = p.get_data(tls.StartAddressOfRawData - base, tls.EndAddressOfRawData - tls.StartAddressOfRawData)
    assert tpl[rep.tls_slot_offset:rep.tls_slot_offset + 8] == bytes(8)
    assert rep.tls_created


@pytest.mark.parametrize("bits", [32, 64])
def test_multi_thread_merges_existing_tls(bits):
    fx = fixtures.random_program(4, bits, tls=True)
    an = Analysis.of(fx.data)
    before = pefile.PE(data=fx.data)
    old = before.DIRECTORY_ENTRY_TLS.struct
    base = before.OPTIONAL_HEADER.ImageBase
    old_tpl = before.get_data(old.StartAddressOfRawData - base, old.EndAddressOfRawData - old.StartAddressOfRawData)

    def callbacks(p, s):
        ptr = 4 if bits == 32 else 8
        out, rva = [], s.AddressOfCallBacks - base
        while True:
            v = int.from_bytes(p.get_data(rva, ptr), "little")
            if not v:
                return out
            out.append(v)
            rva += ptr

    out, rep = an.instrument(an.plan(threads=ThreadMode.Multi))
    after = pefile.PE(data=out.serialize())
    new = after.DIRECTORY_ENTRY_TLS.struct
    new_tpl = after.get_data(new.StartAddressOfRawData - base, new.EndAddressOfRawData - new.StartAddressOfRawData)
    assert not rep.tls_created
    assert new_tpl[:len(old_tpl)] == old_tpl
    assert new.AddressOfIndex == old.AddressOfIndex
    assert callbacks(after, new) == callbacks(before, old) != []
    assert compare_runs(an, an.plan(threads=ThreadMode.Multi), threads=2).ok


CONFIGS = [(Mode.Jump, ThreadMode.Single, 1), (Mode.Jump, ThreadMode.Multi, 2),
           (Mode.Inline, ThreadMode.Single, 1), (Mode.Inline, ThreadMode.Multi, 2)]


@pytest.mark.parametrize("seed", range(8))
@pytest.mark.parametrize("mode,tm,threads", CONFIGS)
def test_semantics_and_coverage_preserved(seed, mode, tm, threads):
    fx = fixtures.random_program(seed, 64 if seed % 2 else 32, tls=seed % 3 == 0)
    an = Analysis.of(fx.data)
    res = compare_runs(an, an.plan(mode, tm, linear=seed % 2 == 0), threads=threads)
    assert res.ok, (res.diffs[:5], res.bitmap_ok, res.linear_ok, res.problems)
    assert res.original.exit.kind.value == "returned"


@settings(max_examples=15)
@given(st.integers(1000, 100_000), st.sampled_from(CONFIGS), st.sampled_from([32, 64]),
       st.sampled_from([10, 12, 16]))
def test_preservation_property(seed, config, bits, log2):
    mode, tm, threads = config
    an = Analysis.of(fixtures.random_program(seed, bits).data)
    res = compare_runs(an, an.plan(mode, tm, log2=log2), threads=threads)
    assert res.ok, (res.diffs[:5], res.problems)


def test_memory_plan_preserves_semantics():
    an = Analysis.of(fixtures.random_program(6, 32).data)
    res = compare_runs(an, an.plan(memory=True))
    assert res.ok


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("mode", [Mode.Jump, Mode.Inline])
def test_rebase_equivalence(seed, mode):
    an = Analysis.of(fixtures.random_program(seed, 32 if seed % 2 == 0 else 64).data)
    out, rep = an.instrument(an.plan(mode))
    (ta, ea, sa), (tb, eb, sb) = rebased_traces(out.serialize(), rep)
    assert ta == tb and ea == eb
    assert sa.regs[0] == sb.regs[0]


def test_inline_redirects_entry_and_exports():
    fx = fixtures.random_program(9, 32)
    an = Analysis.of(fx.data)
    out, rep = an.instrument(an.plan(Mode.Inline))
    spot0 = next(s for s in out.sections if s.name_str == ".spot0")
    assert spot0.contains_rva(out.entry_point)
    for rva, _ in pe.exports(out):
        assert spot0.contains_rva(rva)
    assert out.entry_point == rep.clone_map[an.img.entry_point]


def test_update_relocations_stages():
    table = pe.RelocationTable.from_addresses([(0x1002, 3), (0x1010, 3), (0x2000, 3)])
    new, deleted, added = rewrite.update_relocations(table, [(0x1000, 5)], [(0x5008, 3)])
    assert (deleted, added) == (1, 1)
    assert [a for a, _ in new.addresses()] == [0x1010, 0x2000, 0x5008]
