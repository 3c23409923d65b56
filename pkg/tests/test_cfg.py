import json
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import oracle_blocks, synthetic_program
from peinstr import cfg, fixtures, pe
from peinstr.cfg import BasicBlock, BlockList, EntryKind, JumpTable, Terminator
from peinstr.decode import Kind, Mode, sweep


def blocks_of(code, entries=(0x1000,), mode=Mode.Bits32):
    insns, regions = sweep(code, 0x1000, mode)
    return cfg.extract_basic_blocks(insns, entries, regions=regions)


def test_jnz_example():
    bl = blocks_of(bytes.fromhex("31C0750231C9C3"))
    assert bl.starts() == [0x1000, 0x1004, 0x1006]
    assert [b.terminator for b in bl] == [Terminator.Jcc, Terminator.FallThrough, Terminator.Ret]


def test_single_ret():
    bl = blocks_of(b"\xc3")
    assert [(b.start_rva, b.size) for b in bl] == [(0x1000, 1)]


def test_call_example():
    bl = blocks_of(bytes.fromhex("E802000000C390C3"))
    assert bl.starts() == [0x1000, 0x1005, 0x1007]
    assert bl[0].terminator is Terminator.Call


def test_padding_after_ret_is_not_a_leader():
    bl = blocks_of(bytes.fromhex("C3CCCC900F1F00"), entries=(0x1000,))
    assert bl.starts() == [0x1000]
    bl = blocks_of(bytes.fromhex("C3CCCC90C3"), entries=(0x1000,))
    assert bl.starts() == [0x1000, 0x1004]
    bl = blocks_of(bytes.fromhex("C3CCCC31C0C3"), entries=(0x1000,))
    assert bl.starts() == [0x1000, 0x1003]


def test_undecodable_block_dropped():
    # the fall-through block runs into bytes that do not decode
    code = bytes.fromhex("7402") + b"\x31\xc0" + b"\xc5\xf8\x77" + b"\xc3"
    insns, regions = sweep(code, 0x1000, Mode.Bits64, {0x1007})
    bl = cfg.extract_basic_blocks(insns, [0x1000, 0x1007], regions=regions)
    assert 0x1002 not in bl.starts()
    assert 0x1007 in bl.starts()


@pytest.mark.parametrize("seed", range(300))
def test_leader_oracle(seed):
    rng = random.Random(seed)
    mode = Mode.Bits64 if seed % 2 else Mode.Bits32
    code, prog, entries = synthetic_program(rng)
    insns, regions = sweep(code, 0x1000, mode)
    assert not regions
    got = [(b.start_rva, b.size, b.insns) for b in cfg.extract_basic_blocks(insns, entries)]
    assert got == oracle_blocks(prog, entries)


@given(st.integers(0, 2**32))
def test_blocks_sorted_disjoint_and_targets_lead(seed):
    code, prog, entries = synthetic_program(random.Random(seed))
    insns, _ = sweep(code, 0x1000)
    bl = cfg.extract_basic_blocks(insns, entries)
    for a, b in zip(bl.blocks, bl.blocks[1:]):
        assert a.end <= b.start_rva
    starts = set(bl.starts())
    for ins in insns:
        if ins.kind in (Kind.CallDirect, Kind.JmpDirect, Kind.Jcc):
            assert ins.target in starts


@pytest.mark.parametrize("entries", [3, 5])
def test_pe32_jump_table(entries):
    data, planted = fixtures.jump_table_fixture(32, entries)
    img = pe.parse(data)
    insns, _ = cfg.sweep_image(img)
    tables = cfg.detect_jump_tables(insns, img)
    assert len(tables) == 1
    t = tables[0]
    assert t.entry_kind is EntryKind.Abs32
    assert list(t.targets) == planted and t.entry_count == entries
    bl, _ = cfg.analyze(img)
    assert set(planted) <= set(bl.starts())


def test_pe32_table_broken_at_second_entry():
    data, _ = fixtures.jump_table_fixture(32, 3, break_at=1)
    img = pe.parse(data)
    insns, _ = cfg.sweep_image(img)
    assert cfg.detect_jump_tables(insns, img) == []


@pytest.mark.parametrize("entries", [4, 7])
def test_pe64_jump_table(entries):
    data, planted = fixtures.jump_table_fixture(64, entries)
    img = pe.parse(data)
    insns, _ = cfg.sweep_image(img)
    tables = cfg.detect_jump_tables(insns, img)
    assert len(tables) == 1
    assert tables[0].entry_kind is EntryKind.Rva32
    assert list(tables[0].targets) == planted
    bl, _ = cfg.analyze(img)
    assert set(planted) <= set(bl.starts())
    assert any(b.terminator is Terminator.JumpTable for b in bl)


@pytest.mark.parametrize("bits", [32, 64])
def test_generated_switches_recovered(bits):
    for seed in range(40):
        fx = fixtures.random_program(seed, bits)
        bl, _ = cfg.analyze(pe.parse(fx.data))
        found = {tuple(t.targets) for t in bl.jump_tables}
        for planted in fx.jump_tables:
            assert tuple(planted) in found


def test_json_empty():
    doc = json.loads(cfg.block_list_to_json(BlockList(pe.Arch.PE32)))
    assert doc["version"] == 1 and doc["arch"] == "pe32" and doc["blocks"] == []


def test_json_one_block():
    bl = BlockList(pe.Arch.PE64, 0x140000000, [BasicBlock(0x1000, 7, 3, Terminator.Ret, "main", (2,))])
    doc = json.loads(cfg.block_list_to_json(bl))
    assert doc["blocks"] == [{"start": 0x1000, "size": 7, "insns": 3, "term": "ret", "func": "main", "relocs": [2]}]
    assert cfg.block_list_from_json(cfg.block_list_to_json(bl)) == bl


blocks_st = st.lists(st.builds(BasicBlock, st.integers(0, 1 << 31), st.integers(1, 4096), st.integers(1, 100),
                               st.sampled_from(list(Terminator)), st.none() | st.text(max_size=8),
                               st.lists(st.integers(0, 4095), max_size=3).map(tuple)), max_size=8)
tables_st = st.lists(st.builds(lambda j, t, k, xs: JumpTable(j, t, len(xs), k, tuple(xs)), st.integers(0, 1 << 31),
                               st.integers(0, 1 << 31), st.sampled_from(list(EntryKind)),
                               st.lists(st.integers(0, 1 << 31), min_size=2, max_size=5)), max_size=2)


@given(st.sampled_from(list(pe.Arch)), st.integers(0, 1 << 48), blocks_st, tables_st)
def test_json_round_trip(arch, base, blocks, tables):
    bl = BlockList(arch, base, blocks, tables)
    assert cfg.block_list_from_json(cfg.block_list_to_json(bl)) == bl


def test_symbols_name_blocks(tmp_path):
    fx = fixtures.random_program(3, 32, exports=False)
    img = pe.parse(fx.data)
    sym = tmp_path / "syms.txt"
    sym.write_text("".join(f"{rva:#x} {name}\n" for name, rva in fx.functions.items()))
    symbols = cfg.load_symbols(sym)
    bl, _ = cfg.analyze(img, symbols)
    named = {b.start_rva: b.function_name for b in bl if b.start_rva in symbols}
    assert named == symbols
    (tmp_path / "syms.json").write_text(json.dumps({n: hex(r) for n, r in fx.functions.items()}))
    assert cfg.load_symbols(tmp_path / "syms.json") == symbols
