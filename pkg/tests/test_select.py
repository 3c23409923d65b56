import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from peinstr import cfg, fixtures, pe, select
from peinstr.cfg import BasicBlock, BlockList, Terminator
from peinstr.decode import Mode, sweep
from peinstr.pebuild import TEXT, BuildSpec, SectionSpec, build_pe
from peinstr.select import BadPattern, FilterSpec


def named_blocks(names):
    return BlockList(pe.Arch.PE32, 0, [BasicBlock(0x1000 + 0x10 * k, 4, 1, Terminator.Ret, n)
                                       for k, n in enumerate(names)])


def three():
    insns, _ = sweep(bytes.fromhex("31C0750231C9C3"), 0x1000)
    return cfg.extract_basic_blocks(insns, [0x1000]), insns


def test_include_range():
    bl, _ = three()
    assert select.apply_filters(bl, FilterSpec(include_ranges=[(0x1004, 0x1006)])).starts() == [0x1004]


def test_exclude_everything():
    bl, _ = three()
    assert select.apply_filters(bl, FilterSpec(exclude_ranges=[(0, 1 << 32)])).starts() == []


def test_include_pattern():
    bl = named_blocks(["parse_hdr", "init", "parse_body"])
    kept = select.apply_filters(bl, FilterSpec(include_name_patterns=["^parse_.*"]))
    assert [b.function_name for b in kept] == ["parse_hdr", "parse_body"]


def test_unnamed_blocks_never_match_patterns():
    bl = named_blocks([None, "init"])
    assert len(select.apply_filters(bl, FilterSpec(include_name_patterns=[".*"]))) == 1
    assert len(select.apply_filters(bl, FilterSpec(exclude_name_patterns=[".*"]))) == 1


def test_bad_pattern():
    with pytest.raises(BadPattern):
        select.apply_filters(named_blocks(["a"]), FilterSpec(include_name_patterns=["("]))


def test_bad_range():
    with pytest.raises(ValueError):
        FilterSpec(include_ranges=[(5, 5)])
    with pytest.raises(ValueError):
        select.parse_range("0x20-0x10")
    assert select.parse_range("0x1000-0x2000") == (0x1000, 0x2000)


def test_memory_store_kept():
    code = b"\x89\x08\xc3" + b"\x31\xc0\xc3"
    insns, _ = sweep(code, 0x1000)
    bl = cfg.extract_basic_blocks(insns, [0x1000, 0x1003])
    kept = select.memory_sensitive_select(bl, insns, [])
    assert kept.starts() == [0x1000]


def test_memory_select_empty():
    bl = BlockList(pe.Arch.PE32)
    assert select.memory_sensitive_select(bl, [], []).blocks == []


def test_global_store_not_memory_sensitive():
    insns, _ = sweep(b"\xa3\x00\x30\x40\x00\x89\x05\x00\x30\x40\x00\xc3", 0x1000)
    bl = cfg.extract_basic_blocks(insns, [0x1000])
    assert select.memory_sensitive_select(bl, insns, []).blocks == []
    insns, _ = sweep(b"\x89\x05\x00\x10\x00\x00\xc3", 0x1000, Mode.Bits64)
    bl = cfg.extract_basic_blocks(insns, [0x1000])
    assert select.memory_sensitive_select(bl, insns, []).blocks == []


@pytest.mark.parametrize("bits", [32, 64])
def test_memory_routine_calls(bits):
    base = 0x400000 if bits == 32 else 0x140000000
    spec = BuildSpec(bits=bits, sections=[SectionSpec(".text", b"\xc3" * 0x40, TEXT)],
                     imports={"kernel32.dll": ["HeapAlloc", "GetTickCount"]})
    img = pe.parse(build_pe(spec))
    slots = {name.split("!")[1]: rva for rva, name in pe.imports(img)}

    def call_slot(rva, at):
        if bits == 32:
            return b"\xff\x15" + (base + slots[rva]).to_bytes(4, "little")
        return b"\xff\x15" + (slots[rva] - (at + 6)).to_bytes(4, "little", signed=True)

    code = call_slot("HeapAlloc", 0x1000) + b"\xc3" + call_slot("GetTickCount", 0x1007) + b"\xc3"
    # a thunk: call to a jmp [slot]
    thunk_at = 0x1000 + len(code) + 6
    code += b"\xe8" + (thunk_at - (0x1000 + len(code) + 5)).to_bytes(4, "little", signed=True) + b"\xc3"
    code += b"\xff\x25" + (((base + slots["HeapAlloc"]).to_bytes(4, "little")) if bits == 32
                           else (slots["HeapAlloc"] - (thunk_at + 6)).to_bytes(4, "little", signed=True))
    img.sections[0].data[:len(code)] = code
    insns, _ = cfg.sweep_image(img)
    bl = cfg.extract_basic_blocks(insns, [0x1000, 0x1007, 0x100E], arch=img.arch, image_base=img.image_base)
    kept = select.memory_sensitive_select(bl, insns, pe.imports(img))
    assert kept.starts() == [0x1000, 0x100E]


def test_ids_deterministic_and_masked():
    bl, _ = cfg.analyze(pe.parse(fixtures.random_program(1, 32).data))
    a = select.assign_ids(bl, 16)
    assert a == select.assign_ids(bl, 16)
    assert all(0 <= p.id < 65536 for p in a)
    assert all(p.id < 1024 for p in select.assign_ids(bl, 10))
    assert [p.block.start_rva for p in a] == sorted(p.block.start_rva for p in a)
    with pytest.raises(ValueError):
        select.assign_ids(bl, 9)


def test_block_id_known_values():
    # splitmix64 finalizer of 0 is a published constant
    assert select.block_id(0, 20) == 0xE220A8397B1DCDAF & 0xFFFFF


starts = st.lists(st.integers(0x1000, 0x9000), unique=True, max_size=30).map(sorted)
names = st.sampled_from([None, "parse_a", "parse_b", "init", "main"])
ranges = st.lists(st.tuples(st.integers(0x1000, 0x9000), st.integers(1, 0x2000)).map(lambda t: (t[0], t[0] + t[1])),
                  max_size=2)


@st.composite
def block_lists(draw):
    ss = draw(starts)
    return BlockList(pe.Arch.PE32, 0, [BasicBlock(s, 1, 1, Terminator.Ret, draw(names)) for s in ss])


specs = st.builds(FilterSpec, ranges, ranges, st.lists(st.sampled_from(["^parse", "init"]), max_size=1),
                  st.lists(st.sampled_from(["_b$", "main"]), max_size=1))


@given(block_lists(), specs)
def test_filters_idempotent_and_monotone(bl, spec):
    once = select.apply_filters(bl, spec)
    assert set(once.starts()) <= set(bl.starts())
    assert select.apply_filters(once, spec).blocks == once.blocks
    assert once.starts() == sorted(once.starts())


@given(block_lists(), specs, specs)
def test_filter_composition_subset(bl, a, b):
    ab = select.apply_filters(select.apply_filters(bl, a), b)
    assert set(ab.starts()) <= set(select.apply_filters(bl, a).starts())
    assert set(ab.starts()) <= set(select.apply_filters(bl, b).starts())


@given(block_lists())
def test_empty_spec_is_identity(bl):
    assert select.apply_filters(bl, FilterSpec()).blocks == bl.blocks


@pytest.mark.parametrize("seed", range(6))
def test_memory_select_idempotent_subset(seed):
    fx = fixtures.random_program(seed, 32 if seed % 2 else 64)
    img = pe.parse(fx.data)
    bl, insns = cfg.analyze(img)
    imports = pe.imports(img)
    once = select.memory_sensitive_select(bl, insns, imports)
    assert set(once.starts()) <= set(bl.starts())
    assert select.memory_sensitive_select(once, insns, imports).blocks == once.blocks
    spec = FilterSpec(include_ranges=[(0x1000, 0x1200)])
    both = select.memory_sensitive_select(select.apply_filters(bl, spec), insns, imports)
    other = select.apply_filters(once, spec)
    assert both.blocks == other.blocks


def test_plan_deterministic():
    bl, insns = cfg.analyze(pe.parse(fixtures.random_program(9, 64).data))
    spec = FilterSpec(memory_sensitive=True)
    a = select.make_plan(bl, spec, insns=insns, linear=True)
    b = select.make_plan(bl, spec, insns=insns, linear=True)
    assert a == b
    assert len(a) <= len(select.make_plan(bl, insns=insns))


def test_filter_spec_sidecar(tmp_path):
    p = tmp_path / "filter.json"
    p.write_text(json.dumps({"include_ranges": [["0x1000", "0x2000"]], "exclude_name_patterns": ["^init"],
                             "memory_sensitive": True}))
    spec = FilterSpec.from_json(p)
    assert spec.include_ranges == [(0x1000, 0x2000)]
    assert spec.exclude_name_patterns == ["^init"] and spec.memory_sensitive
