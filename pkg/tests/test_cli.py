import json
import os
import stat

import pytest

from peinstr import cfg, fixtures, pe
from peinstr.cli import main
from peinstr.pebuild import TEXT, BuildSpec, SectionSpec, build_pe


@pytest.fixture
def three_blocks(tmp_path):
    p = tmp_path / "three.exe"
    p.write_bytes(build_pe(BuildSpec(bits=32, sections=[SectionSpec(".text", bytes.fromhex("31C0750231C9C3"),
                                                                     TEXT)])))
    return p


@pytest.fixture
def program(tmp_path):
    p = tmp_path / "prog.exe"
    p.write_bytes(fixtures.random_program(12, 32).data)
    return p


@pytest.fixture
def planted(tmp_path):
    p = tmp_path / "bug.exe"
    p.write_bytes(fixtures.planted_bug(32).data)
    seeds = tmp_path / "seeds"
    seeds.mkdir()
    (seeds / "a").write_bytes(b"aaaa")
    return p, seeds


def test_analyze_three_blocks(three_blocks, tmp_path, capsys):
    out = tmp_path / "blocks.json"
    assert main(["analyze", str(three_blocks), "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert [b["start"] for b in doc["blocks"]] == [0x1000, 0x1004, 0x1006]
    assert "3 blocks" in capsys.readouterr().out


def test_analyze_missing_file(tmp_path, capsys):
    assert main(["analyze", str(tmp_path / "nope.exe"), "--out", str(tmp_path / "b.json")]) == 1
    assert "nope.exe" in capsys.readouterr().err


def test_analyze_not_a_pe(tmp_path):
    bad = tmp_path / "bad.exe"
    bad.write_bytes(b"MZ" + bytes(10))
    assert main(["analyze", str(bad), "--out", str(tmp_path / "b.json")]) == 1


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_analyze_read_only_out_dir(three_blocks, tmp_path):
    ro = tmp_path / "ro"
    ro.mkdir()
    ro.chmod(stat.S_IRUSR | stat.S_IXUSR)
    try:
        assert main(["analyze", str(three_blocks), "--out", str(ro / "b.json")]) == 1
    finally:
        ro.chmod(stat.S_IRWXU)


@pytest.mark.skipif(not os.path.isdir("/proc/self"), reason="needs procfs")
def test_analyze_read_only_filesystem(three_blocks):
    assert main(["analyze", str(three_blocks), "--out", "/proc/self/blocks.json"]) == 1


def test_analyze_unwritable_out(three_blocks, tmp_path):
    assert main(["analyze", str(three_blocks), "--out", str(tmp_path / "missing" / "b.json")]) == 1
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["analyze", str(three_blocks), "--out", str(blocker / "b.json")]) == 1


def test_usage_errors(program, tmp_path):
    out = str(tmp_path / "o.exe")
    assert main([]) == 2
    assert main(["instrument", str(program)]) == 2
    assert main(["instrument", str(program), "--out", out, "--mode", "sideways"]) == 2
    assert main(["instrument", str(program), "--out", out, "--map-size", "30"]) == 2
    assert main(["instrument", str(program), "--out", out, "--match", "("]) == 2
    assert main(["instrument", str(program), "--out", out, "--include", "0x20-0x10"]) == 2
    assert not os.path.exists(out)


def test_instrument_defaults(program, tmp_path):
    out = tmp_path / "o.exe"
    assert main(["instrument", str(program), "--out", str(out)]) == 0
    rep = json.loads((tmp_path / "o.exe.report.json").read_text())
    data = out.read_bytes()
    assert pe.verify_checksum(data)
    img = pe.parse(data)
    assert [s.name_str for s in img.sections][-2:] == [".spot1", ".spot0"]
    assert rep["instrumented"] == rep["plan_points"] - rep["skipped_too_small"] - rep["skipped_unrelocatable"]


def test_instrument_select_memory_subset(program, tmp_path):
    assert main(["instrument", str(program), "--out", str(tmp_path / "all.exe")]) == 0
    assert main(["instrument", str(program), "--out", str(tmp_path / "mem.exe"), "--select", "memory"]) == 0
    full = json.loads((tmp_path / "all.exe.report.json").read_text())
    mem = json.loads((tmp_path / "mem.exe.report.json").read_text())
    assert mem["instrumented"] <= full["instrumented"]
    assert mem["plan_points"] < full["plan_points"]


def test_inline_multi_has_tls_section(program, tmp_path):
    out = tmp_path / "o.exe"
    assert main(["instrument", str(program), "--out", str(out), "--mode", "inline", "--threads", "multi"]) == 0
    names = [s.name_str for s in pe.parse(out.read_bytes()).sections]
    assert ".spot2" in names


def test_instrument_reproducible(program, tmp_path):
    args = ["--mode", "inline", "--linear", "--map-size", "12", "--exclude", "0x1000-0x1010"]
    assert main(["instrument", str(program), "--out", str(tmp_path / "a.exe")] + args) == 0
    assert main(["instrument", str(program), "--out", str(tmp_path / "b.exe")] + args) == 0
    assert (tmp_path / "a.exe").read_bytes() == (tmp_path / "b.exe").read_bytes()
    assert (tmp_path / "a.exe.report.json").read_text() == (tmp_path / "b.exe.report.json").read_text()


@pytest.mark.parametrize("seed,bits", [(12, 32), (13, 64), (14, 32)])
def test_blocks_file_equivalent(seed, bits, tmp_path):
    prog = tmp_path / "p.exe"
    prog.write_bytes(fixtures.random_program(seed, bits).data)
    blocks = tmp_path / "blocks.json"
    assert main(["analyze", str(prog), "--out", str(blocks)]) == 0
    assert main(["instrument", str(prog), "--out", str(tmp_path / "a.exe")]) == 0
    assert main(["instrument", str(prog), "--out", str(tmp_path / "b.exe"), "--blocks", str(blocks)]) == 0
    assert (tmp_path / "a.exe").read_bytes() == (tmp_path / "b.exe").read_bytes()
    ra = json.loads((tmp_path / "a.exe.report.json").read_text())
    rb = json.loads((tmp_path / "b.exe.report.json").read_text())
    assert ra == rb


def test_blocks_file_garbage(program, tmp_path):
    bad = tmp_path / "blocks.json"
    bad.write_text("{not json")
    assert main(["instrument", str(program), "--out", str(tmp_path / "o.exe"), "--blocks", str(bad)]) == 1


def test_fuzz_empty_seeds(planted, tmp_path):
    target, _ = planted
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["fuzz", str(target), "--in", str(empty), "--out", str(tmp_path / "c"), "--execs", "10"]) == 2


def test_fuzz_missing_seed_dir(planted, tmp_path):
    target, _ = planted
    assert main(["fuzz", str(target), "--in", str(tmp_path / "nope"), "--out", str(tmp_path / "c"),
                 "--execs", "10"]) == 1


def test_fuzz_budget_required(planted, tmp_path):
    target, seeds = planted
    assert main(["fuzz", str(target), "--in", str(seeds), "--out", str(tmp_path / "c")]) == 2
    assert main(["fuzz", str(target), "--in", str(seeds), "--out", str(tmp_path / "c"), "--execs", "1",
                 "--secs", "1"]) == 2


def test_fuzz_spawn_needs_instrumented_target(planted, tmp_path):
    target, seeds = planted
    assert main(["fuzz", str(target), "--backend", "spawn", "--in", str(seeds), "--out", str(tmp_path / "c"),
                 "--execs", "5"]) == 1


def _stats(d):
    return [{k: v for k, v in json.loads(x).items() if k != "execs_per_sec"}
            for x in (d / "stats.jsonl").read_text().splitlines()]


def test_fuzz_sandbox_deterministic(planted, tmp_path):
    target, seeds = planted
    inst = tmp_path / "inst.exe"
    assert main(["instrument", str(target), "--out", str(inst)]) == 0
    for name in ("a", "b"):
        assert main(["fuzz", str(inst), "--in", str(seeds), "--out", str(tmp_path / name), "--execs", "1000",
                     "--seed", "7"]) == 0
    assert _stats(tmp_path / "a") == _stats(tmp_path / "b")
    qa = sorted((p.name, p.read_bytes()) for p in (tmp_path / "a" / "queue").iterdir())
    qb = sorted((p.name, p.read_bytes()) for p in (tmp_path / "b" / "queue").iterdir())
    assert qa == qb and qa
    assert json.loads((tmp_path / "a" / "report.json").read_text())["execs"] == 1000


def test_fuzz_planted_bug_crash(planted, tmp_path):
    target, seeds = planted
    inst = tmp_path / "inst.exe"
    assert main(["instrument", str(target), "--out", str(inst)]) == 0
    camp = tmp_path / "camp"
    assert main(["fuzz", str(inst), "--in", str(seeds), "--out", str(camp), "--execs", "20000", "--seed", "1"]) == 0
    records = list((camp / "crashes").glob("*.json"))
    assert records
    doc = json.loads(records[0].read_text())
    assert doc["fault_address"] == 0xDEAD0000


@pytest.mark.parametrize("backend", ["spawn", "agent"])
def test_fuzz_external_backends(backend, planted, tmp_path):
    target, seeds = planted
    inst = tmp_path / "inst.exe"
    assert main(["instrument", str(target), "--out", str(inst)]) == 0
    camp = tmp_path / backend
    assert main(["fuzz", str(inst), "--backend", backend, "--in", str(seeds), "--out", str(camp),
                 "--execs", "40", "--timeout", "20"]) == 0
    assert json.loads((camp / "report.json").read_text())["execs"] == 40


def test_analyze_symbols(tmp_path):
    fx = fixtures.random_program(3, 32, exports=False)
    prog = tmp_path / "p.exe"
    prog.write_bytes(fx.data)
    sym = tmp_path / "s.json"
    sym.write_text(json.dumps({n: hex(r) for n, r in fx.functions.items()}))
    out = tmp_path / "b.json"
    assert main(["analyze", str(prog), "--symbols", str(sym), "--out", str(out)]) == 0
    bl = cfg.block_list_from_json(out.read_text())
    named = {b.function_name for b in bl if b.function_name}
    assert named == set(fx.functions)
