import json
import random
import struct
import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from harness import instrumented_planted_bug
from peinstr import fixtures, sandbox
from peinstr.coverage import count_non_virgin, update_virgin, virgin_map
from peinstr.fuzz import (AgentBackend, AgentFrame, BadMagic, Budget, CoverageRegion, CrashInfo, FrameType,
                          Outcome, SandboxBackend, SandboxTarget, SpawnBackend, Status, Truncated, UnknownType,
                          agent_decode, agent_encode, deterministic, fuzz_loop, mutate, process_agent,
                          runner_argv, thread_agent)
from peinstr.fuzz import protocol
from peinstr.fuzz.mutate import splice


# ---------------------------------------------------------------- mutation

def test_first_bitflip_sets_top_bit():
    assert next(deterministic(b"\x00")) == ("flip1", b"\x80")


def test_byteflip_children():
    kids = [d for stage, d in deterministic(b"AB") if stage == "flip8"]
    assert kids == [b"\xbe\x42", b"\x41\xbd"]


def test_walking_bitflip_order():
    kids = [d for stage, d in deterministic(b"\x00\x00") if stage == "flip1"]
    assert kids == [bytes([0x80 >> k, 0]) for k in range(8)] + [bytes([0, 0x80 >> k]) for k in range(8)]


def test_stage_order():
    order = []
    for stage, _ in mutate(b"\x10\x20\x30\x40", 1, havoc_rounds=4):
        if not order or order[-1] != stage:
            order.append(stage)
    assert order == ["flip1", "flip2", "flip4", "flip8", "flip16", "flip32", "arith8", "arith16", "arith32",
                     "interest8", "interest16", "interest32", "havoc"]


def test_arith_covers_both_endiannesses():
    kids = {d for stage, d in deterministic(b"\x00\x10") if stage == "arith16"}
    assert b"\x00\x11" in kids and b"\x01\x10" in kids


@given(st.binary(min_size=1, max_size=32), st.integers(0, 2**32))
def test_mutation_is_reproducible(data, seed):
    pool = [b"hello", b"world!"]
    a = list(mutate(data, seed, havoc_rounds=32, pool=pool))
    b = list(mutate(data, seed, havoc_rounds=32, pool=pool))
    assert a == b
    assert all(1 <= len(c) <= 4096 for _, c in a)


def test_mutate_rejects_empty():
    with pytest.raises(ValueError):
        list(mutate(b"", 0))


@given(st.binary(min_size=2, max_size=40), st.binary(min_size=2, max_size=40), st.integers(0, 1000))
def test_splice_keeps_head_and_tail(a, b, seed):
    out = splice(a, b, random.Random(seed))
    if out is not None:
        cut = next(i for i in range(len(out) + 1) if out[:i] == a[:i] and out[i:] == b[i:])
        assert 0 <= cut <= len(out)


# ---------------------------------------------------------------- protocol

def test_exec_end_bytes():
    assert agent_encode(protocol.exec_end(0)) == bytes.fromhex("53504F54030400000000000000")


def test_exec_end_exact_layout():
    raw = agent_encode(protocol.exec_end(0))
    assert raw == b"SPOT" + b"\x03" + struct.pack("<I", 4) + struct.pack("<I", 0)


def test_bad_magic():
    with pytest.raises(BadMagic):
        agent_decode(b"XPOT\x03\x00\x00\x00\x00")


def test_truncated_and_unknown():
    with pytest.raises(Truncated):
        agent_decode(b"SPOT\x03\x04\x00\x00\x00\x00")
    with pytest.raises(Truncated):
        agent_decode(b"SPO")
    with pytest.raises(UnknownType):
        agent_decode(b"SPOT\x09\x00\x00\x00\x00")


def test_crash_payload_layout():
    f = protocol.crash(CrashInfo(0xC0000005, 0xDEAD0000, "t.dll"))
    assert f.payload == struct.pack("<IQI", 0xC0000005, 0xDEAD0000, 5) + b"t.dll"
    assert protocol.crash_info(f) == CrashInfo(0xC0000005, 0xDEAD0000, "t.dll")
    with pytest.raises(Truncated):
        protocol.crash_info(AgentFrame(FrameType.CRASH, f.payload[:10]))


frames = st.builds(AgentFrame, st.sampled_from(list(FrameType)), st.binary(max_size=300))


@given(frames)
def test_frame_round_trip(frame):
    raw = agent_encode(frame)
    got, used = agent_decode(raw + b"trailing")
    assert got == frame and used == len(raw)


@given(st.lists(frames, max_size=8), st.integers(1, 17))
def test_stream_reassembly(fs, chunk):
    blob = b"".join(agent_encode(f) for f in fs)
    reader = protocol.FrameReader()
    got = []
    for k in range(0, len(blob), chunk):
        reader.feed(blob[k:k + chunk])
        while (f := reader.next()) is not None:
            got.append(f)
    assert got == fs


# ---------------------------------------------------------------- backends

@pytest.fixture(scope="module", params=[32, 64])
def target(request):
    return instrumented_planted_bug(request.param)


def test_sandbox_ok_and_crash(target):
    be = SandboxBackend(target)
    ok = be.run(b"aaaa")
    assert ok.status is Status.Ok and ok.coverage.bitmap.any()
    bad = be.run(b"FUZz")
    assert bad.status is Status.Crash
    assert bad.crash.fault_address == 0xDEAD0000 and bad.crash.exception_code == 0xC0000005
    assert be.run(b"aaaa").coverage.bitmap.tobytes() == ok.coverage.bitmap.tobytes()


def test_sandbox_fault_kind_is_unmapped():
    tgt = SandboxTarget(instrumented_planted_bug(32))
    tgt.execute(b"FUZ")
    assert tgt.state.exit.fault is sandbox.FaultKind.Unmapped


def test_hang_on_fuel():
    be = SandboxBackend(instrumented_planted_bug(32), fuel=20)
    assert be.run(b"aaaa").status is Status.Hang


def test_uninstrumented_target_uses_trace():
    be = SandboxBackend(fixtures.planted_bug(32).data)
    a, b = be.run(b"aaaa"), be.run(b"Faaa")
    assert a.status is b.status is Status.Ok
    assert not np.array_equal(a.coverage.bitmap, b.coverage.bitmap)


def test_spawn_matches_sandbox(tmp_path, target):
    path = tmp_path / "t.exe"
    path.write_bytes(target)
    sb = SandboxBackend(target)
    sp = SpawnBackend(runner_argv(path), timeout=30)
    try:
        for inp in (b"aaaa", b"FUZ!"):
            a, b = sb.run(inp), sp.run(inp)
            assert a.status is b.status
            assert np.array_equal(a.coverage.bitmap, b.coverage.bitmap)
            if a.crash:
                assert (a.crash.exception_code, a.crash.fault_address) == (b.crash.exception_code,
                                                                           b.crash.fault_address)
    finally:
        sp.close()


def test_mock_agent_ok():
    region = CoverageRegion(10)
    be = AgentBackend(thread_agent(lambda data: Outcome(Status.Ok)), region)
    try:
        assert be.agent_hello.type is FrameType.HELLO
        assert be.run(b"x").status is Status.Ok
        be.heartbeat(b"tick")
    finally:
        be.close()


def test_agent_hang_resets_channel():
    release = threading.Event()

    def executor(data):
        if data == b"stall":
            release.wait(5)
        return Outcome(Status.Ok)

    be = AgentBackend(thread_agent(executor), CoverageRegion(10), timeout=0.2)
    try:
        assert be.run(b"stall").status is Status.Hang
        assert be.resets == 1
        release.set()
        assert be.run(b"fine").status is Status.Ok
    finally:
        be.close()


def test_thread_agent_matches_sandbox(target):
    region = CoverageRegion(16)
    tgt = SandboxTarget(target, shm=region.buf)
    be = AgentBackend(thread_agent(tgt.execute), region)
    sb = SandboxBackend(target)
    try:
        for inp in (b"aaaa", b"FUZ?", b"Fq"):
            a, b = sb.run(inp), be.run(inp)
            assert a.status is b.status and np.array_equal(a.coverage.bitmap, b.coverage.bitmap)
    finally:
        be.close()


def test_process_agent_matches_sandbox(tmp_path, target):
    path = tmp_path / "t.exe"
    path.write_bytes(target)
    region = CoverageRegion(16)
    be = AgentBackend(process_agent(str(path), shm_name=region.name), region)
    sb = SandboxBackend(target)
    try:
        for inp in (b"aaaa", b"FUZ.", b"FU"):
            a, b = sb.run(inp), be.run(inp)
            assert a.status is b.status and np.array_equal(a.coverage.bitmap, b.coverage.bitmap)
    finally:
        be.close()


# ---------------------------------------------------------------- campaigns

def test_zero_budget_keeps_seeds_only():
    be = SandboxBackend(instrumented_planted_bug(32))
    rep = fuzz_loop([b"aaaa", b"bbbb"], be, Budget(execs=0))
    assert rep.execs == 0
    assert [c.data for c in rep.queue] == [b"aaaa", b"bbbb"]
    assert rep.unique_crashes == 0


def test_seeds_always_queued():
    be = SandboxBackend(instrumented_planted_bug(32))
    rep = fuzz_loop([b"aaaa", b"aaaa", b"bbbb"], be, Budget(execs=3))
    assert [c.data for c in rep.queue] == [b"aaaa", b"bbbb"]
    assert all(c.parent is None for c in rep.queue)


def test_empty_seed_rejected():
    with pytest.raises(ValueError):
        fuzz_loop([], SandboxBackend(instrumented_planted_bug(32)), Budget(execs=1))
    with pytest.raises(ValueError):
        Budget()


def campaign(tmp, seed=3, execs=3000):
    be = SandboxBackend(instrumented_planted_bug(32))
    return fuzz_loop([b"aaaa"], be, Budget(execs=execs), rng_seed=seed, out_dir=tmp, stats_every=500)


def _strip(lines):
    return [{k: v for k, v in json.loads(x).items() if k != "execs_per_sec"} for x in lines]


def test_campaign_deterministic(tmp_path):
    a = campaign(tmp_path / "a")
    b = campaign(tmp_path / "b")
    assert [(c.id, c.data, c.parent, c.stage) for c in a.queue] == [(c.id, c.data, c.parent, c.stage)
                                                                     for c in b.queue]
    sa = (tmp_path / "a" / "stats.jsonl").read_text().splitlines()
    sb = (tmp_path / "b" / "stats.jsonl").read_text().splitlines()
    assert _strip(sa) == _strip(sb) and len(sa) == 6
    assert sorted(p.name for p in (tmp_path / "a" / "queue").iterdir()) == \
        sorted(p.name for p in (tmp_path / "b" / "queue").iterdir())


def test_campaign_queue_invariants(tmp_path):
    rep = campaign(tmp_path, execs=4000)
    ids = [c.id for c in rep.queue]
    assert ids == list(range(len(ids)))
    for c in rep.queue:
        if c.parent is not None:
            assert 0 <= c.parent < len(rep.queue)
    paths = [s["paths"] for s in rep.stats]
    assert paths == sorted(paths)
    assert rep.paths > 1


def test_replayed_queue_reaches_same_virgin_count(tmp_path):
    rep = campaign(tmp_path, execs=2000)
    be = SandboxBackend(instrumented_planted_bug(32))
    virgin = virgin_map(be.map_size_log2)
    seen = []
    for c in rep.queue:
        update_virgin(be.run(c.data).coverage.bitmap, virgin)
        seen.append(count_non_virgin(virgin))
    assert seen == sorted(seen)
    assert seen[-1] <= rep.edges


def test_crashes_found_recorded_and_replayable(tmp_path):
    be = SandboxBackend(instrumented_planted_bug(64))
    rep = fuzz_loop([b"aaaa"], be, Budget(execs=200_000, crashes=1), rng_seed=1, out_dir=tmp_path)
    assert rep.unique_crashes >= 1 and rep.unique_buckets == 1
    bins = sorted((tmp_path / "crashes").glob("*.bin"))
    docs = sorted((tmp_path / "crashes").glob("*.json"))
    assert len(bins) == len(docs) == rep.unique_crashes
    for b, d in zip(bins, docs):
        res = be.run(b.read_bytes())
        doc = json.loads(d.read_text())
        assert res.status is Status.Crash
        assert doc["bucket"] == f"{res.crash.bucket:016x}"
    assert json.loads((tmp_path / "report.json").read_text())["unique_crashes"] == rep.unique_crashes
    assert len({c.bucket for c in rep.crashes}) == rep.unique_crashes
