"""The coverage-guided campaign loop."""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from ..coverage import count_non_virgin, update_virgin, virgin_map
from .backends import Backend, BackendDown, CrashRecord, Status
from .mutate import HAVOC_ROUNDS, mutate

STATS_EVERY = 1000


@dataclass
class FuzzCase:
    id: int
    data: bytes
    parent: Optional[int] = None
    stage: str = "seed"
    exec_time: float = 0.0
    new_coverage: bool = False
    fuzzed: bool = False


@dataclass
class Budget:
    execs: Optional[int] = None
    secs: Optional[float] = None
    crashes: Optional[int] = None  # stop once this many distinct crash buckets exist

    def __post_init__(self) -> None:
        if self.execs is None and self.secs is None:
            raise ValueError("budget needs an exec count or a time limit")


@dataclass
class CampaignReport:
    execs: int = 0
    elapsed: float = 0.0
    queue: list[FuzzCase] = field(default_factory=list)
    crashes: list[CrashRecord] = field(default_factory=list)  # first record of every bucket
    crash_count: int = 0
    hangs: int = 0
    coarse_buckets: set[tuple[int, int]] = field(default_factory=set)
    edges: int = 0
    aborted: Optional[str] = None
    stats: list[dict] = field(default_factory=list)

    @property
    def paths(self) -> int:
        return len(self.queue)

    @property
    def unique_crashes(self) -> int:
        return len(self.crashes)

    @property
    def unique_buckets(self) -> int:
        return len(self.coarse_buckets)

    def summary(self) -> dict:
        return {"execs": self.execs, "paths": self.paths, "unique_crashes": self.unique_crashes,
                "unique_buckets": self.unique_buckets, "crashes_total": self.crash_count, "hangs": self.hangs,
                "edges": self.edges, "elapsed": round(self.elapsed, 3), "aborted": self.aborted}


def _case_seed(rng_seed: int, case_id: int, cycle: int) -> int:
    h = hashlib.blake2b(f"{rng_seed}:{case_id}:{cycle}".encode(), digest_size=8).digest()
    return int.from_bytes(h, "little")


class _Campaign:
    def __init__(self, backend: Backend, budget: Budget, out_dir: Optional[Path], stats_every: int):
        self.backend = backend
        self.budget = budget
        self.out = out_dir
        self.stats_every = stats_every
        self.report = CampaignReport()
        self.virgin = virgin_map(backend.map_size_log2)
        self.t0 = time.perf_counter()
        self.seen: set[bytes] = set()
        if out_dir is not None:
            for sub in ("queue", "crashes"):
                (out_dir / sub).mkdir(parents=True, exist_ok=True)
            self.stats_file = (out_dir / "stats.jsonl").open("w")
        else:
            self.stats_file = None

    def exhausted(self) -> bool:
        b = self.budget
        if b.execs is not None and self.report.execs >= b.execs:
            return True
        if b.crashes is not None and self.report.unique_crashes >= b.crashes:
            return True
        return b.secs is not None and time.perf_counter() - self.t0 >= b.secs

    def execute(self, data: bytes, parent: Optional[int], stage: str, force_keep: bool = False) -> None:
        r = self.report
        res = self.backend.run(data)
        r.execs += 1
        if res.status is Status.Crash:
            r.crash_count += 1
            rec = res.crash
            assert rec is not None
            r.coarse_buckets.add(rec.coarse_bucket)
            if all(c.bucket != rec.bucket for c in r.crashes):
                r.crashes.append(rec)
                self._save_crash(len(r.crashes) - 1, rec)
        elif res.status is Status.Hang:
            r.hangs += 1
        else:
            new = update_virgin(res.coverage.bitmap, self.virgin)
            if (new or force_keep) and data not in self.seen:
                self.seen.add(data)
                case = FuzzCase(len(r.queue), data, parent, stage, res.exec_time, bool(new))
                r.queue.append(case)
                self._save_case(case)
        if r.execs % self.stats_every == 0:
            self.emit_stats()

    def _save_case(self, case: FuzzCase) -> None:
        if self.out is not None:
            src = "seed" if case.parent is None else f"src_{case.parent:06d}"
            (self.out / "queue" / f"id_{case.id:06d}_{src}_{case.stage}").write_bytes(case.data)

    def _save_crash(self, k: int, rec: CrashRecord) -> None:
        if self.out is not None:
            stem = self.out / "crashes" / f"id_{k:06d}_code_{rec.exception_code:08x}"
            stem.with_suffix(".bin").write_bytes(rec.input)
            stem.with_suffix(".json").write_text(json.dumps(rec.to_json(), sort_keys=True))

    def emit_stats(self) -> None:
        r = self.report
        el = time.perf_counter() - self.t0
        line = {"execs": r.execs, "execs_per_sec": round(r.execs / el, 1) if el > 0 else 0.0,
                "paths": r.paths, "unique_crashes": r.unique_crashes, "unique_buckets": r.unique_buckets}
        r.stats.append(line)
        if self.stats_file is not None:
            self.stats_file.write(json.dumps(line) + "\n")
            self.stats_file.flush()

    def finish(self) -> CampaignReport:
        r = self.report
        r.elapsed = time.perf_counter() - self.t0
        r.edges = count_non_virgin(self.virgin)
        if not r.stats or r.stats[-1]["execs"] != r.execs:
            self.emit_stats()
        if self.stats_file is not None:
            self.stats_file.close()
            (self.out / "report.json").write_text(json.dumps(r.summary(), sort_keys=True, indent=1))
        return r


def fuzz_loop(seeds: Iterable[bytes], backend: Backend, budget: Budget, *, rng_seed: int = 0,
              out_dir: Optional[str | os.PathLike] = None, stats_every: int = STATS_EVERY,
              havoc_rounds: int = HAVOC_ROUNDS) -> CampaignReport:
    """Round-robin over the queue; each entry gets the deterministic stages once, havoc every visit."""
    seeds = [bytes(s) for s in seeds]
    if not seeds or not all(seeds):
        raise ValueError("need at least one non-empty seed")
    camp = _Campaign(backend, budget, Path(out_dir) if out_dir is not None else None, stats_every)
    r = camp.report
    try:
        for s in seeds:
            if camp.exhausted():
                break
            camp.execute(s, None, "seed", force_keep=True)
        if not r.queue:
            # every seed crashed or hung; fall back to fuzzing them anyway
            for s in seeds:
                if s not in camp.seen:
                    camp.seen.add(s)
                    r.queue.append(FuzzCase(len(r.queue), s))
        cursor = 0
        cycle = 0
        while not camp.exhausted():
            case = r.queue[cursor]
            pool = [c.data for c in r.queue]
            stream = mutate(case.data, _case_seed(rng_seed, case.id, cycle),
                            deterministic_stages=not case.fuzzed, havoc_rounds=havoc_rounds, pool=pool)
            for stage, cand in stream:
                if camp.exhausted():
                    break
                camp.execute(cand, case.id, stage)
            case.fuzzed = True
            cursor += 1
            if cursor >= len(r.queue):
                cursor = 0
                cycle += 1
    except BackendDown as exc:
        r.aborted = str(exc)
    return camp.finish()
