"""Ways of executing one input and collecting its coverage."""

from __future__ import annotations

import enum
import hashlib
import os
import signal
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass
from multiprocessing import shared_memory
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np

from .. import cfg, pe, sandbox
from ..coverage import CoverageMap, classify_counts, simulate_path
from ..rewrite import FEEDBACK, FEEDBACK_MAGIC, HEADER_SIZE, feedback_header
from ..select import block_id

SHM_ENV = "SPOT_SHM"
DEFAULT_FUEL = 5000
DEFAULT_TIMEOUT = 1.0
PAGE_MASK = ~0xFFF

# POSIX signals mapped onto the Windows exception codes they correspond to
SIGNAL_CODES = {
    signal.SIGSEGV: 0xC0000005,
    signal.SIGBUS: 0xC0000005,
    signal.SIGILL: 0xC000001D,
    signal.SIGFPE: 0xC0000094,
    signal.SIGTRAP: 0x80000003,
    signal.SIGABRT: 0xC0000409,
}


class BackendDown(Exception):
    pass


class Status(enum.Enum):
    Ok = "ok"
    Crash = "crash"
    Hang = "hang"


@dataclass(frozen=True)
class CrashRecord:
    input: bytes
    exception_code: int
    fault_address: int
    path_hash: int

    @property
    def bucket(self) -> int:
        return self.path_hash

    @property
    def coarse_bucket(self) -> tuple[int, int]:
        return self.exception_code, self.fault_address & PAGE_MASK

    def to_json(self) -> dict:
        return {"exception_code": self.exception_code, "fault_address": self.fault_address,
                "path_hash": f"{self.path_hash:016x}", "bucket": f"{self.bucket:016x}",
                "coarse_bucket": [self.exception_code, self.fault_address & PAGE_MASK],
                "size": len(self.input)}


@dataclass
class RunResult:
    status: Status
    coverage: CoverageMap
    crash: Optional[CrashRecord] = None
    exec_time: float = 0.0


def path_hash(cov: CoverageMap) -> int:
    digest = hashlib.blake2b(classify_counts(cov.bitmap).tobytes(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class Backend(Protocol):
    map_size_log2: int

    def run(self, data: bytes) -> RunResult: ...

    def close(self) -> None: ...


# ---------------------------------------------------------------- sandbox

@dataclass(frozen=True)
class Outcome:
    status: Status
    exception_code: int = 0
    fault_address: int = 0


def _export(img: pe.PeImage, name: str) -> Optional[int]:
    for rva, n in pe.exports(img):
        if n == name:
            return rva
    return None


class SandboxTarget:
    """An image loaded once in the sandbox and rewound before every input.

    The input goes to the exported ``input`` buffer and its length to the
    exported ``input_len`` cell.  Coverage comes from the feedback section
    when the image is instrumented, otherwise from the traced block heads.
    """

    def __init__(self, img: pe.PeImage | bytes, *, fuel: int = DEFAULT_FUEL,
                 shm: Optional[memoryview | bytearray] = None, map_size_log2: int = 16,
                 input_rva: Optional[int] = None, input_len_rva: Optional[int] = None,
                 input_cap: Optional[int] = None):
        if isinstance(img, (bytes, bytearray)):
            img = pe.parse(bytes(img))
        self.img = img
        self.fuel = fuel
        self.input_rva = input_rva if input_rva is not None else _export(img, "input")
        self.input_len_rva = input_len_rva if input_len_rva is not None else _export(img, "input_len")
        if self.input_rva is None or self.input_len_rva is None:
            raise BackendDown("target exports no 'input'/'input_len' buffer")
        sec = img.section_for_rva(self.input_rva)
        room = sec.virtual_address + sec.mapped_size - self.input_rva
        self.input_cap = min(room, input_cap) if input_cap else room
        fb = img.section_by_name(FEEDBACK)
        self.instrumented = fb is not None and bytes(fb.data[:8]) == FEEDBACK_MAGIC
        heads: set[int] = set()
        if self.instrumented:
            hdr = feedback_header(bytes(fb.data[:HEADER_SIZE]))
            self.map_size_log2 = hdr["map_size"].bit_length() - 1
            self.extra_size = hdr["extra_size"]
        else:
            self.map_size_log2 = map_size_log2
            self.extra_size = 0
            blocks, _ = cfg.analyze(img)
            self.ids = {img.image_base + b.start_rva: block_id(b.start_rva, map_size_log2) for b in blocks}
            heads = set(self.ids)
        self.state = sandbox.load_image(img, heads=heads, shm=shm if self.instrumented else None)
        self.snap = sandbox.snapshot(self.state)
        self.base = self.state.base
        if self.instrumented:
            self.fb_va = self.state.section_va(FEEDBACK)

    @property
    def map_size(self) -> int:
        return 1 << self.map_size_log2

    def execute(self, data: bytes) -> Outcome:
        st = sandbox.restore(self.state, self.snap)
        data = bytes(data[:self.input_cap])
        st.mem.write_bytes(self.base + self.input_rva, data, force=True)
        st.mem.write(self.base + self.input_len_rva, 4, len(data))
        sandbox.run(st, self.fuel)
        ex = st.exit
        if ex.kind is sandbox.ExitKind.Fault:
            return Outcome(Status.Crash, sandbox.EXCEPTION_CODES[ex.fault], ex.addr)
        if ex.kind is sandbox.ExitKind.FuelExhausted:
            return Outcome(Status.Hang)
        return Outcome(Status.Ok)

    def coverage(self) -> CoverageMap:
        if self.instrumented:
            raw = self.state.mem.read_bytes(self.fb_va + HEADER_SIZE, self.map_size)
            return CoverageMap(np.frombuffer(raw, dtype=np.uint8).copy(), self.map_size_log2)
        return simulate_path([self.ids[h] for h in self.state.trace], self.map_size_log2)


class SandboxBackend:
    def __init__(self, img: pe.PeImage | bytes, **kw):
        self.target = SandboxTarget(img, **kw)
        self.map_size_log2 = self.target.map_size_log2

    def run(self, data: bytes) -> RunResult:
        t0 = time.perf_counter()
        out = self.target.execute(data)
        cov = self.target.coverage()
        return _result(data, out, cov, time.perf_counter() - t0)

    def close(self) -> None:
        pass


def _result(data: bytes, out: Outcome, cov: CoverageMap, elapsed: float) -> RunResult:
    rec = None
    if out.status is Status.Crash:
        rec = CrashRecord(bytes(data), out.exception_code, out.fault_address, path_hash(cov))
    return RunResult(out.status, cov, rec, elapsed)


# ---------------------------------------------------------------- shared coverage region

class CoverageRegion:
    """A named shared-memory object laid out like the feedback section."""

    def __init__(self, map_size_log2: int, extra_size: int = 0, flags: int = 0):
        self.map_size_log2 = map_size_log2
        self.map_size = 1 << map_size_log2
        self.size = HEADER_SIZE + self.map_size + extra_size + 8
        self.shm = shared_memory.SharedMemory(create=True, size=self.size)
        self.header = bytes(FEEDBACK_MAGIC + np.array([1, self.map_size, extra_size, flags], dtype="<u4").tobytes())
        self.reset()

    @property
    def name(self) -> str:
        return self.shm.name

    @property
    def buf(self) -> memoryview:
        return self.shm.buf

    def reset(self) -> None:
        self.shm.buf[:self.size] = bytes(self.size)
        self.shm.buf[:len(self.header)] = self.header

    def coverage(self) -> CoverageMap:
        raw = bytes(self.shm.buf[HEADER_SIZE:HEADER_SIZE + self.map_size])
        return CoverageMap(np.frombuffer(raw, dtype=np.uint8).copy(), self.map_size_log2)

    def close(self) -> None:
        try:
            self.shm.unlink()
        except FileNotFoundError:
            pass
        try:
            self.shm.close()
        except BufferError:
            # an in-process target still aliases the mapping; it is freed with that target
            self.shm._buf = self.shm._mmap = None  # type: ignore[attr-defined]
            fd = getattr(self.shm, "_fd", -1)
            if fd >= 0:
                os.close(fd)
                self.shm._fd = -1  # type: ignore[attr-defined]


# ---------------------------------------------------------------- spawn

def runner_argv(target: str | Path, fuel: int = DEFAULT_FUEL) -> list[str]:
    """Command line that runs ``target`` in the sandbox as a child process, input at ``@@``."""
    return [sys.executable, "-m", "peinstr.runner", "--fuel", str(fuel), str(target), "@@"]


class SpawnBackend:
    """One process per input; coverage through the ``SPOT_SHM`` region.

    ``@@`` in ``argv`` is replaced by the path of a file holding the input,
    otherwise the input is piped to stdin.  A child that dies by a signal is
    a crash.  A child may report the precise exception on stderr with a
    ``SPOT-STATUS crash <code> <addr>`` or ``SPOT-STATUS hang`` line.
    """

    def __init__(self, argv: Sequence[str], *, map_size_log2: int = 16, extra_size: int = 0,
                 timeout: float = DEFAULT_TIMEOUT, workdir: Optional[str | Path] = None):
        if not argv:
            raise BackendDown("empty target command")
        self.argv = list(argv)
        self.timeout = timeout
        self.map_size_log2 = map_size_log2
        self.region = CoverageRegion(map_size_log2, extra_size)
        self._tmp = tempfile.TemporaryDirectory(dir=workdir)
        self.input_path = Path(self._tmp.name) / "cur_input"
        self.env = dict(os.environ, **{SHM_ENV: self.region.name})

    def run(self, data: bytes) -> RunResult:
        self.region.reset()
        uses_file = any("@@" in a for a in self.argv)
        argv = [a.replace("@@", str(self.input_path)) for a in self.argv]
        if uses_file:
            self.input_path.write_bytes(data)
        t0 = time.perf_counter()
        try:
            proc = subprocess.run(argv, input=None if uses_file else data, env=self.env,
                                  stdin=subprocess.DEVNULL if uses_file else None,
                                  stdout=subprocess.DEVNULL, stderr=subprocess.PIPE, timeout=self.timeout)
        except subprocess.TimeoutExpired:
            return RunResult(Status.Hang, self.region.coverage(), None, time.perf_counter() - t0)
        except OSError as exc:
            raise BackendDown(f"cannot launch {argv[0]}: {exc}") from exc
        elapsed = time.perf_counter() - t0
        return _result(data, self._status(proc), self.region.coverage(), elapsed)

    @staticmethod
    def _status(proc: subprocess.CompletedProcess) -> Outcome:
        for line in proc.stderr.decode("latin-1").splitlines():
            parts = line.split()
            if parts[:2] == ["SPOT-STATUS", "crash"] and len(parts) == 4:
                return Outcome(Status.Crash, int(parts[2], 0), int(parts[3], 0))
            if parts[:2] == ["SPOT-STATUS", "hang"]:
                return Outcome(Status.Hang)
        rc = proc.returncode
        if rc < 0:
            return Outcome(Status.Crash, SIGNAL_CODES.get(-rc, 0xC0000005), 0)
        if rc & 0xF0000000 == 0xC0000000:  # NTSTATUS exit code of a crashed Windows process
            return Outcome(Status.Crash, rc, 0)
        return Outcome(Status.Ok)

    def close(self) -> None:
        self.region.close()
        self._tmp.cleanup()
