"""Run one input through a PE in the sandbox, as a stand-alone process.

This is the spawn-mode target for hosts that cannot execute the PE
natively.  When ``SPOT_SHM`` names a shared coverage region the feedback
section is mapped onto it.
"""

from __future__ import annotations

import argparse
import os
import sys
from multiprocessing import resource_tracker, shared_memory
from pathlib import Path
from typing import Optional, Sequence

from .fuzz.backends import DEFAULT_FUEL, SHM_ENV, SandboxTarget, Status

# mappings aliased by the sandbox; kept alive until the process exits
_mapped: list[shared_memory.SharedMemory] = []


def _attach(name: str) -> shared_memory.SharedMemory:
    shm = shared_memory.SharedMemory(name=name)
    # the creator owns the region; stop this process's tracker from unlinking it
    resource_tracker.unregister(shm._name, "shared_memory")  # type: ignore[attr-defined]
    _mapped.append(shm)
    return shm


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = argparse.ArgumentParser(prog="peinstr-run")
    ap.add_argument("--fuel", type=int, default=DEFAULT_FUEL)
    ap.add_argument("target")
    ap.add_argument("input")
    args = ap.parse_args(argv)
    shm = None
    name = os.environ.get(SHM_ENV)
    if name:
        shm = _attach(name)
    target = SandboxTarget(Path(args.target).read_bytes(), fuel=args.fuel,
                           shm=shm.buf if shm is not None else None)
    out = target.execute(Path(args.input).read_bytes())
    if out.status is Status.Crash:
        print(f"SPOT-STATUS crash {out.exception_code:#x} {out.fault_address:#x}", file=sys.stderr)
        return 1
    if out.status is Status.Hang:
        print("SPOT-STATUS hang", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    code = main()
    sys.stdout.flush()
    sys.stderr.flush()
    os._exit(code)  # skip finalizers that would try to close the still-exported region
