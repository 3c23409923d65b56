"""Mock in-target agent serving a PE from the sandbox over an inherited socket."""

from __future__ import annotations

import argparse
import os
import socket
import sys
from multiprocessing import resource_tracker, shared_memory
from pathlib import Path
from typing import Optional, Sequence

from .fuzz.agent import serve_agent
from .fuzz.backends import SHM_ENV, SandboxTarget

# mappings aliased by the sandbox; kept alive until the process exits
_mapped: list[shared_memory.SharedMemory] = []


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = argparse.ArgumentParser(prog="peinstr-agent")
    ap.add_argument("--fd", type=int, required=True)
    ap.add_argument("--fuel", type=int, default=None)
    ap.add_argument("target")
    args = ap.parse_args(argv)
    shm = None
    if os.environ.get(SHM_ENV):
        shm = shared_memory.SharedMemory(name=os.environ[SHM_ENV])
        resource_tracker.unregister(shm._name, "shared_memory")  # type: ignore[attr-defined]
        _mapped.append(shm)
    kw = {"fuel": args.fuel} if args.fuel is not None else {}
    target = SandboxTarget(Path(args.target).read_bytes(), shm=shm.buf if shm is not None else None, **kw)
    sock = socket.socket(fileno=args.fd)
    serve_agent(sock, target.execute, name=Path(args.target).name)
    return 0


if __name__ == "__main__":
    code = main()
    sys.stdout.flush()
    sys.stderr.flush()
    os._exit(code)
