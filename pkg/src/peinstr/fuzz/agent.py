"""Persistent-mode execution through an agent living inside the target.

The channel is strictly request/response with one exec in flight.  A
mock agent (thread or child process) stands in for the injected module.
"""

from __future__ import annotations

import os
import socket
import subprocess
import sys
import threading
import time
from typing import Callable, Optional

from .backends import (DEFAULT_TIMEOUT, SHM_ENV, BackendDown, CoverageRegion, Outcome, RunResult,
                       SandboxTarget, Status, _result)
from .protocol import (AgentFrame, CrashInfo, FrameReader, FrameType, ProtocolError, agent_encode, crash,
                       crash_info, exec_end, exec_status, hello)

Executor = Callable[[bytes], Outcome]


class Channel:
    """Frames over a connected stream socket."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.reader = FrameReader()

    def send(self, frame: AgentFrame) -> None:
        try:
            self.sock.sendall(agent_encode(frame))
        except OSError as exc:
            raise BackendDown(f"agent channel broken: {exc}") from exc

    def recv(self, timeout: Optional[float]) -> AgentFrame:
        """Next frame; TimeoutError if none arrives in time, BackendDown on EOF."""
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            frame = self.reader.next()
            if frame is not None:
                return frame
            if deadline is not None:
                left = deadline - time.monotonic()
                if left <= 0:
                    raise TimeoutError("agent did not answer in time")
                self.sock.settimeout(left)
            else:
                self.sock.settimeout(None)
            try:
                chunk = self.sock.recv(65536)
            except socket.timeout:
                raise TimeoutError("agent did not answer in time") from None
            except OSError as exc:
                raise BackendDown(f"agent channel broken: {exc}") from exc
            if not chunk:
                raise BackendDown("agent closed the channel")
            self.reader.feed(chunk)

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


# ---------------------------------------------------------------- agent side

def serve_agent(sock: socket.socket, executor: Executor, *, name: str = "mock-agent") -> int:
    """Agent loop: HELLO, then answer EXEC_BEGIN / HEARTBEAT until SHUTDOWN or EOF.

    A hanging input gets no reply at all, exactly like a stuck target.
    Returns the number of execs served.
    """
    ch = Channel(sock)
    served = 0
    try:
        ch.send(hello(os.getpid(), name))
        while True:
            try:
                frame = ch.recv(None)
            except (BackendDown, ProtocolError):
                break
            if frame.type is FrameType.EXEC_BEGIN:
                out = executor(frame.payload)
                served += 1
                if out.status is Status.Crash:
                    ch.send(crash(CrashInfo(out.exception_code, out.fault_address, name)))
                elif out.status is Status.Ok:
                    ch.send(exec_end(0))
            elif frame.type is FrameType.HEARTBEAT:
                ch.send(AgentFrame(FrameType.HEARTBEAT, frame.payload))
            elif frame.type is FrameType.SHUTDOWN:
                break
            else:
                break
    except BackendDown:
        pass
    finally:
        ch.close()
    return served


def thread_agent(executor: Executor) -> Callable[[], socket.socket]:
    """Connector that starts a fresh in-process mock agent per connection."""

    def connect() -> socket.socket:
        ours, theirs = socket.socketpair()
        threading.Thread(target=serve_agent, args=(theirs, executor), daemon=True).start()
        return ours

    return connect


def process_agent(target: str, *, fuel: Optional[int] = None, shm_name: Optional[str] = None
                  ) -> Callable[[], socket.socket]:
    """Connector that runs the sandbox mock agent for ``target`` in a child process."""
    procs: list[subprocess.Popen] = []

    def connect() -> socket.socket:
        for p in procs:
            if p.poll() is None:
                p.kill()
            p.wait()
        procs.clear()
        ours, theirs = socket.socketpair()
        argv = [sys.executable, "-m", "peinstr.agent", "--fd", str(theirs.fileno())]
        if fuel is not None:
            argv += ["--fuel", str(fuel)]
        argv.append(target)
        env = dict(os.environ)
        if shm_name:
            env[SHM_ENV] = shm_name
        try:
            procs.append(subprocess.Popen(argv, pass_fds=[theirs.fileno()], env=env))
        except OSError as exc:
            raise BackendDown(f"cannot start agent: {exc}") from exc
        finally:
            theirs.close()
        return ours

    connect.procs = procs  # type: ignore[attr-defined]
    return connect


# ---------------------------------------------------------------- fuzzer side

class AgentBackend:
    """Fuzzer end of the channel; owns ``region`` and releases it on close."""

    def __init__(self, connect: Callable[[], socket.socket], region: CoverageRegion, *,
                 timeout: float = DEFAULT_TIMEOUT, hello_timeout: float = 30.0):
        self.connect = connect
        self.region = region
        self.map_size_log2 = region.map_size_log2
        self.timeout = timeout
        self.hello_timeout = hello_timeout
        self.resets = 0
        self.agent_hello: Optional[AgentFrame] = None
        self.channel = self._open()

    def _open(self) -> Channel:
        try:
            ch = Channel(self.connect())
        except OSError as exc:
            raise BackendDown(f"cannot connect to agent: {exc}") from exc
        try:
            first = ch.recv(self.hello_timeout)
        except TimeoutError:
            ch.close()
            raise BackendDown("agent never said HELLO") from None
        if first.type is not FrameType.HELLO:
            ch.close()
            raise BackendDown(f"expected HELLO, got {first.type.name}")
        self.agent_hello = first
        return ch

    def _reset(self) -> None:
        self.channel.close()
        self.resets += 1
        self.channel = self._open()

    def run(self, data: bytes) -> RunResult:
        self.region.reset()
        t0 = time.perf_counter()
        self.channel.send(AgentFrame(FrameType.EXEC_BEGIN, bytes(data)))
        try:
            frame = self.channel.recv(self.timeout)
        except TimeoutError:
            self._reset()
            return RunResult(Status.Hang, self.region.coverage(), None, time.perf_counter() - t0)
        elapsed = time.perf_counter() - t0
        if frame.type is FrameType.EXEC_END:
            exec_status(frame)
            out = Outcome(Status.Ok)
        elif frame.type is FrameType.CRASH:
            info = crash_info(frame)
            out = Outcome(Status.Crash, info.exception_code, info.fault_address)
        else:
            raise ProtocolError(f"unexpected {frame.type.name} while an exec is in flight")
        return _result(data, out, self.region.coverage(), elapsed)

    def heartbeat(self, token: bytes = b"") -> None:
        self.channel.send(AgentFrame(FrameType.HEARTBEAT, token))
        frame = self.channel.recv(self.timeout)
        if frame.type is not FrameType.HEARTBEAT or frame.payload != token:
            raise ProtocolError(f"heartbeat answered with {frame.type.name}")

    def close(self) -> None:
        try:
            self.channel.send(AgentFrame(FrameType.SHUTDOWN))
        except BackendDown:
            pass
        self.channel.close()
        self.region.close()


def sandbox_executor(target: SandboxTarget) -> Executor:
    return target.execute
