"""Coverage-guided fuzzing over spawn, agent and sandbox backends."""

from .agent import AgentBackend, Channel, process_agent, serve_agent, thread_agent
from .backends import (BackendDown, CoverageRegion, CrashRecord, Outcome, RunResult, SandboxBackend,
                       SandboxTarget, SpawnBackend, Status, path_hash, runner_argv)
from .loop import Budget, CampaignReport, FuzzCase, fuzz_loop
from .mutate import deterministic, havoc_one, mutate, splice
from .protocol import (AgentFrame, BadMagic, CrashInfo, FrameType, ProtocolError, Truncated, UnknownType,
                       agent_decode, agent_encode)


def run_case(data: bytes, backend) -> RunResult:
    """Execute one input on an initialized backend."""
    return backend.run(data)


__all__ = [
    "AgentBackend", "AgentFrame", "BackendDown", "BadMagic", "Budget", "CampaignReport", "Channel",
    "CoverageRegion", "CrashInfo", "CrashRecord", "FrameType", "FuzzCase", "Outcome", "ProtocolError",
    "RunResult", "SandboxBackend", "SandboxTarget", "SpawnBackend", "Status", "Truncated", "UnknownType",
    "agent_decode", "agent_encode", "deterministic", "fuzz_loop", "havoc_one", "mutate", "path_hash",
    "process_agent", "run_case", "runner_argv", "serve_agent", "splice", "thread_agent",
]
