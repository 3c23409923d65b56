"""Command-line front end: analyze, instrument and fuzz.

Exit codes: 0 ok, 1 input error, 2 usage error, 3 runtime or backend error.
Machine-readable output always goes to files; stdout carries progress only.
"""

from __future__ import annotations

import argparse
import os
import re
import sys
import tempfile
from pathlib import Path
from typing import Optional, Sequence

from . import cfg, pe, rewrite, select
from .fuzz import (AgentBackend, BackendDown, Budget, CoverageRegion, ProtocolError, SandboxBackend,
                   SpawnBackend, fuzz_loop, process_agent, runner_argv)

EXIT_OK, EXIT_INPUT, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _usage(msg: str) -> CliError:
    return CliError(EXIT_USAGE, msg)


def _input(msg: str) -> CliError:
    return CliError(EXIT_INPUT, msg)


def atomic_write(path: str | Path, data: bytes) -> None:
    """Write through a sibling temp file so a failure never leaves partial output."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def _write(path: str | Path, data: bytes) -> None:
    try:
        atomic_write(path, data)
    except OSError as exc:
        raise _input(f"cannot write {path}: {exc.strerror or exc}") from None


def _read(path: str | Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise _input(f"cannot read {path}: {exc.strerror or exc}") from None


def _load_pe(path: str) -> pe.PeImage:
    data = _read(path)
    try:
        return pe.parse(data)
    except (pe.PeError, ValueError) as exc:
        raise _input(f"{path}: not a usable PE image: {exc}") from None


# ---------------------------------------------------------------- analyze

def cmd_analyze(args: argparse.Namespace) -> int:
    img = _load_pe(args.target)
    symbols = None
    if args.symbols:
        _read(args.symbols)
        try:
            symbols = cfg.load_symbols(args.symbols)
        except (ValueError, KeyError) as exc:
            raise _input(f"{args.symbols}: bad symbol file: {exc}") from None
    blocks, _ = cfg.analyze(img, symbols)
    _write(args.out, cfg.block_list_to_json(blocks))
    print(f"{len(blocks.blocks)} blocks, {len(blocks.jump_tables)} jump tables -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- instrument

def _filter_spec(args: argparse.Namespace) -> select.FilterSpec:
    try:
        inc = [select.parse_range(r) for r in args.include]
        exc = [select.parse_range(r) for r in args.exclude]
    except ValueError as e:
        raise _usage(str(e)) from None
    for pat in args.match + args.skip:
        try:
            re.compile(pat)
        except re.error as e:
            raise _usage(f"bad pattern {pat!r}: {e}") from None
    return select.FilterSpec(inc, exc, list(args.match), list(args.skip), args.select == "memory")


def _external_analysis(img: pe.PeImage, path: str) -> tuple[cfg.BlockList, list]:
    try:
        blocks = cfg.block_list_from_json(_read(path))
    except (ValueError, KeyError, TypeError) as exc:
        raise _input(f"{path}: bad block list: {exc}") from None
    if blocks.arch is not img.arch:
        raise _input(f"{path}: block list is {blocks.arch.value}, image is {img.arch.value}")
    resume = set(cfg.entry_points(img)) | {b.start_rva for b in blocks.blocks}
    resume.update(t for jt in blocks.jump_tables for t in jt.targets)
    insns, _ = cfg.sweep_image(img, resume)
    return blocks, insns


def cmd_instrument(args: argparse.Namespace) -> int:
    if not 10 <= args.map_size <= 20:
        raise _usage("--map-size must be between 10 and 20")
    spec = _filter_spec(args)
    img = _load_pe(args.target)
    if args.blocks:
        analysis = _external_analysis(img, args.blocks)
    else:
        analysis = cfg.analyze(img)
    blocks, insns = analysis
    plan = select.make_plan(blocks, spec, insns=insns, imports=pe.imports(img),
                            mode=select.Mode(args.mode), thread_mode=select.ThreadMode(args.threads),
                            linear=args.linear, map_size_log2=args.map_size)
    try:
        out, report = rewrite.instrument(img, plan, analysis=analysis)
    except rewrite.RewriteError as exc:
        raise CliError(EXIT_RUNTIME, f"rewrite failed: {exc}") from None
    report_path = args.report or f"{args.out}.report.json"
    _write(args.out, out.serialize())
    _write(report_path, report.to_json().encode())
    print(f"{report.instrumented}/{len(plan)} points instrumented "
          f"({report.skipped_too_small} too small, {report.skipped_unrelocatable} unrelocatable) -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- fuzz

def _seeds(path: str) -> list[bytes]:
    d = Path(path)
    if not d.is_dir():
        raise _input(f"seed directory {path} does not exist")
    seeds = []
    for f in sorted(d.iterdir()):
        if f.is_file():
            data = _read(f)
            if data:
                seeds.append(data)
    if not seeds:
        raise _usage(f"seed directory {path} holds no non-empty inputs")
    return seeds


def _feedback_geometry(img: pe.PeImage, target: str) -> tuple[int, int, int]:
    sec = img.section_by_name(rewrite.FEEDBACK)
    if sec is None or bytes(sec.data[:8]) != rewrite.FEEDBACK_MAGIC:
        raise _input(f"{target} carries no feedback section; instrument it first")
    hdr = rewrite.feedback_header(bytes(sec.data[:rewrite.HEADER_SIZE]))
    return hdr["map_size"].bit_length() - 1, hdr["extra_size"], hdr["flags"]


def _backend(args: argparse.Namespace):
    img = _load_pe(args.target)
    if args.backend == "sandbox":
        return SandboxBackend(img, fuel=args.fuel)
    log2, extra, flags = _feedback_geometry(img, args.target)
    target = str(Path(args.target).resolve())
    if args.backend == "spawn":
        return SpawnBackend(runner_argv(target, args.fuel), map_size_log2=log2, extra_size=extra,
                            timeout=args.timeout)
    region = CoverageRegion(log2, extra, flags)
    try:
        return AgentBackend(process_agent(target, fuel=args.fuel, shm_name=region.name), region,
                            timeout=args.timeout)
    except BaseException:
        region.close()
        raise


def cmd_fuzz(args: argparse.Namespace) -> int:
    if args.execs is not None and args.execs <= 0 or args.secs is not None and args.secs <= 0:
        raise _usage("the budget must be positive")
    seeds = _seeds(args.in_dir)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise _input(f"cannot create {out}: {exc.strerror or exc}") from None
    try:
        backend = _backend(args)
    except (BackendDown, OSError) as exc:
        raise CliError(EXIT_RUNTIME, f"backend failed to start: {exc}") from None
    try:
        report = fuzz_loop(seeds, backend, Budget(args.execs, args.secs), rng_seed=args.seed, out_dir=out)
    except (BackendDown, ProtocolError) as exc:
        raise CliError(EXIT_RUNTIME, f"backend failed: {exc}") from None
    finally:
        backend.close()
    s = report.summary()
    print(f"{s['execs']} execs, {s['paths']} paths, {s['unique_crashes']} unique crashes "
          f"in {s['unique_buckets']} buckets -> {out}")
    if report.aborted:
        print(f"campaign aborted: {report.aborted}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


# ---------------------------------------------------------------- entry

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="peinstr", description="Static PE instrumentation for coverage-guided fuzzing.")
    sub = ap.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="extract basic blocks into a block-list JSON file")
    a.add_argument("target")
    a.add_argument("--symbols", help="symbol file: JSON {name: rva} or '<rva> <name>' lines")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_analyze)

    i = sub.add_parser("instrument", help="rewrite a PE with coverage feedback")
    i.add_argument("target")
    i.add_argument("--out", required=True)
    i.add_argument("--report", help="report JSON path (default: <out>.report.json)")
    i.add_argument("--mode", choices=["jump", "inline"], default="jump")
    i.add_argument("--threads", choices=["single", "multi"], default="single")
    i.add_argument("--select", choices=["memory", "all"], default="all")
    i.add_argument("--include", action="append", default=[], metavar="A-B", help="keep RVA range [A, B)")
    i.add_argument("--exclude", action="append", default=[], metavar="A-B", help="drop RVA range [A, B)")
    i.add_argument("--match", action="append", default=[], metavar="RE", help="keep functions matching RE")
    i.add_argument("--skip", action="append", default=[], metavar="RE", help="drop functions matching RE")
    i.add_argument("--linear", action="store_true", help="also record a per-block hit bitset")
    i.add_argument("--map-size", type=int, default=16, metavar="LOG2")
    i.add_argument("--blocks", help="block-list JSON to use instead of analyzing")
    i.set_defaults(func=cmd_instrument)

    f = sub.add_parser("fuzz", help="run a coverage-guided campaign")
    f.add_argument("target")
    f.add_argument("--backend", choices=["spawn", "agent", "sandbox"], default="sandbox")
    f.add_argument("--in", dest="in_dir", required=True)
    f.add_argument("--out", required=True)
    budget = f.add_mutually_exclusive_group(required=True)
    budget.add_argument("--execs", type=int)
    budget.add_argument("--secs", type=float)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--fuel", type=int, default=5000, help="instruction budget per input in the sandbox")
    f.add_argument("--timeout", type=float, default=1.0, help="seconds before an input counts as a hang")
    f.set_defaults(func=cmd_fuzz)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"peinstr: {exc}", file=sys.stderr)
        return exc.code
    except KeyboardInterrupt:
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
