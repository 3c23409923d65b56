"""Deterministic mutation stages followed by seeded havoc and splice."""

from __future__ import annotations

import random
import struct
from typing import Iterator, Optional, Sequence

ARITH_MAX = 35
HAVOC_ROUNDS = 256
HAVOC_STACK_LOG2 = 5
MAX_INPUT = 4096

INTERESTING_8 = (-128, -1, 0, 1, 16, 32, 64, 100, 127)
INTERESTING_16 = INTERESTING_8 + (-32768, -129, 128, 255, 256, 512, 1000, 1024, 4096, 32767)
INTERESTING_32 = INTERESTING_16 + (-2147483648, -100663046, -32769, 32768, 65535, 65536, 100663045, 2147483647)

_FMT = {1: "B", 2: "H", 4: "I"}


def _flip_bits(data: bytes, width: int) -> Iterator[bytes]:
    nbits = len(data) * 8
    for pos in range(nbits - width + 1):
        buf = bytearray(data)
        for b in range(pos, pos + width):
            buf[b >> 3] ^= 0x80 >> (b & 7)
        yield bytes(buf)


def _flip_bytes(data: bytes, width: int) -> Iterator[bytes]:
    for pos in range(len(data) - width + 1):
        buf = bytearray(data)
        for i in range(pos, pos + width):
            buf[i] ^= 0xFF
        yield bytes(buf)


def _arith(data: bytes, width: int) -> Iterator[bytes]:
    mask = (1 << (8 * width)) - 1
    orders = ("<",) if width == 1 else ("<", ">")
    for pos in range(len(data) - width + 1):
        for order in orders:
            fmt = order + _FMT[width]
            (orig,) = struct.unpack_from(fmt, data, pos)
            for delta in range(1, ARITH_MAX + 1):
                for v in ((orig + delta) & mask, (orig - delta) & mask):
                    buf = bytearray(data)
                    struct.pack_into(fmt, buf, pos, v)
                    yield bytes(buf)


def _interesting(data: bytes, width: int) -> Iterator[bytes]:
    values = {1: INTERESTING_8, 2: INTERESTING_16, 4: INTERESTING_32}[width]
    mask = (1 << (8 * width)) - 1
    orders = ("<",) if width == 1 else ("<", ">")
    for pos in range(len(data) - width + 1):
        for order in orders:
            fmt = order + _FMT[width]
            for v in values:
                buf = bytearray(data)
                struct.pack_into(fmt, buf, pos, v & mask)
                out = bytes(buf)
                if out != data:
                    yield out


def deterministic(data: bytes) -> Iterator[tuple[str, bytes]]:
    """The walking stages, in their fixed order."""
    for w in (1, 2, 4):
        for out in _flip_bits(data, w):
            yield f"flip{w}", out
    for w in (1, 2, 4):
        for out in _flip_bytes(data, w):
            yield f"flip{w * 8}", out
    for w in (1, 2, 4):
        for out in _arith(data, w):
            yield f"arith{w * 8}", out
    for w in (1, 2, 4):
        for out in _interesting(data, w):
            yield f"interest{w * 8}", out


def havoc_one(data: bytes, rng: random.Random, max_len: int = MAX_INPUT,
              pool: Sequence[bytes] = ()) -> bytes:
    """A stack of 2..32 random edits."""
    buf = bytearray(data)
    for _ in range(1 << rng.randint(1, HAVOC_STACK_LOG2)):
        op = rng.randrange(12)
        n = len(buf)
        if op == 0 and n:
            bit = rng.randrange(n * 8)
            buf[bit >> 3] ^= 0x80 >> (bit & 7)
        elif op == 1 and n:
            buf[rng.randrange(n)] = rng.choice(INTERESTING_8) & 0xFF
        elif op in (2, 3) and n >= 2:
            pos = rng.randrange(n - 1)
            order = rng.choice("<>")
            if op == 2:
                struct.pack_into(order + "H", buf, pos, rng.choice(INTERESTING_16) & 0xFFFF)
            else:
                (v,) = struct.unpack_from(order + "H", buf, pos)
                struct.pack_into(order + "H", buf, pos, (v + rng.choice((-1, 1)) * rng.randint(1, ARITH_MAX)) & 0xFFFF)
        elif op == 4 and n >= 4:
            pos = rng.randrange(n - 3)
            struct.pack_into(rng.choice("<>") + "I", buf, pos, rng.choice(INTERESTING_32) & 0xFFFFFFFF)
        elif op == 5 and n:
            pos = rng.randrange(n)
            buf[pos] = (buf[pos] + rng.choice((-1, 1)) * rng.randint(1, ARITH_MAX)) & 0xFF
        elif op == 6 and n:
            buf[rng.randrange(n)] ^= rng.randint(1, 255)
        elif op == 7 and n > 1:
            pos = rng.randrange(n)
            del buf[pos:pos + rng.randint(1, max(1, min(16, n - pos)))]
        elif op == 8 and n and n < max_len:
            pos = rng.randrange(n + 1)
            src = rng.randrange(n)
            chunk = buf[src:src + rng.randint(1, min(16, n - src))]
            buf[pos:pos] = chunk
        elif op == 9 and n < max_len:
            pos = rng.randrange(n + 1)
            buf[pos:pos] = bytes([rng.randrange(256)]) * rng.randint(1, 16)
        elif op == 10 and n >= 2:
            a, b = rng.randrange(n), rng.randrange(n)
            k = rng.randint(1, min(8, n - max(a, b)))
            buf[b:b + k] = buf[a:a + k]
        elif op == 11 and n and pool:
            other = rng.choice(pool)
            if other:
                a = rng.randrange(len(other))
                k = rng.randint(1, min(16, len(other) - a))
                pos = rng.randrange(n)
                buf[pos:pos + k] = other[a:a + k]
    if not buf:
        buf = bytearray([rng.randrange(256)])
    return bytes(buf[:max_len])


def splice(a: bytes, b: bytes, rng: random.Random) -> Optional[bytes]:
    """Head of ``a`` joined to the tail of ``b`` at a point where they differ."""
    n = min(len(a), len(b))
    diffs = [i for i in range(n) if a[i] != b[i]]
    if len(diffs) < 2:
        return None
    lo, hi = diffs[0], diffs[-1]
    cut = rng.randint(lo, hi)
    return a[:cut] + b[cut:]


def mutate(data: bytes, seed: int, *, deterministic_stages: bool = True, havoc_rounds: int = HAVOC_ROUNDS,
           pool: Sequence[bytes] = (), max_len: int = MAX_INPUT) -> Iterator[tuple[str, bytes]]:
    """(stage name, candidate) pairs; reproducible from (data, seed, pool)."""
    if not data:
        raise ValueError("cannot mutate an empty input")
    if deterministic_stages:
        yield from deterministic(data)
    rng = random.Random(seed)
    for _ in range(havoc_rounds):
        yield "havoc", havoc_one(data, rng, max_len, pool)
    others = [p for p in pool if p != data]
    for _ in range(min(len(others), havoc_rounds // 16)):
        joined = splice(data, rng.choice(others), rng)
        if joined is not None:
            yield "splice", havoc_one(joined, rng, max_len, pool)
