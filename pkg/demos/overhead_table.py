"""Sandbox instruction-count overhead of full vs memory-selected instrumentation.

Runs each generated fixture in the sandbox, then its jump- and inline-mode
rewrites, and prints how many extra instructions the coverage stubs cost.

    python demos/overhead_table.py --fixtures 50
"""

import argparse

from peinstr import cfg, fixtures, pe, rewrite, sandbox, select
from peinstr.select import Mode


def steps(img: pe.PeImage) -> int:
    return sandbox.run(sandbox.load_image(img), 400_000).steps


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--fixtures", type=int, default=40)
    args = ap.parse_args()

    rows = []
    totals: dict[tuple[str, str], list[int]] = {}
    for fx in fixtures.corpus(args.fixtures):
        img = pe.parse(fx.data)
        blocks, insns = cfg.analyze(img)
        base = steps(img)
        for mode in (Mode.Jump, Mode.Inline):
            for sel in ("all", "memory"):
                spec = select.FilterSpec(memory_sensitive=sel == "memory")
                plan = select.make_plan(blocks, spec, insns=insns, imports=pe.imports(img), mode=mode)
                out, rep = rewrite.instrument(img, plan, analysis=(blocks, insns))
                n = steps(pe.parse(out.serialize()))
                t = totals.setdefault((mode.value, sel), [0, 0, 0])
                t[0] += n
                t[1] += base
                t[2] += rep.instrumented
        rows.append(fx.seed)

    print(f"{len(rows)} fixtures")
    print(f"{'mode':<8}{'select':<9}{'points':>8}{'overhead':>11}")
    for (mode, sel), (inst, orig, points) in sorted(totals.items()):
        print(f"{mode:<8}{sel:<9}{points:>8}{inst / orig - 1:>10.1%}")


if __name__ == "__main__":
    main()
