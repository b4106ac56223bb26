"""Command-line front end.

Exit codes: 0 completed, 10 cfi-violation, 11 fault, 12 cycle budget
exhausted, 2 bad input (assembly, manifest, attack script), 3 the image
cannot be instrumented (layout, capacity, already instrumented).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .asm import AsmError, assemble_file
from .attack import AttackError
from .harness import DEFAULT_BUDGET, BenchError, bench, execute, fixtures_dir, format_bench, format_bench_sidecar
from .image import FirmwareImage, ManifestError
from .rewriter import RewriteError, instrument_image

EXIT_INPUT = 2
EXIT_REWRITE = 3


def _load(path: str, manifest: str | None) -> FirmwareImage:
    p = Path(path)
    if p.suffix == ".s":
        return assemble_file(p)
    return FirmwareImage.load(p, manifest)


def _script(value: str | None) -> str | None:
    if value is None:
        return None
    p = Path(value)
    return p.read_text() if p.is_file() else value


def cmd_assemble(args) -> int:
    image = assemble_file(args.source)
    out = Path(args.output or Path(args.source).with_suffix(".img"))
    image.save(out)
    print(f"wrote {out} ({len(image.data)} bytes) and {out.with_suffix('.manifest')}")
    return 0


def cmd_instrument(args) -> int:
    image = _load(args.image, args.manifest)
    result = instrument_image(image)
    out = Path(args.output)
    result.image.save(out)
    for line in result.report.lines():
        print(line)
    print(f"wrote {out} and {out.with_suffix('.manifest')}")
    return 0


def cmd_run(args) -> int:
    image = _load(args.image, args.manifest)
    if args.instrument:
        image = instrument_image(image).image
    script = "\n".join(filter(None, (_script(args.attack), _script(args.irq))))
    trace = None
    if args.trace is not None:
        trace = sys.stdout if args.trace == "-" else open(args.trace, "w")
    try:
        session = execute(image, script or None, budget=args.budget, trace=trace,
                          fast_path=not args.no_fast_path, capacity=args.capacity)
    finally:
        if trace is not None and trace is not sys.stdout:
            trace.close()
    lines = session.report.lines()
    print("\n".join(lines))
    if args.report:
        Path(args.report).write_text("\n".join(lines) + "\n")
    return session.report.exit_code


def cmd_bench(args) -> int:
    rows = bench(args.suite or fixtures_dir() / "bench", budget=args.budget)
    print(format_bench(rows))
    if args.sidecar:
        Path(args.sidecar).write_text(format_bench_sidecar(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tzcfi", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("assemble", help="assemble a source file into an image + manifest")
    p.add_argument("source")
    p.add_argument("-o", "--output", help="image path (default: source with .img suffix)")
    p.set_defaults(func=cmd_assemble)

    p = sub.add_parser("instrument", help="rewrite an image and emit the sidecar manifest")
    p.add_argument("image", help="image file, or a .s source to assemble first")
    p.add_argument("-m", "--manifest", help="manifest path (default: image with .manifest suffix)")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_instrument)

    p = sub.add_parser("run", help="run an image on the simulator")
    p.add_argument("image", help="image file, or a .s source to assemble first")
    p.add_argument("-m", "--manifest")
    p.add_argument("--instrument", action="store_true", help="instrument before running")
    p.add_argument("--attack", help="attack script, inline or a file path")
    p.add_argument("--irq", help="interrupt schedule, inline or a file path")
    p.add_argument("--trace", nargs="?", const="-", help="per-step trace to FILE (default stdout)")
    p.add_argument("--budget", type=int, default=DEFAULT_BUDGET, help="cycle budget")
    p.add_argument("--capacity", type=int, default=256, help="shadow stack capacity")
    p.add_argument("--no-fast-path", action="store_true", help="route every bx lr return through its trampoline")
    p.add_argument("--report", help="write the report sidecar to this path")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="paired instrumented/uninstrumented runs over a suite")
    p.add_argument("suite", nargs="?", help="directory of .s programs (default: bundled benchmark suite)")
    p.add_argument("--budget", type=int, default=DEFAULT_BUDGET)
    p.add_argument("--sidecar", help="write machine-readable rows to this path")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (AsmError, ManifestError, AttackError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (RewriteError, BenchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_REWRITE


if __name__ == "__main__":
    sys.exit(main())
