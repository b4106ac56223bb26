"""Run pipelines: load or assemble, instrument, execute, report, benchmark."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import TextIO

from . import isa
from .asm import assemble_file
from .attack import AttackEngine, AttackStep, parse_attack
from .image import FirmwareImage, Security
from .isa import Op
from .machine import Machine, Status
from .monitor import BranchMonitor, Violation, attach
from .rewriter import Descriptor, DispatchClass, code_segments, instrument_image

DEFAULT_BUDGET = 2_000_000


class Outcome(enum.Enum):
    COMPLETED = "completed"
    VIOLATION = "cfi-violation"
    FAULT = "fault"
    BUDGET = "budget"


EXIT_CODES = {Outcome.COMPLETED: 0, Outcome.VIOLATION: 10, Outcome.FAULT: 11, Outcome.BUDGET: 12}

_OUTCOME = {Status.HALTED: Outcome.COMPLETED, Status.VIOLATION: Outcome.VIOLATION,
            Status.FAULT: Outcome.FAULT, Status.BUDGET: Outcome.BUDGET}


@dataclass
class RunReport:
    outcome: Outcome
    cycles: int
    traps: int
    svc_entries: int
    ratio: float
    output: list[int]
    table_bytes: dict[str, int]
    shadow_max_depth: int
    instrumented: bool
    violation: Violation | None = None
    fault: str | None = None
    ns_data: dict[str, bytes] = field(default_factory=dict, repr=False)

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.outcome]

    def lines(self) -> list[str]:
        out = [
            f"outcome {self.outcome.value}",
            f"instrumented {'yes' if self.instrumented else 'no'}",
            f"cycles {self.cycles}",
            f"traps {self.traps}",
            f"svc_entries {self.svc_entries}",
            f"ratio {self.ratio:.6f}",
            f"shadow_max_depth {self.shadow_max_depth}",
            "output " + (" ".join(f"{v:#x}" for v in self.output) or "-"),
        ]
        out += [f"table_bytes {name} {size}" for name, size in self.table_bytes.items()]
        if self.violation is not None:
            out.append(self.violation.format())
        if self.fault is not None:
            out.append(f"fault {self.fault}")
        return out


@dataclass
class Session:
    machine: Machine
    monitor: BranchMonitor | None
    report: RunReport


def static_ratio(image: FirmwareImage) -> float:
    """Rewritten sites over decoded main-program instructions.

    For an instrumented image a ``svc; 0xB000`` pair counts as the single
    ``bl`` it replaced, so both images of a pair report the same ratio.
    """
    m = image.manifest
    dispatch: dict[int, Descriptor] = {}
    span = m.tables.get("dispatch")
    if span is not None and span.size:
        raw = image.read(span.base, span.size)
        dispatch = {d.comment: d for d in (Descriptor.unpack(raw[i:i + 8]) for i in range(0, len(raw), 8))}
    decoded = sites = 0
    for seg in code_segments(m):
        items = list(isa.iter_decode(image.read(seg.base, seg.size), seg.base))
        skip = set()
        for addr, ins in items:
            if addr in skip:
                continue
            decoded += 1
            if ins.op is Op.SVC and ins.imm in dispatch:
                sites += 1
                if dispatch[ins.imm].cls is DispatchClass.DIRECT_CALL:
                    skip.add(addr + 2)
            elif not dispatch and isa.classify(ins) in isa.MEDIATED:
                sites += 1
    return sites / decoded if decoded else 0.0


def ns_data_view(machine: Machine) -> dict[str, bytes]:
    """Writable Non-secure memory, minus the output port and the dead stack below sp."""
    view = {}
    stack_top = machine.vector(0)
    for r in machine.manifest.regions:
        if r.security is not Security.NONSECURE or not r.writable or r is machine.port:
            continue
        data = bytearray(machine.memory.banks[r.name])
        if r.base < stack_top <= r.end:
            dead = max(0, min(machine.sp_main_ns, r.end) - r.base)
            data[:dead] = bytes(dead)
        view[r.name] = bytes(data)
    return view


def execute(image: FirmwareImage, attack: str | list[AttackStep] | None = None, *,
            budget: int = DEFAULT_BUDGET, trace: TextIO | None = None, fast_path: bool = True,
            capacity: int = 256, record_events: bool = True) -> Session:
    machine = Machine(image, trace=trace)
    monitor = attach(machine, capacity=capacity, fast_path=fast_path, record_events=record_events)
    hook = None
    if attack:
        steps = parse_attack(attack) if isinstance(attack, str) else attack
        hook = AttackEngine(steps, image.manifest.symbols)
    status = machine.run(budget, before_step=hook)
    report = RunReport(
        outcome=_OUTCOME[status],
        cycles=machine.cycles,
        traps=monitor.traps if monitor else 0,
        svc_entries=machine.exception_counts[11],
        ratio=static_ratio(image),
        output=list(machine.output),
        table_bytes={name: s.size for name, s in image.manifest.tables.items()
                     if name in ("branch", "calltargets", "dispatch", "exctramp")},
        shadow_max_depth=monitor.shadow.max_depth if monitor else 0,
        instrumented=monitor is not None,
        violation=machine.violation,
        fault=str(machine.fault) if machine.fault else None,
        ns_data=ns_data_view(machine),
    )
    return Session(machine, monitor, report)


def run_image(image: FirmwareImage, attack: str | list[AttackStep] | None = None, **kwargs) -> RunReport:
    return execute(image, attack, **kwargs).report


# -- benchmarking -----------------------------------------------------------------

class BenchError(RuntimeError):
    pass


@dataclass(frozen=True)
class BenchRow:
    program: str
    traps: int
    ratio: float
    cycles_uninstr: int
    cycles_instr: int

    @property
    def overhead(self) -> float:
        """Percent extra cycles of the instrumented run."""
        return 100.0 * (self.cycles_instr - self.cycles_uninstr) / self.cycles_uninstr

    @property
    def per_trap(self) -> float | None:
        if not self.traps:
            return None
        return (self.cycles_instr - self.cycles_uninstr) / self.traps


def bench_program(name: str, image: FirmwareImage, irq: str | None = None,
                  budget: int = DEFAULT_BUDGET) -> BenchRow:
    instrumented = instrument_image(image).image
    plain = run_image(image, irq, budget=budget, record_events=False)
    inst = run_image(instrumented, irq, budget=budget, record_events=False)
    for label, rep in (("uninstrumented", plain), ("instrumented", inst)):
        if rep.outcome is not Outcome.COMPLETED:
            raise BenchError(f"{name}: {label} run ended with {rep.outcome.value}; benchmark invalid")
    return BenchRow(name, inst.traps, inst.ratio, plain.cycles, inst.cycles)


def bench(suite_dir: str | Path, budget: int = DEFAULT_BUDGET) -> list[BenchRow]:
    """Benchmark every ``*.s`` program in ``suite_dir`` (with ``<name>.irq`` if present)."""
    rows = []
    for src in sorted(Path(suite_dir).glob("*.s")):
        irq_path = src.with_suffix(".irq")
        irq = irq_path.read_text() if irq_path.exists() else None
        rows.append(bench_program(src.stem, assemble_file(src), irq, budget))
    return rows


def format_bench(rows: list[BenchRow]) -> str:
    header = f"{'program':<12} {'traps':>7} {'ratio':>9} {'cycles-uninstr':>15} {'cycles-instr':>13} {'overhead%':>10}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(f"{r.program:<12} {r.traps:>7} {r.ratio:>9.5f} {r.cycles_uninstr:>15} "
                     f"{r.cycles_instr:>13} {r.overhead:>10.2f}")
    return "\n".join(lines)


def format_bench_sidecar(rows: list[BenchRow]) -> str:
    return "".join(f"bench {r.program} {r.traps} {r.ratio:.6f} {r.cycles_uninstr} {r.cycles_instr} "
                   f"{r.overhead:.4f}\n" for r in rows)


def fixtures_dir() -> Path:
    return Path(__file__).parent / "fixtures"


def load_fixture(name: str) -> FirmwareImage:
    return assemble_file(fixtures_dir() / f"{name}.s")

