"""Deterministic ARMv8-M-like core with TrustZone-style memory attribution.

Cycle model (relative numbers only):

* 1 cycle per 16-bit instruction, 2 for ``bl``
* +2 pipeline refill on every taken branch
* +1 per register moved by push/pop/ldr/str
* 12 cycles for exception entry, 12 for exception return

Exception return values (ERVs) come in two flavours.  Bit 6 set means the
interrupted context ran in Non-secure state (0xFFFFFFF1 return to Handler,
0xFFFFFFF9 return to Thread); bit 6 clear means its frame sits on the
Secure main stack (0xFFFFFFB1 / 0xFFFFFFB9).  Process-stack returns are not
modelled and fault.
"""

from __future__ import annotations

import enum
import logging
from collections import Counter
from dataclasses import dataclass
from typing import Callable, TextIO

from . import isa
from .image import FirmwareImage, Region, Security
from .isa import LR, PC, SP, Instruction, Op

log = logging.getLogger(__name__)

MASK32 = 0xFFFFFFFF

EXC_RESET = 1
EXC_HARDFAULT = 3
EXC_SVC = 11
IRQ_BASE = 16

EXC_ENTRY_CYCLES = 12
EXC_RETURN_CYCLES = 12
BRANCH_REFILL = 2

ERV_HANDLER = 0xFFFFFFF1
ERV_THREAD = 0xFFFFFFF9
ERV_NS_BIT = 0x40
_VALID_ERV_LOW = {0xF1, 0xF9, 0xB1, 0xB9}

FRAME_WORDS = 8
FRAME_SIZE = 32
FRAME_LR = 0x14
FRAME_PC = 0x18
FRAME_XPSR = 0x1C
XPSR_THUMB = 1 << 24


def is_exc_return(value: int) -> bool:
    return value > 0xF0000000


def make_erv(to_thread: bool, secure_frame: bool) -> int:
    value = ERV_THREAD if to_thread else ERV_HANDLER
    if secure_frame:
        value &= ~ERV_NS_BIT
    return value


class Access(enum.Enum):
    FETCH = "fetch"
    LOAD = "load"
    STORE = "store"


class FaultKind(enum.Enum):
    MEM = "MemFault"
    SECURE = "SecureFault"
    USAGE = "UsageFault"
    HARD = "HardFault"


class Mode(enum.Enum):
    THREAD = "thread"
    HANDLER = "handler"


class Status(enum.Enum):
    RUNNING = "running"
    HALTED = "halted"
    FAULT = "fault"
    VIOLATION = "violation"
    BUDGET = "budget"


@dataclass(frozen=True)
class FaultRecord:
    kind: FaultKind
    cycle: int
    pc: int
    detail: str
    addr: int | None = None

    def __str__(self) -> str:
        where = f" addr={self.addr:#010x}" if self.addr is not None else ""
        return f"{self.kind.value} at pc={self.pc:#010x} cycle={self.cycle}{where}: {self.detail}"


class MachineFault(Exception):
    def __init__(self, kind: FaultKind, detail: str, addr: int | None = None):
        super().__init__(detail)
        self.kind = kind
        self.detail = detail
        self.addr = addr


@dataclass(frozen=True)
class ActiveException:
    number: int
    frame_addr: int
    secure_frame: bool


def check_access(security: Security, region_map, addr: int, kind: Access, size: int = 1,
                 at_sg: bool = False) -> FaultKind | None:
    """Classify an access; returns None when allowed, the fault kind otherwise.

    ``region_map`` is anything with a ``region_at(addr)`` method.  ``at_sg``
    tells whether the halfword being fetched is an ``sg`` instruction, the
    only legal Non-secure entry into NSC memory.
    """
    region = region_map.region_at(addr)
    if region is None or addr + size > region.end:
        return FaultKind.MEM
    if security is Security.NONSECURE:
        if region.security is Security.SECURE:
            return FaultKind.SECURE if kind is Access.FETCH else FaultKind.MEM
        if region.security is Security.NSC:
            if kind is not Access.FETCH:
                return FaultKind.MEM
            if not at_sg:
                return FaultKind.SECURE
    elif kind is Access.FETCH and region.security is Security.NONSECURE:
        return FaultKind.SECURE
    if kind is Access.FETCH and not region.executable:
        return FaultKind.MEM
    if kind is Access.LOAD and not region.readable:
        return FaultKind.MEM
    if kind is Access.STORE and not region.writable:
        return FaultKind.MEM
    return None


class Memory:
    """Backing store: one bytearray per region, initialised from the image."""

    def __init__(self, regions: list[Region], image: bytes):
        self.regions = sorted(regions, key=lambda r: r.base)
        self.banks: dict[str, bytearray] = {}
        for r in self.regions:
            bank = bytearray(r.size)
            if r.base < len(image):
                chunk = image[r.base:r.end]
                bank[:len(chunk)] = chunk
            self.banks[r.name] = bank
        self._last = self.regions[0] if self.regions else None

    def region_at(self, addr: int) -> Region | None:
        last = self._last
        if last is not None and last.base <= addr < last.base + last.size:
            return last
        for r in self.regions:
            if r.base <= addr < r.base + r.size:
                self._last = r
                return r
        return None

    def read(self, addr: int, size: int) -> int:
        r = self.region_at(addr)
        if r is None or addr + size > r.end:
            raise MachineFault(FaultKind.MEM, "access to unmapped memory", addr)
        off = addr - r.base
        return int.from_bytes(self.banks[r.name][off:off + size], "little")

    def read_bytes(self, addr: int, size: int) -> bytes:
        r = self.region_at(addr)
        if r is None or addr + size > r.end:
            raise MachineFault(FaultKind.MEM, "access to unmapped memory", addr)
        off = addr - r.base
        return bytes(self.banks[r.name][off:off + size])

    def write(self, addr: int, size: int, value: int) -> None:
        r = self.region_at(addr)
        if r is None or addr + size > r.end:
            raise MachineFault(FaultKind.MEM, "access to unmapped memory", addr)
        off = addr - r.base
        self.banks[r.name][off:off + size] = (value & ((1 << (8 * size)) - 1)).to_bytes(size, "little")

    def snapshot(self, security: Security | None = None) -> dict[str, bytes]:
        return {r.name: bytes(self.banks[r.name]) for r in self.regions
                if security is None or r.security is security}


class Machine:
    """Single-core simulator.  ``step`` is the only mutator of guest state."""

    def __init__(self, image: FirmwareImage, trace: TextIO | None = None):
        manifest = image.manifest
        manifest.validate()
        if manifest.vectors is None:
            raise ValueError("image has no vector table")
        self.manifest = manifest
        self.memory = Memory(manifest.regions, image.data)
        self.vector_base, self.vector_count = manifest.vectors
        port = manifest.region_named("port")
        self.port = port
        self.regs = [0] * 16
        self.sp_main_ns = 0
        self.sp_process_ns = 0
        self.sp_main_s = 0
        self.ipsr = 0
        self.security = Security.NONSECURE
        self.flag_n = False
        self.flag_z = False
        self.cycles = 0
        self.status = Status.RUNNING
        self.fault: FaultRecord | None = None
        self.violation = None
        self.pending: set[int] = set()
        self.active: list[ActiveException] = []
        self.output: list[int] = []
        self.exception_counts: Counter[int] = Counter()
        self.svc_handler: Callable[["Machine"], None] | None = None
        self.step_hook: Callable[["Machine", int, Instruction], None] | None = None
        self.exception_hook: Callable[[str, "Machine", ActiveException], None] | None = None
        self.trace = trace
        self._decoded: dict[tuple[int, Security], Instruction] = {}
        self._exec = {
            Op.MOV_IMM: self._mov, Op.ADD_IMM: self._add, Op.SUB_IMM: self._sub,
            Op.CMP_IMM: self._cmp, Op.LDR_IMM: self._ldr, Op.STR_IMM: self._str,
            Op.PUSH: self._push, Op.POP: self._pop, Op.B_COND: self._bcond, Op.B: self._b,
            Op.BL: self._bl, Op.BLX: self._blx, Op.BX: self._bx, Op.BXNS: self._bxns,
            Op.SG: self._sg, Op.SVC: self._svc, Op.NOP: self._nop, Op.HALT: self._halt,
            Op.UNDEFINED: self._undefined,
        }
        self.reset()

    # -- architectural state -------------------------------------------------

    def reset(self) -> None:
        self.sp_main_ns = self.vector(0)
        for r in self.manifest.regions:
            if r.security is Security.SECURE and r.writable:
                self.sp_main_s = r.end
                break
        entry = self.manifest.entry
        self.pc = (entry if entry is not None else self.vector(EXC_RESET)) & ~1

    def vector(self, number: int) -> int:
        if not 0 <= number < self.vector_count:
            raise MachineFault(FaultKind.HARD, f"exception {number} has no vector entry")
        return self.memory.read(self.vector_base + 4 * number, 4)

    @property
    def pc(self) -> int:
        return self.regs[PC]

    @pc.setter
    def pc(self, value: int) -> None:
        self.regs[PC] = value & MASK32

    @property
    def lr(self) -> int:
        return self.regs[LR]

    @lr.setter
    def lr(self, value: int) -> None:
        self.regs[LR] = value & MASK32

    @property
    def mode(self) -> Mode:
        return Mode.HANDLER if self.ipsr else Mode.THREAD

    @property
    def sp(self) -> int:
        # spsel is fixed to Main, and Handler mode always uses Main
        if self.security is Security.SECURE:
            return self.sp_main_s
        return self.sp_main_ns

    @sp.setter
    def sp(self, value: int) -> None:
        if self.security is Security.SECURE:
            self.sp_main_s = value & MASK32
        else:
            self.sp_main_ns = value & MASK32

    def reg(self, index: int) -> int:
        if index == SP:
            return self.sp
        if index == PC:
            return (self.pc + 4) & MASK32
        return self.regs[index]

    def set_reg(self, index: int, value: int) -> None:
        if index == SP:
            self.sp = value
        else:
            self.regs[index] = value & MASK32

    @property
    def xpsr(self) -> int:
        return int(self.flag_n) << 31 | int(self.flag_z) << 30 | XPSR_THUMB | self.ipsr

    @property
    def running(self) -> bool:
        return self.status is Status.RUNNING

    # -- memory ----------------------------------------------------------------

    def _check(self, addr: int, kind: Access, size: int, security: Security | None = None) -> None:
        sec = self.security if security is None else security
        fault = check_access(sec, self.memory, addr, kind, size)
        if fault is not None:
            raise MachineFault(fault, f"{sec.value} {kind.value} of {size} bytes denied", addr)

    def load(self, addr: int, size: int = 4, security: Security | None = None) -> int:
        addr &= MASK32
        self._check(addr, Access.LOAD, size, security)
        return self.memory.read(addr, size)

    def store(self, addr: int, value: int, size: int = 4, security: Security | None = None) -> None:
        addr &= MASK32
        self._check(addr, Access.STORE, size, security)
        self.memory.write(addr, size, value)
        if self.port is not None and addr in self.port:
            self.output.append(value & ((1 << (8 * size)) - 1))

    def fetch(self, addr: int) -> Instruction:
        key = (addr, self.security)
        ins = self._decoded.get(key)
        if ins is not None:
            return ins
        if addr & 1:
            raise MachineFault(FaultKind.USAGE, "misaligned instruction fetch", addr)
        region = self.memory.region_at(addr)
        if region is None:
            raise MachineFault(FaultKind.MEM, "fetch from unmapped memory", addr)
        hw = self.memory.read(addr, 2)
        fault = check_access(self.security, self.memory, addr, Access.FETCH, 2,
                             at_sg=hw == isa.SG_HALFWORD)
        if fault is not None:
            raise MachineFault(fault, f"{self.security.value} fetch denied", addr)
        nxt = None
        if isa.is_bl_prefix(hw):
            if check_access(self.security, self.memory, addr + 2, Access.FETCH, 2) is not None:
                raise MachineFault(FaultKind.USAGE, "truncated 32-bit instruction", addr)
            nxt = self.memory.read(addr + 2, 2)
        ins = isa.decode_halfword(hw, nxt)
        # code regions are never writable, so decoded instructions stay valid
        self._decoded[key] = ins
        return ins

    # -- execution ---------------------------------------------------------------

    def raise_irq(self, irq: int) -> None:
        self.pending.add(irq)

    def step(self) -> None:
        if self.status is not Status.RUNNING:
            return
        pc = self.pc
        try:
            if self.pending and self._take_pending():
                return
            pc = self.pc
            ins = self.fetch(pc)
            if self.trace is not None:
                self.trace.write(self.trace_line(pc, ins) + "\n")
            if self.step_hook is not None:
                self.step_hook(self, pc, ins)
            self._exec[ins.op](pc, ins)
        except MachineFault as exc:
            self.fail(exc, pc=pc)

    def fail(self, exc: MachineFault, pc: int | None = None, detail: str | None = None) -> None:
        """Halt with a typed fault record."""
        pc = self.pc if pc is None else pc
        self.fault = FaultRecord(exc.kind, self.cycles, pc, detail or exc.detail, exc.addr)
        self.status = Status.FAULT
        log.debug("fault: %s", self.fault)

    def run(self, max_cycles: int = 1_000_000, before_step: Callable[["Machine"], None] | None = None) -> Status:
        while self.status is Status.RUNNING:
            if self.cycles >= max_cycles:
                self.status = Status.BUDGET
                break
            if before_step is not None:
                before_step(self)
                if self.status is not Status.RUNNING:
                    break
            self.step()
        return self.status

    def trace_line(self, pc: int, ins: Instruction) -> str:
        sec = "S " if self.security is Security.SECURE else "NS"
        mode = "H" if self.ipsr else "T"
        return f"{self.cycles:>8} {sec} {mode} {pc:08x}  {isa.disassemble(ins, pc)}"

    def halt_violation(self, record) -> None:
        self.violation = record
        self.status = Status.VIOLATION

    def _take_pending(self) -> bool:
        if self.security is not Security.NONSECURE:
            return False
        irq = min(self.pending)
        number = IRQ_BASE + irq
        if self.ipsr and not (self.ipsr >= IRQ_BASE and number < self.ipsr):
            return False
        if any(a.number == number for a in self.active):
            return False
        self.pending.discard(irq)
        self.raise_exception(number)
        return True

    def _flags(self, result: int) -> None:
        self.flag_n = bool(result >> 31 & 1)
        self.flag_z = result == 0

    def _mov(self, pc, ins):
        self.regs[ins.rd] = ins.imm
        self._flags(ins.imm)
        self.pc = pc + 2
        self.cycles += 1

    def _add(self, pc, ins):
        res = (self.regs[ins.rd] + ins.imm) & MASK32
        self.regs[ins.rd] = res
        self._flags(res)
        self.pc = pc + 2
        self.cycles += 1

    def _sub(self, pc, ins):
        res = (self.regs[ins.rd] - ins.imm) & MASK32
        self.regs[ins.rd] = res
        self._flags(res)
        self.pc = pc + 2
        self.cycles += 1

    def _cmp(self, pc, ins):
        self._flags((self.regs[ins.rd] - ins.imm) & MASK32)
        self.pc = pc + 2
        self.cycles += 1

    def _ldr(self, pc, ins):
        addr = (self.regs[ins.rn] + ins.imm) & MASK32
        if addr & 3:
            raise MachineFault(FaultKind.USAGE, "unaligned word load", addr)
        self.regs[ins.rd] = self.load(addr)
        self.pc = pc + 2
        self.cycles += 2

    def _str(self, pc, ins):
        addr = (self.regs[ins.rn] + ins.imm) & MASK32
        if addr & 3:
            raise MachineFault(FaultKind.USAGE, "unaligned word store", addr)
        self.store(addr, self.regs[ins.rd])
        self.pc = pc + 2
        self.cycles += 2

    def _push(self, pc, ins):
        values = [self.regs[r] for r in ins.regs]
        if ins.extra:
            values.append(self.regs[LR])
        base = (self.sp - 4 * len(values)) & MASK32
        for i, v in enumerate(values):
            self.store(base + 4 * i, v)
        self.sp = base
        self.pc = pc + 2
        self.cycles += 1 + len(values)

    def _pop(self, pc, ins):
        addr = self.sp
        for r in ins.regs:
            self.regs[r] = self.load(addr)
            addr += 4
        self.cycles += 1 + len(ins.regs)
        if not ins.extra:
            self.sp = addr
            self.pc = pc + 2
            return
        target = self.load(addr)
        self.sp = addr + 4
        self.cycles += 1
        self._branch_to(target)

    def _branch_to(self, target: int) -> None:
        """Write ``target`` to pc the way pop/bx do, honouring ERVs."""
        if is_exc_return(target):
            if self.mode is not Mode.HANDLER:
                raise MachineFault(FaultKind.HARD, f"exception return value {target:#010x} outside Handler mode")
            self.exception_return(target)
            return
        self.pc = target & ~1
        self.cycles += BRANCH_REFILL

    def _bcond(self, pc, ins):
        c = ins.cond
        taken = (self.flag_z if c == 0 else not self.flag_z if c == 1 else
                 self.flag_n if c == 4 else not self.flag_n)
        self.cycles += 1
        if taken:
            self.pc = ins.target(pc)
            self.cycles += BRANCH_REFILL
        else:
            self.pc = pc + 2

    def _b(self, pc, ins):
        self.pc = ins.target(pc)
        self.cycles += 1 + BRANCH_REFILL

    def _bl(self, pc, ins):
        self.regs[LR] = (pc + 4) | 1
        self.pc = ins.target(pc)
        self.cycles += 2 + BRANCH_REFILL

    def _blx(self, pc, ins):
        target = self.reg(ins.rm)
        self.regs[LR] = (pc + 2) | 1
        self.pc = target & ~1
        self.cycles += 1 + BRANCH_REFILL

    def _bx(self, pc, ins):
        target = self.reg(ins.rm)
        self.cycles += 1
        self._branch_to(target)

    def _bxns(self, pc, ins):
        if self.security is not Security.SECURE:
            raise MachineFault(FaultKind.USAGE, "bxns executed in Non-secure state")
        target = self.reg(ins.rm)
        self.security = Security.NONSECURE
        self.pc = target & ~1
        self.cycles += 1 + BRANCH_REFILL

    def _sg(self, pc, ins):
        region = self.memory.region_at(pc)
        if self.security is Security.NONSECURE and region is not None and region.security is Security.NSC:
            self.security = Security.SECURE
        self.pc = pc + 2
        self.cycles += 1

    def _svc(self, pc, ins):
        self.cycles += 1
        self.raise_exception(EXC_SVC, return_pc=pc + 2)

    def _nop(self, pc, ins):
        self.pc = pc + 2
        self.cycles += 1

    def _halt(self, pc, ins):
        self.cycles += 1
        self.status = Status.HALTED

    def _undefined(self, pc, ins):
        raise MachineFault(FaultKind.USAGE, f"undefined instruction {ins.imm:#06x}", pc)

    # -- exceptions ----------------------------------------------------------------

    def raise_exception(self, number: int, return_pc: int | None = None) -> None:
        """Hardware exception entry: stack the context frame and vector."""
        handler = self.vector(number)
        target = self.memory.region_at(handler & ~1)
        if handler == 0 or target is None or not target.executable or target.security is not Security.NONSECURE:
            raise MachineFault(FaultKind.HARD, f"vector {number} -> {handler:#010x} is not executable code")
        if return_pc is None:
            return_pc = self.pc
        secure_frame = self.security is Security.SECURE
        frame = (self.sp - FRAME_SIZE) & MASK32
        words = [self.regs[0], self.regs[1], self.regs[2], self.regs[3], self.regs[12],
                 self.regs[LR], return_pc & MASK32, self.xpsr]
        for i, w in enumerate(words):
            self.store(frame + 4 * i, w)
        self.sp = frame
        self.regs[LR] = make_erv(self.ipsr == 0, secure_frame)
        entry = ActiveException(number, frame, secure_frame)
        self.active.append(entry)
        self.ipsr = number
        self.security = Security.NONSECURE
        self.pc = handler & ~1
        self.cycles += EXC_ENTRY_CYCLES
        self.exception_counts[number] += 1
        if self.exception_hook is not None:
            self.exception_hook("entry", self, entry)
        if number == EXC_SVC and self.svc_handler is not None:
            self.svc_handler(self)

    def exception_return(self, erv: int) -> None:
        if self.mode is not Mode.HANDLER or not self.active:
            raise MachineFault(FaultKind.HARD, "exception return outside Handler mode")
        if not is_exc_return(erv) or erv >> 8 != 0xFFFFFF or erv & 0xFF not in _VALID_ERV_LOW:
            raise MachineFault(FaultKind.HARD, f"malformed exception return value {erv:#010x}")
        current = self.active[-1]
        if current.number != self.ipsr:
            raise MachineFault(FaultKind.HARD, "ipsr does not match the exception being returned from")
        to_thread = bool(erv & 0x8)
        if to_thread != (len(self.active) == 1):
            raise MachineFault(FaultKind.HARD, f"exception return value {erv:#010x} names the wrong mode")
        secure_frame = not erv & ERV_NS_BIT
        if secure_frame != current.secure_frame:
            raise MachineFault(FaultKind.HARD, f"exception return value {erv:#010x} names the wrong stack")
        sec = Security.SECURE if secure_frame else Security.NONSECURE
        frame = self.sp_main_s if secure_frame else self.sp_main_ns
        words = [self.load(frame + 4 * i, 4, sec) for i in range(FRAME_WORDS)]
        pc = words[6]
        if is_exc_return(pc):
            raise MachineFault(FaultKind.HARD, f"stacked pc {pc:#010x} is an exception return value")
        expected = self.active[-2].number if len(self.active) > 1 else 0
        if words[7] & 0x1FF != expected:
            raise MachineFault(FaultKind.HARD, "stacked ipsr does not match the preempted context")
        for i, r in enumerate((0, 1, 2, 3, 12, LR)):
            self.regs[r] = words[i]
        self.flag_n = bool(words[7] >> 31 & 1)
        self.flag_z = bool(words[7] >> 30 & 1)
        if secure_frame:
            self.sp_main_s = (frame + FRAME_SIZE) & MASK32
        else:
            self.sp_main_ns = (frame + FRAME_SIZE) & MASK32
        self.active.pop()
        self.ipsr = expected
        self.security = sec
        self.pc = pc & ~1
        self.cycles += EXC_RETURN_CYCLES
        if self.exception_hook is not None:
            self.exception_hook("return", self, current)

    # -- secure gateway --------------------------------------------------------------

    def secure_gateway(self, veneer: int, service: Callable[[], object]):
        """Call a Secure service through the NSC veneer at ``veneer``.

        The veneer must be ``sg`` followed by ``bxns lr``; the service runs
        with the core in Secure state so it can reach Secure memory.
        """
        if self.security is not Security.NONSECURE:
            raise MachineFault(FaultKind.SECURE, "secure gateway entered from Secure state", veneer)
        entry = self.fetch(veneer)
        if entry.op is not Op.SG:
            raise MachineFault(FaultKind.SECURE, "NSC entry point is not an sg instruction", veneer)
        self.security = Security.SECURE
        self.cycles += 1 + BRANCH_REFILL
        try:
            result = service()
            back = self.fetch(veneer + 2)
            if back.op is not Op.BXNS:
                raise MachineFault(FaultKind.SECURE, "veneer does not return with bxns", veneer + 2)
        finally:
            self.security = Security.NONSECURE
        self.cycles += 1 + BRANCH_REFILL
        return result
