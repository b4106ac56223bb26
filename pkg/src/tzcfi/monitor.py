"""Branch monitor bound to the svc exception, plus the secure shadow stack.

The monitor runs host-side but touches the guest only the way guest code
could: it reads and edits the stacked context frame on the Non-secure main
stack, reads the read-only tables, and reaches the shadow stack in Secure
memory exclusively through the ``sg``/``bxns`` veneers.
"""

from __future__ import annotations

import bisect
import struct
from dataclasses import asdict, dataclass

from .image import Manifest, Span
from .machine import FRAME_LR, FRAME_PC, FRAME_SIZE, Machine, is_exc_return
from .rewriter import Descriptor, DispatchClass

DISPATCH_CYCLES = 16
PROBE_CYCLES = 2
SHADOW_OP_CYCLES = 4
DEFAULT_CAPACITY = 256

_FRAME_REG_OFFSET = {0: 0x00, 1: 0x04, 2: 0x08, 3: 0x0C, 12: 0x10, 14: 0x14}


class ShadowError(Exception):
    pass


@dataclass(frozen=True)
class Violation:
    cycle: int
    site: int
    cls: str
    expected: int | None
    observed: int | None
    verdict: str

    def as_dict(self) -> dict:
        return asdict(self)

    def format(self) -> str:
        def hx(v):
            return "-" if v is None else f"{v:#010x}"
        return (f"violation cycle={self.cycle} site={self.site:#010x} class={self.cls} "
                f"expected={hx(self.expected)} observed={hx(self.observed)} verdict={self.verdict}")


@dataclass(frozen=True)
class MonitorEvent:
    """One approved transfer: ``kind`` is call, icall, return or exc-entry."""

    kind: str
    site: int
    target: int
    value: int | None = None


@dataclass(frozen=True)
class MonitorConfig:
    branch: Span
    calltargets: Span
    dispatch: Span
    exctramp: Span
    veneer_push: int
    veneer_pop: int
    shadow: Span
    main: tuple[Span, ...]

    @classmethod
    def from_manifest(cls, m: Manifest) -> "MonitorConfig":
        need = ("branch", "calltargets", "dispatch", "exctramp", "veneer_push", "veneer_pop", "shadow")
        missing = [n for n in need if n not in m.tables]
        if missing:
            raise ValueError(f"image is not instrumented (missing tables: {', '.join(missing)})")
        for name in ("branch", "calltargets", "dispatch", "exctramp"):
            span = m.tables[name]
            region = m.region_at(span.base)
            if span.size and (region is None or region.writable):
                raise ValueError(f"table {name} is not in read-only memory")
        t = m.tables
        return cls(t["branch"], t["calltargets"], t["dispatch"], t["exctramp"],
                   t["veneer_push"].base, t["veneer_pop"].base, t["shadow"], tuple(m.main))


def btbl_lookup(records: list[tuple[int, int]], site: int) -> tuple[int | None, int]:
    """Binary search a site-sorted record list; returns (destination or None, probes)."""
    lo, hi, probes = 0, len(records) - 1, 0
    while lo <= hi:
        mid = (lo + hi) // 2
        probes += 1
        key, dest = records[mid]
        if key == site:
            return dest, probes
        if key < site:
            lo = mid + 1
        else:
            hi = mid - 1
    return None, probes


class ShadowStack:
    """Return-address stack in Secure memory: a depth word, then slots."""

    def __init__(self, machine: Machine, span: Span, veneer_push: int, veneer_pop: int,
                 capacity: int = DEFAULT_CAPACITY):
        self.machine = machine
        self.base = span.base
        self.capacity = min(capacity, span.size // 4 - 1)
        self.veneer_push = veneer_push
        self.veneer_pop = veneer_pop
        self.max_depth = 0

    def _service_push(self, value: int) -> None:
        m = self.machine
        depth = m.load(self.base)
        if depth >= self.capacity:
            raise ShadowError(f"shadow stack overflow at depth {depth}")
        m.store(self.base + 4 + 4 * depth, value)
        m.store(self.base, depth + 1)
        self.max_depth = max(self.max_depth, depth + 1)

    def _service_pop(self) -> int:
        m = self.machine
        depth = m.load(self.base)
        if depth == 0:
            raise ShadowError("shadow stack underflow")
        value = m.load(self.base + 4 * depth)
        m.store(self.base, depth - 1)
        return value

    def push(self, value: int) -> None:
        self.machine.cycles += SHADOW_OP_CYCLES
        self.machine.secure_gateway(self.veneer_push, lambda: self._service_push(value))

    def pop(self) -> int:
        self.machine.cycles += SHADOW_OP_CYCLES
        return self.machine.secure_gateway(self.veneer_pop, self._service_pop)

    @property
    def depth(self) -> int:
        return self.machine.memory.read(self.base, 4)

    def entries(self) -> list[int]:
        """Host-side view for reporting; bypasses the gateway."""
        mem = self.machine.memory
        return [mem.read(self.base + 4 + 4 * i, 4) for i in range(self.depth)]


class _Abort(Exception):
    def __init__(self, violation: Violation):
        self.violation = violation


class BranchMonitor:
    def __init__(self, machine: Machine, capacity: int = DEFAULT_CAPACITY, fast_path: bool = True,
                 record_events: bool = True):
        self.machine = machine
        self.config = MonitorConfig.from_manifest(machine.manifest)
        self.fast_path = fast_path
        self.record_events = record_events
        cfg = self.config
        mem = machine.memory

        def blob(span: Span) -> bytes:
            return mem.read_bytes(span.base, span.size) if span.size else b""

        self.branch = [tuple(r) for r in struct.iter_unpack("<II", blob(cfg.branch))]
        self.calltargets = [t for (t,) in struct.iter_unpack("<I", blob(cfg.calltargets))]
        self.exctramp = [tuple(r) for r in struct.iter_unpack("<II", blob(cfg.exctramp))]
        raw = blob(cfg.dispatch)
        self.dispatch: dict[int, Descriptor] = {}
        for i in range(0, len(raw), 8):
            d = Descriptor.unpack(raw[i:i + 8])
            self.dispatch[d.comment] = d
        self.shadow = ShadowStack(machine, cfg.shadow, cfg.veneer_push, cfg.veneer_pop, capacity)
        self.traps = 0
        self.events: list[MonitorEvent] = []
        machine.svc_handler = self.on_svc

    # -- helpers -------------------------------------------------------------------

    def _in_main(self, addr: int) -> bool:
        return any(addr in s for s in self.config.main)

    def _lookup(self, records, key) -> int | None:
        dest, probes = btbl_lookup(records, key)
        self.machine.cycles += PROBE_CYCLES * probes
        return dest

    def _is_call_target(self, addr: int) -> bool:
        i = bisect.bisect_left(self.calltargets, addr)
        probes = max(1, len(self.calltargets).bit_length())
        self.machine.cycles += PROBE_CYCLES * probes
        return i < len(self.calltargets) and self.calltargets[i] == addr

    def _violation(self, site: int, cls: str, expected, observed, verdict: str) -> _Abort:
        return _Abort(Violation(self.machine.cycles, site, cls, expected, observed, verdict))

    def _event(self, kind: str, site: int, target: int, value: int | None = None) -> None:
        if self.record_events:
            self.events.append(MonitorEvent(kind, site, target, value))

    def _shadow_push(self, value: int, site: int, cls: str) -> None:
        try:
            self.shadow.push(value)
        except ShadowError as exc:
            raise self._violation(site, cls, None, value, str(exc)) from None

    def _check_return(self, candidate: int, site: int, cls: str) -> None:
        try:
            expected = self.shadow.pop()
        except ShadowError as exc:
            raise self._violation(site, cls, None, candidate, str(exc)) from None
        if expected != candidate:
            raise self._violation(site, cls, expected, candidate, "return address mismatch")

    # -- svc entry ----------------------------------------------------------------------

    def on_svc(self, m: Machine) -> None:
        self.traps += 1
        m.cycles += DISPATCH_CYCLES
        frame = m.sp
        site = (m.load(frame + FRAME_PC) - 2) & 0xFFFFFFFF
        try:
            hw = m.load(site, 2)
            desc = self.dispatch.get(hw & 0xFF) if hw >> 8 == 0xDF else None
            if desc is None:
                raise self._violation(site, "unknown", None, hw, "unrecognised svc comment")
            if desc.cls is not DispatchClass.EXC_ENTRY and not self._in_main(site):
                raise self._violation(site, desc.cls.name.lower(), None, site, "svc outside the main program")
            handler = {
                DispatchClass.DIRECT_CALL: self._direct_call,
                DispatchClass.INDIRECT_CALL: self._indirect_call,
                DispatchClass.RETURN_BX_LR: self._return_bx_lr,
                DispatchClass.RETURN_POP: self._return_pop,
                DispatchClass.EXC_ENTRY: self._exception_entry,
            }[desc.cls]
            handler(m, frame, site, desc)
        except _Abort as abort:
            m.halt_violation(abort.violation)
            return
        m.exception_return(m.lr)

    def _direct_call(self, m: Machine, frame: int, site: int, desc: Descriptor) -> None:
        dest = self._lookup(self.branch, site)
        if dest is None:
            raise self._violation(site, "direct_call", None, site, "site missing from branch table")
        ret = (site + 4) | 1
        self._shadow_push(ret, site, "direct_call")
        m.store(frame + FRAME_LR, ret)
        m.store(frame + FRAME_PC, dest)
        self._event("call", site, dest, ret)

    def _indirect_call(self, m: Machine, frame: int, site: int, desc: Descriptor) -> None:
        reg = desc.register
        if reg in _FRAME_REG_OFFSET:
            value = m.load(frame + _FRAME_REG_OFFSET[reg])
        elif reg <= 11:
            value = m.regs[reg]
        else:
            raise self._violation(site, "indirect_call", None, reg, "unsupported branch register")
        target = value & ~1
        if not self._is_call_target(target):
            raise self._violation(site, "indirect_call", None, target, "target is not a call-table entry")
        if desc.link:
            ret = (site + 2) | 1
            self._shadow_push(ret, site, "indirect_call")
            m.store(frame + FRAME_LR, ret)
        m.store(frame + FRAME_PC, target)
        self._event("icall", site, target, (site + 2) | 1 if desc.link else None)

    def _exception_return_candidate(self, m: Machine, outer: int, site: int, cls: str) -> int:
        if len(m.active) < 2:
            raise self._violation(site, cls, None, None, "exception return value outside an exception handler")
        return m.load(outer + FRAME_PC)

    def _return_bx_lr(self, m: Machine, frame: int, site: int, desc: Descriptor) -> None:
        lr = m.load(frame + FRAME_LR)
        if is_exc_return(lr):
            candidate = self._exception_return_candidate(m, frame + FRAME_SIZE, site, "return_bx_lr")
            self._check_return(candidate, site, "return_bx_lr")
            m.store(frame + FRAME_PC, desc.trampoline)
            self._event("return", site, desc.trampoline, candidate)
            return
        self._check_return(lr, site, "return_bx_lr")
        resume = lr & ~1 if self.fast_path else desc.trampoline
        m.store(frame + FRAME_PC, resume)
        self._event("return", site, lr & ~1, lr)

    def _return_pop(self, m: Machine, frame: int, site: int, desc: Descriptor) -> None:
        n = len(desc.regs)
        slot = frame + FRAME_SIZE + 4 * n
        candidate = m.load(slot)
        if is_exc_return(candidate):
            candidate = self._exception_return_candidate(m, slot + 4, site, "return_pop")
            self._check_return(candidate, site, "return_pop")
        else:
            self._check_return(candidate, site, "return_pop")
        m.store(frame + FRAME_PC, desc.trampoline)
        self._event("return", site, desc.trampoline, candidate)

    def _exception_entry(self, m: Machine, frame: int, site: int, desc: Descriptor) -> None:
        handler = self._lookup(self.exctramp, site)
        if handler is None:
            raise self._violation(site, "exc_entry", None, site, "svc is not a registered exception trampoline")
        if len(m.active) < 2 or m.active[-1].secure_frame:
            raise self._violation(site, "exc_entry", None, site, "exception trampoline reached outside exception entry")
        outer = frame + FRAME_SIZE
        if outer != m.active[-2].frame_addr:
            raise self._violation(site, "exc_entry", m.active[-2].frame_addr, outer,
                                  "exception trampoline reached after the handler started")
        marker = m.load(outer + FRAME_PC)
        self._shadow_push(marker, site, "exc_entry")
        m.store(frame + FRAME_PC, site + 2)
        self._event("exc-entry", site, handler, marker)


def attach(machine: Machine, **kwargs) -> BranchMonitor | None:
    """Bind a monitor when the loaded image carries instrumentation tables."""
    span = machine.manifest.tables.get("dispatch")
    if span is None or span.size == 0:
        return None
    return BranchMonitor(machine, **kwargs)

