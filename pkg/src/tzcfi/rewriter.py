"""Layout-preserving instrumentation of the main program.

Every call, indirect branch and effective return in the ``main`` ranges is
overwritten in place by an ``svc`` whose comment names a dispatch
descriptor; 32-bit ``bl`` sites keep their second halfword as ``0xB000``
padding.  Nothing is moved.  New code and data go into ``reserve`` spans
the manifest already sets aside:

=============  ===============================================  ==========
reserve        contents                                         region
=============  ===============================================  ==========
``tables``     branch, call-target, dispatch, exctramp tables   r, ns
``trampolines`` return and exception trampolines                x, ns
``monitor``    the svc vector target (an ``udf`` stub)          x, ns
``veneers``    ``sg; bxns lr`` gateway veneers (push, pop)      x, nsc
``shadow``     shadow stack storage (not written here)          rw, s
=============  ===============================================  ==========

Table wire formats (little-endian):

* branch: ``u32 site, u32 destination`` sorted by site
* calltargets: ``u32 entry`` sorted
* dispatch: ``u8 comment, u8 class, u16 operand, u32 trampoline``
* exctramp: ``u32 trampoline svc site, u32 original handler`` sorted by site
"""

from __future__ import annotations

import enum
import struct
from collections import Counter
from dataclasses import dataclass, field, replace

from . import isa
from .image import FirmwareImage, Manifest, ManifestError, Security, Span
from .isa import BranchClass, Instruction, Op

MONITOR_STUB = 0xDE00
MAX_COMMENTS = 255
SVC_DENSITY_LIMIT = 0.02


class RewriteError(ValueError):
    pass


class LayoutError(RewriteError):
    pass


class CapacityError(RewriteError):
    pass


class DispatchClass(enum.IntEnum):
    DIRECT_CALL = 1
    INDIRECT_CALL = 2
    RETURN_BX_LR = 3
    RETURN_POP = 4
    EXC_ENTRY = 5


_FROM_BRANCH = {
    BranchClass.DIRECT_CALL: DispatchClass.DIRECT_CALL,
    BranchClass.INDIRECT_CALL: DispatchClass.INDIRECT_CALL,
    BranchClass.RETURN_BX_LR: DispatchClass.RETURN_BX_LR,
    BranchClass.RETURN_POP: DispatchClass.RETURN_POP,
}


@dataclass(frozen=True)
class Descriptor:
    """What an svc comment stands for.

    ``register``/``link`` describe an indirect call (``blx`` links, a plain
    ``bx rN`` does not); ``regs`` is the reglist of a pop return.
    """

    comment: int
    cls: DispatchClass
    register: int = 0
    link: bool = False
    regs: tuple[int, ...] = ()
    trampoline: int = 0

    @property
    def operand(self) -> int:
        if self.cls is DispatchClass.INDIRECT_CALL:
            return self.register | int(self.link) << 8
        if self.cls is DispatchClass.RETURN_POP:
            return sum(1 << r for r in self.regs)
        return 0

    def pack(self) -> bytes:
        return struct.pack("<BBHI", self.comment, int(self.cls), self.operand, self.trampoline)

    @classmethod
    def unpack(cls, raw: bytes) -> "Descriptor":
        comment, kind, operand, tramp = struct.unpack("<BBHI", raw)
        kind = DispatchClass(kind)
        if kind is DispatchClass.INDIRECT_CALL:
            return cls(comment, kind, register=operand & 0xFF, link=bool(operand >> 8), trampoline=tramp)
        if kind is DispatchClass.RETURN_POP:
            regs = tuple(i for i in range(8) if operand >> i & 1)
            return cls(comment, kind, regs=regs, trampoline=tramp)
        return cls(comment, kind, trampoline=tramp)

    def original(self) -> Instruction | None:
        """The return instruction a trampoline for this descriptor holds."""
        if self.cls is DispatchClass.RETURN_BX_LR:
            return isa.bx(isa.LR)
        if self.cls is DispatchClass.RETURN_POP:
            return isa.pop(*self.regs, pc=True)
        return None


@dataclass(frozen=True)
class Site:
    address: int
    instruction: Instruction
    comment: int


@dataclass
class RewriteReport:
    decoded: int = 0
    sites: int = 0
    per_class: Counter = field(default_factory=Counter)
    table_bytes: dict[str, int] = field(default_factory=dict)
    trampolines: int = 0

    @property
    def ratio(self) -> float:
        return self.sites / self.decoded if self.decoded else 0.0

    def lines(self) -> list[str]:
        out = [f"decoded {self.decoded}", f"rewritten {self.sites}", f"ratio {self.ratio:.6f}"]
        out += [f"class {c.name.lower()} {self.per_class[c]}" for c in DispatchClass if c in self.per_class]
        out += [f"bytes {name} {size}" for name, size in self.table_bytes.items()]
        out.append(f"trampolines {self.trampolines}")
        return out


@dataclass
class InstrumentResult:
    image: FirmwareImage
    branch_table: list[tuple[int, int]]
    call_targets: list[int]
    dispatch: dict[int, Descriptor]
    exc_trampolines: list[tuple[int, int]]
    sites: list[Site]
    report: RewriteReport


# -- scanning ----------------------------------------------------------------

def code_segments(manifest: Manifest) -> list[Span]:
    """Main ranges with literal pools cut out."""
    out = []
    for span in sorted(manifest.main, key=lambda s: s.base):
        cuts = sorted((p for p in manifest.pools if p.overlaps(span)), key=lambda p: p.base)
        pos = span.base
        for p in cuts:
            if p.base > pos:
                out.append(Span(pos, p.base - pos))
            pos = max(pos, p.end)
        if pos < span.end:
            out.append(Span(pos, span.end - pos))
    return out


def scan_main(image: FirmwareImage) -> list[tuple[int, Instruction]]:
    """Linear sweep over the main program; undefined bytes are an error."""
    out = []
    for seg in code_segments(image.manifest):
        try:
            code = image.read(seg.base, seg.size)
        except ManifestError as exc:
            raise LayoutError(str(exc)) from None
        try:
            for addr, ins in isa.iter_decode(code, seg.base):
                if ins.op is Op.UNDEFINED:
                    raise RewriteError(f"undefined encoding {ins.imm:#06x} at {addr:#x} inside main code")
                out.append((addr, ins))
        except isa.DecodeError as exc:
            raise RewriteError(f"main range at {seg.base:#x}: {exc}") from None
    return out


def _check_not_instrumented(image: FirmwareImage, decoded: list[tuple[int, Instruction]]) -> None:
    if image.manifest.instrumented:
        raise RewriteError("image is already instrumented (manifest lists tables)")
    svcs = [a for a, ins in decoded if ins.op is Op.SVC]
    if not svcs:
        return
    padded = any(image.read(a + 2, 2) == isa.encode(isa.NOP) for a in svcs if a + 4 <= len(image.data))
    if padded or len(svcs) / len(decoded) >= SVC_DENSITY_LIMIT:
        raise RewriteError("image looks already instrumented (svc dispatch sites in main code)")
    raise RewriteError(f"main code uses svc at {svcs[0]:#x}; the svc vector is reserved for the monitor")


def build_call_target_table(manifest: Manifest) -> list[int]:
    """Entry addresses of main-program subroutines, sorted and unique."""
    targets = set()
    for name, addr in manifest.symbols.items():
        region = manifest.region_at(addr)
        if region is None or not region.executable:
            raise ManifestError(f"symbol {name} at {addr:#x} is outside executable memory")
        if manifest.in_main(addr) and not any(addr in p for p in manifest.pools):
            targets.add(addr)
    return sorted(targets)


# -- layout ----------------------------------------------------------------------

class _Allocator:
    def __init__(self, name: str, span: Span):
        self.name = name
        self.span = span
        self.pos = span.base

    def take(self, size: int, align: int = 2) -> int:
        self.pos = -(-self.pos // align) * align
        if self.pos + size > self.span.end:
            raise LayoutError(f"reserve {self.name} ({self.span.size:#x} bytes) is too small")
        addr = self.pos
        self.pos += size
        return addr


def _reserve(manifest: Manifest, name: str, *, security: Security, perms: str, in_image: int | None) -> Span:
    span = manifest.reserves.get(name)
    if span is None:
        raise LayoutError(f"manifest has no 'reserve {name}' span")
    region = manifest.region_at(span.base)
    if region is None or span.end > region.end:
        raise LayoutError(f"reserve {name} is not inside a region")
    if region.security is not security:
        raise LayoutError(f"reserve {name} must be in {security.value} memory, found {region.security.value}")
    if not set(perms) <= set(region.perms) or ("w" not in perms and region.writable):
        raise LayoutError(f"reserve {name} needs a region with permissions {perms}")
    if in_image is not None and span.end > in_image:
        raise LayoutError(f"reserve {name} lies outside the image bytes")
    return span


def synthesize_trampolines(dispatch: dict[int, Descriptor], alloc: _Allocator,
                           out: bytearray) -> dict[int, Descriptor]:
    """One trampoline per return form, holding only the original instruction."""
    updated = dict(dispatch)
    for comment, desc in sorted(dispatch.items()):
        ins = desc.original()
        if ins is None:
            continue
        addr = alloc.take(2)
        out[addr:addr + 2] = isa.encode(ins)
        updated[comment] = replace(desc, trampoline=addr)
    return updated


def rewrite_vector_table(image: FirmwareImage, out: bytearray, alloc: _Allocator, exc_comment: int,
                         monitor: int) -> list[tuple[int, int]]:
    """Point every handler vector at an exception trampoline ``svc; b handler``."""
    manifest = image.manifest
    if manifest.vectors is None:
        raise ManifestError("manifest has no vector table")
    base, count = manifest.vectors
    by_handler: dict[int, int] = {}
    for number in range(count):
        entry = image.word(base + 4 * number)
        if number in (0, 1) or entry == 0:
            continue
        if number == 11:
            continue
        handler = entry & ~1
        region = manifest.region_at(handler)
        if region is None or not region.executable or region.security is not Security.NONSECURE:
            raise ManifestError(f"vector {number} -> {entry:#x} is not a valid code address")
        tramp = by_handler.get(handler)
        if tramp is None:
            tramp = alloc.take(4)
            jump = handler - (tramp + 2 + 4)
            try:
                code = isa.encode(isa.svc(exc_comment)) + isa.encode(isa.b(jump))
            except isa.EncodeError:
                raise LayoutError(f"handler {handler:#x} is out of branch range of trampoline {tramp:#x}") from None
            out[tramp:tramp + 4] = code
            by_handler[handler] = tramp
        struct.pack_into("<I", out, base + 4 * number, tramp | (entry & 1))
    if count > 11:
        old = image.word(base + 44)
        struct.pack_into("<I", out, base + 44, monitor | (old & 1 if old else 1))
    return sorted((t, h) for h, t in by_handler.items())


def _descriptor_key(ins: Instruction):
    cls = isa.classify(ins)
    if cls is BranchClass.DIRECT_CALL:
        return (DispatchClass.DIRECT_CALL,)
    if cls is BranchClass.INDIRECT_CALL:
        return (DispatchClass.INDIRECT_CALL, ins.rm, ins.op is Op.BLX)
    if cls is BranchClass.RETURN_BX_LR:
        return (DispatchClass.RETURN_BX_LR,)
    return (DispatchClass.RETURN_POP, ins.regs)


def _make_descriptor(comment: int, key) -> Descriptor:
    cls = key[0]
    if cls is DispatchClass.INDIRECT_CALL:
        return Descriptor(comment, cls, register=key[1], link=key[2])
    if cls is DispatchClass.RETURN_POP:
        return Descriptor(comment, cls, regs=key[1])
    return Descriptor(comment, cls)


# -- entry point ---------------------------------------------------------------------

def instrument_image(image: FirmwareImage) -> InstrumentResult:
    manifest = image.manifest
    manifest.validate()
    decoded = scan_main(image)
    _check_not_instrumented(image, decoded)
    out = bytearray(image.data)
    report = RewriteReport(decoded=len(decoded))

    comments: dict[tuple, int] = {}
    sites: list[Site] = []
    branch: list[tuple[int, int]] = []
    for addr, ins in decoded:
        cls = isa.classify(ins)
        if cls not in isa.MEDIATED:
            continue
        key = _descriptor_key(ins)
        if key not in comments:
            if len(comments) >= MAX_COMMENTS:
                raise CapacityError(f"more than {MAX_COMMENTS} dispatch classes; svc has 8 comment bits")
            comments[key] = len(comments) + 1
        comment = comments[key]
        sites.append(Site(addr, ins, comment))
        report.per_class[key[0]] += 1
        if cls is BranchClass.DIRECT_CALL:
            dest = ins.target(addr)
            if not manifest.in_main(dest):
                raise RewriteError(f"bl at {addr:#x} targets {dest:#x} outside the main program")
            branch.append((addr, dest))
            out[addr:addr + 4] = isa.encode(isa.svc(comment)) + isa.encode(isa.NOP)
        else:
            out[addr:addr + 2] = isa.encode(isa.svc(comment))
    report.sites = len(sites)

    vector_words = image.vector_entries()
    needs_exc = any(w for i, w in enumerate(vector_words) if i not in (0, 1, 11))
    call_targets = build_call_target_table(manifest)
    dispatch = {c: _make_descriptor(c, key) for key, c in comments.items()}
    exc_comment = 0
    if needs_exc:
        exc_comment = len(comments) + 1
        dispatch[exc_comment] = Descriptor(exc_comment, DispatchClass.EXC_ENTRY)
    if len(dispatch) > MAX_COMMENTS:
        raise CapacityError(f"{len(dispatch)} dispatch classes exceed the {MAX_COMMENTS} svc comments")

    exc_tramps: list[tuple[int, int]] = []
    new_manifest = replace(manifest, tables=dict(manifest.tables))
    if sites or needs_exc:
        size = len(image.data)
        tables_span = _reserve(manifest, "tables", security=Security.NONSECURE, perms="r", in_image=size)
        tramp_span = _reserve(manifest, "trampolines", security=Security.NONSECURE, perms="rx", in_image=size)
        monitor_span = _reserve(manifest, "monitor", security=Security.NONSECURE, perms="rx", in_image=size)
        veneer_span = _reserve(manifest, "veneers", security=Security.NSC, perms="rx", in_image=size)
        shadow_span = _reserve(manifest, "shadow", security=Security.SECURE, perms="rw", in_image=None)

        monitor = _Allocator("monitor", monitor_span).take(2)
        struct.pack_into("<H", out, monitor, MONITOR_STUB)
        veneers = _Allocator("veneers", veneer_span)
        veneer_push, veneer_pop = veneers.take(4), veneers.take(4)
        for v in (veneer_push, veneer_pop):
            out[v:v + 4] = isa.encode(isa.SG) + isa.encode(isa.bxns(isa.LR))

        tramp_alloc = _Allocator("trampolines", tramp_span)
        dispatch = synthesize_trampolines(dispatch, tramp_alloc, out)
        report.trampolines = sum(1 for d in dispatch.values() if d.trampoline)
        if needs_exc:
            exc_tramps = rewrite_vector_table(image, out, tramp_alloc, exc_comment, monitor)
            report.trampolines += len(exc_tramps)
        elif manifest.vectors is not None and manifest.vectors[1] > 11:
            struct.pack_into("<I", out, manifest.vectors[0] + 44, monitor | 1)

        blobs = {
            "branch": b"".join(struct.pack("<II", s, d) for s, d in branch),
            "calltargets": b"".join(struct.pack("<I", t) for t in call_targets),
            "dispatch": b"".join(d.pack() for _, d in sorted(dispatch.items())),
            "exctramp": b"".join(struct.pack("<II", s, h) for s, h in exc_tramps),
        }
        table_alloc = _Allocator("tables", tables_span)
        for name, blob in blobs.items():
            addr = table_alloc.take(len(blob), align=4)
            out[addr:addr + len(blob)] = blob
            new_manifest.tables[name] = Span(addr, len(blob))
        new_manifest.tables["veneer_push"] = Span(veneer_push, 4)
        new_manifest.tables["veneer_pop"] = Span(veneer_pop, 4)
        new_manifest.tables["shadow"] = shadow_span
        new_manifest.tables["monitor"] = Span(monitor, 2)
        new_manifest.tables["trampolines"] = Span(tramp_span.base, tramp_alloc.pos - tramp_span.base)
        report.table_bytes = {name: len(blob) for name, blob in blobs.items()}
    else:
        for name in ("branch", "calltargets", "dispatch", "exctramp"):
            new_manifest.tables[name] = Span(0, 0)
            report.table_bytes[name] = 0

    assert len(out) == len(image.data)
    return InstrumentResult(
        image=FirmwareImage(bytes(out), new_manifest),
        branch_table=branch,
        call_targets=call_targets,
        dispatch=dispatch,
        exc_trampolines=exc_tramps,
        sites=sites,
        report=report,
    )
