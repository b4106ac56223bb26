"""Firmware images and their line-based manifests.

An image is a flat byte string loaded at address 0; every region of the
memory map that extends past the end of the image is zero-filled.  The
manifest describes the memory map and the pieces of the image the rewriter
and the simulator care about::

    region <name> <hex-base> <hex-size> <perms:rwx> <sec:ns|s|nsc>
    entry <hex>
    sym <name> <hex>
    vectors <hex> <count>
    bootstrap <hex-base> <hex-size>
    main <hex-base> <hex-size>
    pool <hex-base> <hex-size>
    reserve <name> <hex-base> <hex-size>
    table <name> <hex-base> <hex-size>

Blank lines and ``#`` comments are ignored.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from pathlib import Path


class ManifestError(ValueError):
    pass


class Security(enum.Enum):
    NONSECURE = "ns"
    SECURE = "s"
    NSC = "nsc"


@dataclass(frozen=True)
class Region:
    name: str
    base: int
    size: int
    perms: str
    security: Security

    @property
    def end(self) -> int:
        return self.base + self.size

    def __contains__(self, addr: int) -> bool:
        return self.base <= addr < self.base + self.size

    @property
    def readable(self) -> bool:
        return "r" in self.perms

    @property
    def writable(self) -> bool:
        return "w" in self.perms

    @property
    def executable(self) -> bool:
        return "x" in self.perms


@dataclass(frozen=True)
class Span:
    base: int
    size: int

    @property
    def end(self) -> int:
        return self.base + self.size

    def __contains__(self, addr: int) -> bool:
        return self.base <= addr < self.base + self.size

    def overlaps(self, other: "Span") -> bool:
        return self.base < other.end and other.base < self.end


@dataclass
class Manifest:
    regions: list[Region] = field(default_factory=list)
    entry: int | None = None
    symbols: dict[str, int] = field(default_factory=dict)
    vectors: tuple[int, int] | None = None
    bootstrap: list[Span] = field(default_factory=list)
    main: list[Span] = field(default_factory=list)
    pools: list[Span] = field(default_factory=list)
    reserves: dict[str, Span] = field(default_factory=dict)
    tables: dict[str, Span] = field(default_factory=dict)

    def region_at(self, addr: int) -> Region | None:
        for region in self.regions:
            if addr in region:
                return region
        return None

    def region_named(self, name: str) -> Region | None:
        for region in self.regions:
            if region.name == name:
                return region
        return None

    def in_main(self, addr: int) -> bool:
        return any(addr in s for s in self.main)

    def in_bootstrap(self, addr: int) -> bool:
        return any(addr in s for s in self.bootstrap)

    @property
    def instrumented(self) -> bool:
        return bool(self.tables)

    def validate(self) -> None:
        regions = sorted(self.regions, key=lambda r: r.base)
        for a, nxt in zip(regions, regions[1:]):
            if a.end > nxt.base:
                raise ManifestError(f"regions {a.name} and {nxt.name} overlap")
        for r in regions:
            if r.writable and r.executable:
                raise ManifestError(f"region {r.name} is both writable and executable")
            if r.size <= 0:
                raise ManifestError(f"region {r.name} has no size")
        for name, addr in self.symbols.items():
            region = self.region_at(addr)
            if region is None or not region.executable:
                raise ManifestError(f"symbol {name} at {addr:#x} is outside executable memory")
        for kind, spans in (("bootstrap", self.bootstrap), ("main", self.main), ("pool", self.pools)):
            for span in spans:
                region = self.region_at(span.base)
                if region is None or not region.executable or span.end > region.end:
                    raise ManifestError(f"{kind} range {span.base:#x}+{span.size:#x} is not inside one executable region")
        for s in self.bootstrap:
            for m in self.main:
                if s.overlaps(m):
                    raise ManifestError(f"bootstrap range {s.base:#x} overlaps main range {m.base:#x}")
        for name, span in self.reserves.items():
            region = self.region_at(span.base)
            if region is None or span.end > region.end:
                raise ManifestError(f"reserve {name} is not inside one region")
            for m in self.main + self.bootstrap:
                if span.overlaps(m):
                    raise ManifestError(f"reserve {name} overlaps program code")


def _int(tok: str, lineno: int) -> int:
    try:
        return int(tok, 16)
    except ValueError:
        raise ManifestError(f"line {lineno}: bad hex number {tok!r}") from None


def parse_manifest(text: str) -> Manifest:
    m = Manifest()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        kind, args = tok[0], tok[1:]
        arity = {"region": 5, "entry": 1, "sym": 2, "vectors": 2, "bootstrap": 2, "main": 2,
                 "pool": 2, "reserve": 3, "table": 3}
        if kind not in arity:
            raise ManifestError(f"line {lineno}: unknown directive {kind!r}")
        if len(args) != arity[kind]:
            raise ManifestError(f"line {lineno}: {kind} takes {arity[kind]} arguments")
        if kind == "region":
            name, base, size, perms, sec = args
            if perms == "-":
                perms = ""
            if set(perms) - set("rwx"):
                raise ManifestError(f"line {lineno}: bad permissions {perms!r}")
            try:
                security = Security(sec)
            except ValueError:
                raise ManifestError(f"line {lineno}: bad security attribute {sec!r}") from None
            m.regions.append(Region(name, _int(base, lineno), _int(size, lineno), perms, security))
        elif kind == "entry":
            m.entry = _int(args[0], lineno)
        elif kind == "sym":
            if args[0] in m.symbols:
                raise ManifestError(f"line {lineno}: duplicate symbol {args[0]}")
            m.symbols[args[0]] = _int(args[1], lineno)
        elif kind == "vectors":
            m.vectors = (_int(args[0], lineno), int(args[1], 0))
        elif kind in ("bootstrap", "main", "pool"):
            span = Span(_int(args[0], lineno), _int(args[1], lineno))
            {"bootstrap": m.bootstrap, "main": m.main, "pool": m.pools}[kind].append(span)
        elif kind == "reserve":
            m.reserves[args[0]] = Span(_int(args[1], lineno), _int(args[2], lineno))
        else:
            m.tables[args[0]] = Span(_int(args[1], lineno), _int(args[2], lineno))
    return m


def format_manifest(m: Manifest) -> str:
    out = []
    for r in m.regions:
        out.append(f"region {r.name} {r.base:#010x} {r.size:#x} {r.perms or '-'} {r.security.value}")
    if m.entry is not None:
        out.append(f"entry {m.entry:#010x}")
    if m.vectors is not None:
        out.append(f"vectors {m.vectors[0]:#010x} {m.vectors[1]}")
    for kind, spans in (("bootstrap", m.bootstrap), ("main", m.main), ("pool", m.pools)):
        for s in spans:
            out.append(f"{kind} {s.base:#010x} {s.size:#x}")
    for name, s in m.reserves.items():
        out.append(f"reserve {name} {s.base:#010x} {s.size:#x}")
    for name, addr in m.symbols.items():
        out.append(f"sym {name} {addr:#010x}")
    for name, s in m.tables.items():
        out.append(f"table {name} {s.base:#010x} {s.size:#x}")
    return "\n".join(out) + "\n"


@dataclass
class FirmwareImage:
    data: bytes
    manifest: Manifest

    def read(self, addr: int, size: int) -> bytes:
        if addr < 0 or addr + size > len(self.data):
            raise ManifestError(f"range {addr:#x}+{size:#x} is outside the image")
        return self.data[addr:addr + size]

    def word(self, addr: int) -> int:
        return int.from_bytes(self.read(addr, 4), "little")

    def vector_entries(self) -> list[int]:
        if self.manifest.vectors is None:
            return []
        base, count = self.manifest.vectors
        return [self.word(base + 4 * i) for i in range(count)]

    def with_data(self, data: bytes) -> "FirmwareImage":
        return replace(self, data=bytes(data))

    @classmethod
    def load(cls, image_path: str | Path, manifest_path: str | Path | None = None) -> "FirmwareImage":
        image_path = Path(image_path)
        if manifest_path is None:
            manifest_path = image_path.with_suffix(".manifest")
        manifest = parse_manifest(Path(manifest_path).read_text())
        return cls(image_path.read_bytes(), manifest)

    def save(self, image_path: str | Path, manifest_path: str | Path | None = None) -> None:
        image_path = Path(image_path)
        if manifest_path is None:
            manifest_path = image_path.with_suffix(".manifest")
        image_path.write_bytes(self.data)
        Path(manifest_path).write_text(format_manifest(self.manifest))
