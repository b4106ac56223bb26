"""Control-flow integrity toolkit for a simulated TrustZone-M microcontroller."""

from .asm import AsmError, assemble, assemble_file
from .image import FirmwareImage, Manifest, ManifestError, Region, Security, Span, parse_manifest
from .machine import FaultKind, Machine, Status

__all__ = [
    "AsmError",
    "FaultKind",
    "FirmwareImage",
    "Machine",
    "Manifest",
    "ManifestError",
    "Region",
    "Security",
    "Span",
    "Status",
    "assemble",
    "assemble_file",
    "parse_manifest",
]
