"""Tiny image builder shared by the unit tests (same memory map as the fixtures)."""

from tzcfi.asm import assemble

HEADER = """\
.region port   0x0000 0x0010 rw ns
.region data   0x0010 0x0ff0 rw ns
.region stack  0x1000 0x1000 rw ns
.region flash  0x2000 0x2000 rx ns
.region tables 0x4000 0x0800 r  ns
.region nsc    0x4800 0x0100 rx nsc
.region sflash 0x5000 0x0400 rx s
.region sram_s 0x6000 0x1000 rw s
.reserve monitor     0x2080 0x0010
.reserve trampolines 0x2090 0x0170
.reserve tables      0x4000 0x0800
.reserve veneers     0x4800 0x0080
.reserve shadow      0x6000 0x0800
.vectors 0x2000 32
.entry reset
"""


def build(body: str, *, irqs: dict[int, str] | None = None, svc: str | None = None, data: str = "",
          nsc: str = "", secure: str = "", extra: str = ""):
    """Assemble ``body`` as the main program at 0x2300 with a one-instruction bootstrap."""
    irqs = irqs or {}
    vec = [".org 0x2000", ".word 0x2000", ".word reset"]
    for n in range(2, 32):
        if n == 11 and svc:
            vec.append(f".word {svc}")
        elif n - 16 in irqs:
            vec.append(f".word {irqs[n - 16]}")
        else:
            vec.append(".word 0")
    src = HEADER + data + "\n".join(vec) + "\n"
    src += ".org 0x2200\n.bootstrap 0x2200 0x100\nreset: b main_start\n"
    src += ".org 0x2300\nmain_start:\n" + body + "\nmain_end:\n.main main_start main_end-main_start\n"
    src += extra + "\n"
    if nsc:
        src += ".org 0x4880\n" + nsc + "\n"
    if secure:
        src += ".org 0x5000\n" + secure + "\n"
    src += ".org 0x4800\n.space 0x80\n"
    return assemble(src)
