import struct

import capstone
import keystone
import pytest

from conftest import ALL_FIXTURES, instrumented, original
from helpers import HEADER, build
from tzcfi import isa
from tzcfi.asm import assemble
from tzcfi.isa import Op
from tzcfi.machine import EXC_SVC
from tzcfi.rewriter import (CapacityError, Descriptor, DispatchClass, LayoutError, RewriteError,
                            build_call_target_table, code_segments, instrument_image)

SMALL = """\
.region data   0x0010 0x0ff0 rw ns
.region flash  0x8000 0x1000 rx ns
.region tables 0x9000 0x0100 r  ns
.region nsc    0x9800 0x0100 rx nsc
.region sram_s 0xA000 0x0400 rw s
.reserve tables      0x9000 0x0100
.reserve trampolines 0x8800 0x0040
.reserve monitor     0x8840 0x0010
.reserve veneers     0x9800 0x0010
.reserve shadow      0xA000 0x0100
.vectors 0x8C00 12
.entry 0x8000
.org 0x8000
main:   bl f
        halt
mend:
.org 0x8100
f:      bx lr
end:
.main main mend-main
.main f end-f
.org 0x8C00
        .word 0x1000
        .word main
.rept 10
        .word 0
.endr
.org 0x9800
.space 0x10
"""


def halfwords(data: bytes, addr: int, n: int) -> list[int]:
    return list(struct.unpack_from(f"<{n}H", data, addr))


def test_single_direct_call():
    res = instrument_image(assemble(SMALL))
    out = res.image.data
    comment = res.sites[0].comment
    assert halfwords(out, 0x8000, 2) == [0xDF00 | comment, 0xB000]
    assert res.branch_table == [(0x8000, 0x8100)]
    branch = res.image.manifest.tables["branch"]
    assert out[branch.base:branch.end] == struct.pack("<II", 0x8000, 0x8100)
    assert halfwords(out, 0x8100, 1) == [0xDF00 | res.sites[1].comment]
    assert res.dispatch[comment].cls is DispatchClass.DIRECT_CALL


def test_no_branches_leaves_image_identical():
    image = build("mov r0, #1\nhalt")
    res = instrument_image(image)
    assert res.image.data == image.data
    assert res.sites == [] and res.branch_table == []
    assert all(span.size == 0 for span in res.image.manifest.tables.values())


@pytest.mark.parametrize("source", ["bx lr", "pop {r4, pc}", "pop {r0, r2, r3, pc}"])
def test_trampoline_holds_reference_encoding(source):
    ks = keystone.Ks(keystone.KS_ARCH_ARM, keystone.KS_MODE_THUMB)
    expected, _ = ks.asm(source, 0)
    body = "bl f\nhalt\nf: push {r0, r2, r3, r4, lr}\n" + source
    res = instrument_image(build(body))
    tramps = {res.image.data[d.trampoline:d.trampoline + 2] for d in res.dispatch.values() if d.trampoline}
    assert bytes(expected) in tramps


def test_descriptors_are_deduplicated():
    body = """
        bl f
        bl f
        bl g
        halt
f:      bx lr
g:      push {r4, lr}
        blx r3
        blx r3
        bx r3
        pop {r4, pc}
h:      push {r4, lr}
        pop {r4, pc}
"""
    res = instrument_image(build(body))
    kinds = sorted((d.cls, d.register, d.link, d.regs) for d in res.dispatch.values())
    assert kinds == [
        (DispatchClass.DIRECT_CALL, 0, False, ()),
        (DispatchClass.INDIRECT_CALL, 3, False, ()),
        (DispatchClass.INDIRECT_CALL, 3, True, ()),
        (DispatchClass.RETURN_BX_LR, 0, False, ()),
        (DispatchClass.RETURN_POP, 0, False, (4,)),
    ]
    assert len(res.sites) == 9
    assert res.report.trampolines == 2


def test_comments_are_sequential_and_exc_entry_last():
    res = instrument_image(original("tamper"))
    comments = sorted(res.dispatch)
    assert comments == list(range(1, len(comments) + 1))
    assert res.dispatch[comments[-1]].cls is DispatchClass.EXC_ENTRY


def test_descriptor_pack_round_trip():
    for d in (Descriptor(1, DispatchClass.DIRECT_CALL), Descriptor(2, DispatchClass.INDIRECT_CALL, 3, True),
              Descriptor(3, DispatchClass.RETURN_POP, regs=(0, 4, 7), trampoline=0x2090)):
        assert Descriptor.unpack(d.pack()) == d
        assert len(d.pack()) == 8


def test_vector_trampolines():
    res = instrument_image(original("tamper"))
    src, out = original("tamper"), res.image
    exc = next(c for c, d in res.dispatch.items() if d.cls is DispatchClass.EXC_ENTRY)
    handlers = {h for _, h in res.exc_trampolines}
    for number, (old, new) in enumerate(zip(src.vector_entries(), out.vector_entries())):
        if number in (0, 1):
            assert old == new
        elif number == EXC_SVC:
            assert new & ~1 == out.manifest.tables["monitor"].base
        elif old:
            tramp = new & ~1
            assert (tramp, old & ~1) in res.exc_trampolines
            first, _ = isa.decode(out.data, tramp)
            jump, _ = isa.decode(out.data, tramp + 2)
            assert first == isa.svc(exc)
            assert jump.op is Op.B and jump.target(tramp + 2) == old & ~1
    assert handlers == {src.manifest.symbols["irq_h"], src.manifest.symbols["irq_leaf"]}
    monitor = out.manifest.tables["monitor"].base
    assert halfwords(out.data, monitor, 1) == [0xDE00]


def test_shared_handler_gets_one_trampoline():
    res = instrument_image(build("halt\nh: bx lr", irqs={0: "h", 1: "h", 2: "h"}))
    assert len(res.exc_trampolines) == 1


def test_already_instrumented_is_rejected():
    with pytest.raises(RewriteError, match="already instrumented"):
        instrument_image(instrumented("calls").image)


def test_svc_in_main_is_rejected():
    with pytest.raises(RewriteError, match="svc"):
        instrument_image(build("nop\n" * 200 + "svc #3\nhalt"))


def test_stripped_instrumented_image_is_detected():
    out = instrumented("calls").image
    stripped = type(out)(out.data, original("calls").manifest)
    with pytest.raises(RewriteError, match="already instrumented"):
        instrument_image(stripped)


@pytest.mark.parametrize("reserve", ["tables", "trampolines", "monitor", "veneers", "shadow"])
def test_missing_reserve_is_layout_error(reserve):
    src = HEADER.replace(f".reserve {reserve} ", ".reserve unused_" + reserve + " ")
    image = assemble(src + ".org 0x2000\n.word 0x2000\n.word reset\n.rept 30\n.word 0\n.endr\n"
                           ".org 0x2300\nreset: bl f\nhalt\nf: bx lr\ne:\n.main reset e-reset\n"
                           ".org 0x4800\n.space 0x80\n")
    with pytest.raises(LayoutError, match=reserve):
        instrument_image(image)


def test_reserve_with_wrong_attribution_is_layout_error():
    src = HEADER.replace(".reserve shadow      0x6000", ".reserve shadow      0x0100")
    with pytest.raises(LayoutError, match="must be in s memory"):
        instrument_image(assemble(src + ".org 0x2000\n.word 0x2000\n.word reset\n.rept 30\n.word 0\n.endr\n"
                                        ".org 0x2300\nreset: bl f\nhalt\nf: bx lr\ne:\n.main reset e-reset\n"
                                        ".org 0x4800\n.space 0x80\n"))


def _pop_forms(n: int) -> str:
    lines = []
    for mask in range(1, n + 1):
        regs = ", ".join(f"r{i}" for i in range(8) if mask >> i & 1)
        lines.append(f"pop {{{regs}, pc}}")
    return "\n".join(lines)


def test_trampoline_reserve_overflow():
    # 0x170 bytes hold 184 two-byte trampolines
    with pytest.raises(LayoutError, match="trampolines"):
        instrument_image(build("halt\n" + _pop_forms(190)))


def test_too_many_descriptor_classes():
    with pytest.raises(CapacityError):
        instrument_image(build("halt\nbx lr\n" + _pop_forms(255)))


def test_out_of_range_exception_trampoline():
    # handler 0x3F00 is beyond the 2 KiB reach of a b from the trampoline reserve
    with pytest.raises(LayoutError, match="branch range"):
        instrument_image(build("halt", irqs={0: "far"}, extra=".org 0x3F00\nfar: bx lr\n.main far 2"))


def test_call_target_table():
    image = original("callback")
    m = image.manifest
    targets = build_call_target_table(m)
    assert targets == sorted(set(targets))
    for name in ("cb_a", "cb_b", "cb_c", "via_tail", "main", "irq_h"):
        assert m.symbols[name] in targets
    assert m.symbols["boot_helper"] not in targets
    assert m.symbols["cb_a"] + 2 not in targets


def test_bootstrap_is_not_rewritten():
    src, out = original("callback"), instrumented("callback").image
    (boot,) = src.manifest.bootstrap
    assert src.data[boot.base:boot.end] == out.data[boot.base:boot.end]


# -- properties checked on every fixture -------------------------------------------------

def _allowed_changes(res, image):
    m = res.image.manifest
    spans = [(s.address, s.address + s.instruction.width) for s in res.sites]
    spans += [(s.base, s.end) for name, s in m.tables.items() if name != "shadow" and s.size]
    spans += [(s.base, s.end) for name, s in image.manifest.reserves.items() if name != "shadow"]
    base, count = image.manifest.vectors
    spans.append((base, base + 4 * count))
    return spans


@pytest.mark.parametrize("name", ALL_FIXTURES)
def test_layout_preserved(name):
    image, res = original(name), instrumented(name)
    assert len(res.image.data) == len(image.data)
    spans = _allowed_changes(res, image)
    for i, (a, b) in enumerate(zip(image.data, res.image.data)):
        if a != b:
            assert any(lo <= i < hi for lo, hi in spans), f"{name}: byte {i:#x} moved"
    assert res.image.manifest.symbols == image.manifest.symbols


@pytest.mark.parametrize("name", ALL_FIXTURES)
def test_no_unmediated_branch_remains(name):
    res = instrumented(name)
    out = res.image
    svcs = 0
    for seg in code_segments(out.manifest):
        code = out.read(seg.base, seg.size)
        for addr, ins in isa.iter_decode(code, seg.base):
            assert isa.classify(ins) not in isa.MEDIATED, f"{name}: {ins} at {addr:#x}"
            svcs += ins.op is Op.SVC
    assert svcs == len(res.sites)


@pytest.fixture(scope="module")
def cs():
    return capstone.Cs(capstone.CS_ARCH_ARM, capstone.CS_MODE_THUMB | capstone.CS_MODE_MCLASS | capstone.CS_MODE_V8)


@pytest.mark.parametrize("name", ALL_FIXTURES)
def test_tables_match_independent_disassembly(cs, name):
    image, res = original(name), instrumented(name)
    calls, returns = [], []
    for seg in code_segments(image.manifest):
        for ins in cs.disasm(image.read(seg.base, seg.size), seg.base):
            if ins.mnemonic == "bl":
                calls.append((ins.address, int(ins.op_str.lstrip("#"), 0)))
            elif ins.mnemonic == "bx" and ins.op_str == "lr" or ins.mnemonic == "pop" and "pc" in ins.op_str:
                returns.append(ins.address)
    assert res.branch_table == calls
    table = res.image.manifest.tables["branch"]
    raw = res.image.data[table.base:table.end]
    assert list(struct.iter_unpack("<II", raw)) == calls
    assert table.size == 8 * res.report.per_class[DispatchClass.DIRECT_CALL]
    site_addrs = {s.address for s in res.sites}
    assert set(returns) <= site_addrs


@pytest.mark.parametrize("name", ["calls", "tamper", "bench/dense"])
def test_deterministic(name):
    a, b = instrument_image(original(name)), instrument_image(original(name))
    assert a.image == b.image and a.report == b.report


def test_report_lines():
    rep = instrumented("calls").report
    lines = rep.lines()
    assert lines[0] == f"decoded {rep.decoded}"
    assert any(line.startswith("class direct_call ") for line in lines)
    assert rep.ratio == pytest.approx(rep.sites / rep.decoded)
