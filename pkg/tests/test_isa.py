import re
import struct

import capstone
import keystone
import pytest

from tzcfi import isa
from tzcfi.isa import BranchClass, Op


def hw_bytes(*hws: int) -> bytes:
    return struct.pack(f"<{len(hws)}H", *hws)


# -- encoding table ----------------------------------------------------------

@pytest.mark.parametrize("ins, expected", [
    (isa.svc(5), [0xDF05]),
    (isa.svc(0x2A), [0xDF2A]),
    (isa.NOP, [0xB000]),
    (isa.SG, [0xE97F]),
    (isa.HALT, [0xBEAB]),
    (isa.mov(1, 7), [0x2107]),
    (isa.cmp(2, 9), [0x2A09]),
    (isa.add(3, 200), [0x33C8]),
    (isa.sub(7, 1), [0x3F01]),
    (isa.str_(5, 6, 124), [0x67F5]),
    (isa.ldr(0, 1, 4), [0x6848]),
    (isa.push(4, 5, lr=True), [0xB530]),
    (isa.pop(4, pc=True), [0xBD10]),
    (isa.b(-2048), [0xE400]),
    (isa.bcond(0, -4), [0xD0FE]),
    (isa.bx(isa.LR), [0x4770]),
    (isa.blx(3), [0x4798]),
    (isa.bxns(isa.LR), [0x4774]),
    (isa.bl(0), [0xF000, 0xF800]),
    (isa.bl(0x100), [0xF000, 0xF880]),
])
def test_encoding_table(ins, expected):
    assert isa.encode_halfwords(ins) == expected
    assert isa.encode(ins) == hw_bytes(*expected)


def test_nop_is_add_sp_zero():
    ins, width = isa.decode(b"\x00\xb0")  # halfword 0xB000, little-endian
    assert (ins, width) == (isa.NOP, 2)


def test_decode_svc():
    assert isa.decode(hw_bytes(0xDF2A)) == (isa.svc(0x2A), 2)


def test_bl_round_trip():
    code = isa.encode(isa.bl(0x100))
    assert isa.decode(code) == (isa.bl(0x100), 4)


@pytest.mark.parametrize("ins", [
    isa.mov(0, 256), isa.add(8, 1), isa.ldr(0, 1, 2), isa.ldr(0, 1, 128), isa.b(2048), isa.b(3),
    isa.bcond(0, 256), isa.bcond(2, 0), isa.bl(1 << 24), isa.bl(1), isa.svc(256), isa.push(8),
])
def test_encode_range_errors(ins):
    with pytest.raises(isa.EncodeError):
        isa.encode(ins)


def test_truncated_bl_is_decode_error():
    with pytest.raises(isa.DecodeError):
        isa.decode(hw_bytes(0xF000))


def test_bl_prefix_with_bad_suffix_is_undefined():
    ins, width = isa.decode(hw_bytes(0xF000, 0x2000))
    assert ins.op is Op.UNDEFINED and width == 2


def test_unaligned_offset_rejected():
    with pytest.raises(isa.DecodeError):
        isa.decode(hw_bytes(0xB000, 0xB000), 1)


# -- exhaustive round trip ---------------------------------------------------------

def test_exhaustive_16bit_round_trip():
    defined = 0
    for hw in range(0x10000):
        if isa.is_bl_prefix(hw):
            continue
        ins = isa.decode_halfword(hw)
        assert ins.width == 2
        assert isa.encode_halfwords(ins) == [hw]
        if ins.op is not Op.UNDEFINED:
            defined += 1
            assert isa.decode_halfword(isa.encode_halfwords(ins)[0]) == ins
    assert defined > 10_000


def test_sampled_bl_round_trip():
    offsets = list(range(-0x4000, 0x4000, 2)) + [isa.BL_MIN, isa.BL_MAX, 0x800E54, -0x800000, 0x3FFFFE]
    for off in offsets:
        ins = isa.bl(off)
        code = isa.encode(ins)
        assert len(code) == 4
        assert isa.decode(code) == (ins, 4)


# -- independent oracles ----------------------------------------------------------

@pytest.fixture(scope="module")
def cs():
    return capstone.Cs(capstone.CS_ARCH_ARM, capstone.CS_MODE_THUMB | capstone.CS_MODE_MCLASS | capstone.CS_MODE_V8)


@pytest.fixture(scope="module")
def ks():
    return keystone.Ks(keystone.KS_ARCH_ARM, keystone.KS_MODE_THUMB)


@pytest.mark.parametrize("source, ins", [
    ("pop {r4, pc}", isa.pop(4, pc=True)),
    ("bl #0x104", isa.bl(0x100)),
    ("bl #0x4", isa.bl(0)),
    ("bx lr", isa.bx(isa.LR)),
    ("push {r4, r5, lr}", isa.push(4, 5, lr=True)),
    ("svc #5", isa.svc(5)),
    ("blx r3", isa.blx(3)),
    ("movs r0, #5", isa.mov(0, 5)),
    ("adds r3, #200", isa.add(3, 200)),
    ("subs r7, #1", isa.sub(7, 1)),
    ("cmp r2, #9", isa.cmp(2, 9)),
    ("ldr r0, [r1, #4]", isa.ldr(0, 1, 4)),
    ("str r5, [r6, #124]", isa.str_(5, 6, 124)),
    ("add sp, #0", isa.NOP),
    ("bkpt #0xab", isa.HALT),
])
def test_keystone_agrees(ks, source, ins):
    encoding, _ = ks.asm(source, 0)
    assert bytes(encoding) == isa.encode(ins)


_CS_ALIASES = {"sb": "r9", "sl": "r10", "fp": "r11", "ip": "r12"}


def _ints(text: str) -> list:
    return [int(t, 0) if re.fullmatch(r"-?(0x[0-9a-f]+|\d+)", t) else _CS_ALIASES.get(t, t)
            for t in re.split(r"[\s,#\[\]{}]+", text) if t]


def _expected(ins, addr):
    op = ins.op
    r = isa.reg_name
    simple = {Op.MOV_IMM: "movs", Op.ADD_IMM: "adds", Op.SUB_IMM: "subs", Op.CMP_IMM: "cmp"}
    if op in simple:
        return simple[op], [r(ins.rd), ins.imm]
    if op in (Op.LDR_IMM, Op.STR_IMM):
        return op.value, [r(ins.rd), r(ins.rn)] + ([ins.imm] if ins.imm else [])
    if op is Op.PUSH:
        return "push", [r(x) for x in ins.regs] + (["lr"] if ins.extra else [])
    if op is Op.POP:
        return "pop", [r(x) for x in ins.regs] + (["pc"] if ins.extra else [])
    if op is Op.B_COND:
        return "b" + isa.COND_NAMES[ins.cond], [ins.target(addr)]
    if op in (Op.B, Op.BL):
        return op.value, [ins.target(addr)]
    if op in (Op.BX, Op.BLX, Op.BXNS):
        return op.value, [r(ins.rm)]
    if op is Op.SVC:
        return "svc", [ins.imm]
    if op is Op.NOP:
        return "add", ["sp", 0]
    if op is Op.HALT:
        return "bkpt", [0xAB]
    return None


def test_capstone_agrees_exhaustively(cs):
    """Every halfword the subset defines decodes the same way in capstone."""
    addr = 0x1000
    checked = 0
    for hw in range(0x10000):
        if isa.is_bl_prefix(hw):
            continue
        ins = isa.decode_halfword(hw)
        expected = _expected(ins, addr)
        if expected is None:
            continue
        got = list(cs.disasm(hw_bytes(hw), addr))
        assert len(got) == 1, f"{hw:#06x}"
        assert (got[0].mnemonic, _ints(got[0].op_str)) == expected, f"{hw:#06x} {ins}"
        checked += 1
    assert checked > 10_000


def test_capstone_agrees_on_bl(cs):
    for off in (0, 0x100, -0x100, 0x3FFFFE, -0x400000, 0x800E54, isa.BL_MIN, isa.BL_MAX):
        (got,) = cs.disasm(isa.encode(isa.bl(off)), 0x1000)
        assert got.mnemonic == "bl" and int(got.op_str.lstrip("#"), 0) == (0x1004 + off) & 0xFFFFFFFF


# -- classification ------------------------------------------------------------------

@pytest.mark.parametrize("ins, cls", [
    (isa.bx(isa.LR), BranchClass.RETURN_BX_LR),
    (isa.pop(4, 5, pc=True), BranchClass.RETURN_POP),
    (isa.pop(4, 5), BranchClass.NOT_A_BRANCH),
    (isa.mov(0, 7), BranchClass.NOT_A_BRANCH),
    (isa.bl(0x100), BranchClass.DIRECT_CALL),
    (isa.blx(3), BranchClass.INDIRECT_CALL),
    (isa.bx(3), BranchClass.INDIRECT_CALL),
    (isa.b(8), BranchClass.DIRECT_JUMP),
    (isa.bcond(1, 8), BranchClass.DIRECT_JUMP),
    (isa.svc(1), BranchClass.NOT_A_BRANCH),
])
def test_classify(ins, cls):
    assert isa.classify(ins) is cls


def test_classification_total_and_stable():
    for hw in range(0x10000):
        if isa.is_bl_prefix(hw):
            continue
        ins = isa.decode_halfword(hw)
        cls = isa.classify(ins)
        assert cls is isa.classify(isa.decode_halfword(isa.encode_halfwords(ins)[0]))


def test_ambiguity_demonstration():
    """The second halfword of a bl can decode as an unrelated instruction."""
    call = isa.bl(0x800E54)
    code = isa.encode(call)
    assert isa.decode(code, 0) == (call, 4)
    second, width = isa.decode(code, 2)
    assert second == isa.svc(0x2A) and width == 2
    assert isa.classify(second) is not isa.classify(call)


def test_disassemble():
    assert isa.disassemble(isa.bl(0x100), 0x8000) == "bl 0x8104"
    assert isa.disassemble(isa.pop(4, 5, pc=True)) == "pop {r4, r5, pc}"
    assert str(isa.ldr(0, 1, 8)) == "ldr r0, [r1, #8]"
