"""Thumb-2 subset used by the simulated core.

Every instruction is a little-endian sequence of halfwords.  Only ``bl`` is
32 bits wide; everything else is a single halfword.  The encodings follow
real Thumb wherever the subset overlaps it (see docs/isa.md for the table).
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

SP, LR, PC = 13, 14, 15

REG_NAMES = [f"r{i}" for i in range(13)] + ["sp", "lr", "pc"]

COND_NAMES = {0: "eq", 1: "ne", 4: "mi", 5: "pl"}

BL_MIN = -(1 << 24)
BL_MAX = (1 << 24) - 2


class DecodeError(ValueError):
    pass


class EncodeError(ValueError):
    pass


class Op(enum.Enum):
    MOV_IMM = "mov"
    ADD_IMM = "add"
    SUB_IMM = "sub"
    CMP_IMM = "cmp"
    LDR_IMM = "ldr"
    STR_IMM = "str"
    PUSH = "push"
    POP = "pop"
    B_COND = "bcond"
    B = "b"
    BL = "bl"
    BLX = "blx"
    BX = "bx"
    SVC = "svc"
    NOP = "nop"
    BXNS = "bxns"
    SG = "sg"
    HALT = "halt"
    UNDEFINED = "udf"


class BranchClass(enum.Enum):
    DIRECT_CALL = "direct-call"
    INDIRECT_CALL = "indirect-call"
    RETURN_BX_LR = "return-bx-lr"
    RETURN_POP = "return-pop"
    DIRECT_JUMP = "direct-jump"
    NOT_A_BRANCH = "not-a-branch"


def reg_name(index: int) -> str:
    return REG_NAMES[index]


@dataclass(frozen=True)
class Instruction:
    """Decoded instruction.

    Field use depends on ``op``: ``rd`` is the destination (or ``Rt`` for
    loads/stores, ``Rn`` for cmp), ``rn`` the base register of a load/store,
    ``rm`` the branch register of bx/blx/bxns.  ``imm`` holds the 8-bit
    immediate, the byte offset of ldr/str, the svc comment, or the raw
    halfword of an undefined encoding.  ``offset`` is a branch displacement
    in bytes relative to the instruction address + 4.  ``extra`` is the lr
    bit of push and the pc bit of pop.
    """

    op: Op
    rd: int = 0
    rn: int = 0
    rm: int = 0
    imm: int = 0
    regs: tuple[int, ...] = ()
    extra: bool = False
    cond: int = 0
    offset: int = 0

    @property
    def width(self) -> int:
        return 4 if self.op is Op.BL else 2

    def target(self, address: int) -> int:
        """Absolute destination of a pc-relative branch located at ``address``."""
        return (address + 4 + self.offset) & 0xFFFFFFFF

    def __str__(self) -> str:
        return disassemble(self)


# -- constructors -----------------------------------------------------------

def mov(rd: int, imm: int) -> Instruction:
    return Instruction(Op.MOV_IMM, rd=rd, imm=imm)


def add(rd: int, imm: int) -> Instruction:
    return Instruction(Op.ADD_IMM, rd=rd, imm=imm)


def sub(rd: int, imm: int) -> Instruction:
    return Instruction(Op.SUB_IMM, rd=rd, imm=imm)


def cmp(rn: int, imm: int) -> Instruction:
    return Instruction(Op.CMP_IMM, rd=rn, imm=imm)


def ldr(rt: int, rn: int, offset: int = 0) -> Instruction:
    return Instruction(Op.LDR_IMM, rd=rt, rn=rn, imm=offset)


def str_(rt: int, rn: int, offset: int = 0) -> Instruction:
    return Instruction(Op.STR_IMM, rd=rt, rn=rn, imm=offset)


def push(*regs: int, lr: bool = False) -> Instruction:
    return Instruction(Op.PUSH, regs=tuple(sorted(set(regs))), extra=lr)


def pop(*regs: int, pc: bool = False) -> Instruction:
    return Instruction(Op.POP, regs=tuple(sorted(set(regs))), extra=pc)


def bcond(cond: int, offset: int) -> Instruction:
    return Instruction(Op.B_COND, cond=cond, offset=offset)


def b(offset: int) -> Instruction:
    return Instruction(Op.B, offset=offset)


def bl(offset: int) -> Instruction:
    return Instruction(Op.BL, offset=offset)


def blx(rm: int) -> Instruction:
    return Instruction(Op.BLX, rm=rm)


def bx(rm: int) -> Instruction:
    return Instruction(Op.BX, rm=rm)


def bxns(rm: int) -> Instruction:
    return Instruction(Op.BXNS, rm=rm)


def svc(comment: int) -> Instruction:
    return Instruction(Op.SVC, imm=comment)


NOP = Instruction(Op.NOP)
SG = Instruction(Op.SG)
HALT = Instruction(Op.HALT)

NOP_HALFWORD = 0xB000
SG_HALFWORD = 0xE97F
HALT_HALFWORD = 0xBEAB


def undefined(halfword: int) -> Instruction:
    return Instruction(Op.UNDEFINED, imm=halfword)


# -- encoding ----------------------------------------------------------------

def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise EncodeError(msg)


def _lo(reg: int, what: str) -> int:
    _check(0 <= reg <= 7, f"{what} must be r0-r7, got {reg}")
    return reg


def _reglist(regs: tuple[int, ...]) -> int:
    bits = 0
    for r in regs:
        bits |= 1 << _lo(r, "register list entry")
    return bits


def encode_halfwords(ins: Instruction) -> list[int]:
    op = ins.op
    if op in (Op.MOV_IMM, Op.CMP_IMM, Op.ADD_IMM, Op.SUB_IMM):
        _check(0 <= ins.imm <= 0xFF, f"immediate {ins.imm} out of range 0-255")
        base = {Op.MOV_IMM: 0x2000, Op.CMP_IMM: 0x2800, Op.ADD_IMM: 0x3000, Op.SUB_IMM: 0x3800}[op]
        return [base | _lo(ins.rd, "register") << 8 | ins.imm]
    if op in (Op.LDR_IMM, Op.STR_IMM):
        _check(ins.imm % 4 == 0 and 0 <= ins.imm <= 124, f"offset {ins.imm} must be a multiple of 4 in 0-124")
        base = 0x6800 if op is Op.LDR_IMM else 0x6000
        return [base | (ins.imm // 4) << 6 | _lo(ins.rn, "base register") << 3 | _lo(ins.rd, "register")]
    if op in (Op.PUSH, Op.POP):
        _check(bool(ins.regs) or ins.extra, "empty register list")
        base = 0xB400 if op is Op.PUSH else 0xBC00
        return [base | int(ins.extra) << 8 | _reglist(ins.regs)]
    if op is Op.B_COND:
        _check(ins.cond in COND_NAMES, f"unsupported condition {ins.cond}")
        _check(ins.offset % 2 == 0 and -256 <= ins.offset <= 254, f"conditional branch offset {ins.offset} out of range")
        return [0xD000 | ins.cond << 8 | (ins.offset >> 1) & 0xFF]
    if op is Op.B:
        _check(ins.offset % 2 == 0 and -2048 <= ins.offset <= 2046, f"branch offset {ins.offset} out of range")
        return [0xE000 | (ins.offset >> 1) & 0x7FF]
    if op is Op.BL:
        off = ins.offset
        _check(off % 2 == 0 and BL_MIN <= off <= BL_MAX, f"bl offset {off:#x} out of range")
        s = (off >> 24) & 1
        i1 = (off >> 23) & 1
        i2 = (off >> 22) & 1
        j1 = (i1 ^ 1) ^ s
        j2 = (i2 ^ 1) ^ s
        return [
            0xF000 | s << 10 | (off >> 12) & 0x3FF,
            0xD000 | j1 << 13 | j2 << 11 | (off >> 1) & 0x7FF,
        ]
    if op in (Op.BX, Op.BLX, Op.BXNS):
        _check(0 <= ins.rm <= 15, f"register {ins.rm} out of range")
        base = {Op.BX: 0x4700, Op.BLX: 0x4780, Op.BXNS: 0x4704}[op]
        return [base | ins.rm << 3]
    if op is Op.SVC:
        _check(0 <= ins.imm <= 0xFF, f"svc comment {ins.imm} out of range 0-255")
        return [0xDF00 | ins.imm]
    if op is Op.NOP:
        return [NOP_HALFWORD]
    if op is Op.SG:
        return [SG_HALFWORD]
    if op is Op.HALT:
        return [HALT_HALFWORD]
    if op is Op.UNDEFINED:
        return [ins.imm & 0xFFFF]
    raise EncodeError(f"cannot encode {op}")


def encode(ins: Instruction) -> bytes:
    hws = encode_halfwords(ins)
    return struct.pack(f"<{len(hws)}H", *hws)


# -- decoding ----------------------------------------------------------------

def _regs_from_bits(bits: int) -> tuple[int, ...]:
    return tuple(i for i in range(8) if bits >> i & 1)


def _sext(value: int, bits: int) -> int:
    sign = 1 << (bits - 1)
    return (value & (sign - 1)) - (value & sign)


def is_bl_prefix(hw: int) -> bool:
    return hw & 0xF800 == 0xF000


def decode_halfword(hw: int, next_hw: int | None = None) -> Instruction:
    """Decode one instruction whose first halfword is ``hw``.

    ``next_hw`` is consulted only for a 32-bit prefix; passing None for a
    prefix raises DecodeError (truncated instruction).
    """
    top5 = hw >> 11
    if top5 == 0b00100:
        return mov(hw >> 8 & 7, hw & 0xFF)
    if top5 == 0b00101:
        return cmp(hw >> 8 & 7, hw & 0xFF)
    if top5 == 0b00110:
        return add(hw >> 8 & 7, hw & 0xFF)
    if top5 == 0b00111:
        return sub(hw >> 8 & 7, hw & 0xFF)
    if top5 == 0b01100:
        return str_(hw & 7, hw >> 3 & 7, (hw >> 6 & 0x1F) * 4)
    if top5 == 0b01101:
        return ldr(hw & 7, hw >> 3 & 7, (hw >> 6 & 0x1F) * 4)
    if hw & 0xF600 == 0xB400:
        if hw & 0x1FF == 0:
            return undefined(hw)  # empty register list
        op = Op.POP if hw & 0x0800 else Op.PUSH
        return Instruction(op, regs=_regs_from_bits(hw & 0xFF), extra=bool(hw >> 8 & 1))
    if hw == NOP_HALFWORD:
        return NOP
    if hw == HALT_HALFWORD:
        return HALT
    if hw == SG_HALFWORD:
        return SG
    if hw & 0xFF00 == 0x4700:
        rm = hw >> 3 & 0xF
        low = hw & 7
        if hw & 0x80:
            return blx(rm) if low == 0 else undefined(hw)
        if low == 0:
            return bx(rm)
        if low == 4:
            return bxns(rm)
        return undefined(hw)
    if hw & 0xFF00 == 0xDF00:
        return svc(hw & 0xFF)
    if hw & 0xF000 == 0xD000:
        cond = hw >> 8 & 0xF
        if cond in COND_NAMES:
            return bcond(cond, _sext(hw & 0xFF, 8) * 2)
        return undefined(hw)
    if hw & 0xF800 == 0xE000:
        return b(_sext(hw & 0x7FF, 11) * 2)
    if is_bl_prefix(hw):
        if next_hw is None:
            raise DecodeError(f"truncated 32-bit instruction {hw:#06x}")
        if next_hw & 0xD000 != 0xD000:
            return undefined(hw)
        s = hw >> 10 & 1
        j1 = next_hw >> 13 & 1
        j2 = next_hw >> 11 & 1
        i1 = (j1 ^ s) ^ 1
        i2 = (j2 ^ s) ^ 1
        raw = s << 24 | i1 << 23 | i2 << 22 | (hw & 0x3FF) << 12 | (next_hw & 0x7FF) << 1
        return bl(_sext(raw, 25))
    return undefined(hw)


def decode(code: bytes, offset: int = 0) -> tuple[Instruction, int]:
    """Decode the instruction at ``offset`` in ``code``; returns (instruction, width)."""
    if offset % 2:
        raise DecodeError(f"offset {offset} is not halfword aligned")
    if offset + 2 > len(code):
        raise DecodeError(f"offset {offset} past end of code")
    (hw,) = struct.unpack_from("<H", code, offset)
    nxt = None
    if is_bl_prefix(hw) and offset + 4 <= len(code):
        (nxt,) = struct.unpack_from("<H", code, offset + 2)
    ins = decode_halfword(hw, nxt)
    return ins, ins.width


def iter_decode(code: bytes, base: int = 0):
    """Linear sweep: yield (address, instruction) over ``code``."""
    off = 0
    while off < len(code):
        ins, width = decode(code, off)
        yield base + off, ins
        off += width


# -- classification ------------------------------------------------------------

def classify(ins: Instruction) -> BranchClass:
    op = ins.op
    if op is Op.BL:
        return BranchClass.DIRECT_CALL
    if op is Op.BLX:
        return BranchClass.INDIRECT_CALL
    if op is Op.BX:
        return BranchClass.RETURN_BX_LR if ins.rm == LR else BranchClass.INDIRECT_CALL
    if op is Op.POP and ins.extra:
        return BranchClass.RETURN_POP
    if op in (Op.B, Op.B_COND):
        return BranchClass.DIRECT_JUMP
    return BranchClass.NOT_A_BRANCH


MEDIATED = frozenset({
    BranchClass.DIRECT_CALL,
    BranchClass.INDIRECT_CALL,
    BranchClass.RETURN_BX_LR,
    BranchClass.RETURN_POP,
})


# -- disassembly ---------------------------------------------------------------

def _fmt_list(regs: tuple[int, ...], extra: str | None) -> str:
    names = [reg_name(r) for r in regs]
    if extra:
        names.append(extra)
    return "{" + ", ".join(names) + "}"


def disassemble(ins: Instruction, address: int | None = None) -> str:
    op = ins.op

    def dest() -> str:
        if address is None:
            return f"{'+' if ins.offset >= 0 else '-'}{abs(ins.offset):#x}"
        return f"{ins.target(address):#x}"

    if op in (Op.MOV_IMM, Op.ADD_IMM, Op.SUB_IMM, Op.CMP_IMM):
        return f"{op.value} {reg_name(ins.rd)}, #{ins.imm}"
    if op in (Op.LDR_IMM, Op.STR_IMM):
        return f"{op.value} {reg_name(ins.rd)}, [{reg_name(ins.rn)}, #{ins.imm}]"
    if op is Op.PUSH:
        return "push " + _fmt_list(ins.regs, "lr" if ins.extra else None)
    if op is Op.POP:
        return "pop " + _fmt_list(ins.regs, "pc" if ins.extra else None)
    if op is Op.B_COND:
        return f"b{COND_NAMES[ins.cond]} {dest()}"
    if op in (Op.B, Op.BL):
        return f"{op.value} {dest()}"
    if op in (Op.BX, Op.BLX, Op.BXNS):
        return f"{op.value} {reg_name(ins.rm)}"
    if op is Op.SVC:
        return f"svc #{ins.imm}"
    if op is Op.UNDEFINED:
        return f"udf {ins.imm:#06x}"
    return op.value
