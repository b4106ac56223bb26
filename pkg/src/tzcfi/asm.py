"""Two-pass assembler for the guest dialect (grammar in docs/asm.md).

The first pass sizes every statement and binds labels, the second encodes.
Manifest directives (``.region``, ``.main`` ...) are passed through to the
image manifest, so one source file describes a complete firmware image.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

from . import isa
from .image import FirmwareImage, Manifest, ManifestError, Region, Security, Span
from .isa import EncodeError, Instruction

_LABEL = re.compile(r"^([A-Za-z_.][\w.]*):")
_TERM = re.compile(r"\s*([+-])?\s*([A-Za-z_.][\w.]*|0[xX][0-9a-fA-F]+|\d+)\s*")
_REGS = {name: i for i, name in enumerate(isa.REG_NAMES)} | {"r13": 13, "r14": 14, "r15": 15}
_BRANCHES = {"b": None, "beq": 0, "bne": 1, "bmi": 4, "bpl": 5}


class AsmError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass
class _Stmt:
    lineno: int
    addr: int
    kind: str          # "ins", "word", "half", "space"
    mnemonic: str = ""
    args: str = ""
    size: int = 0


@dataclass
class _State:
    labels: dict[str, int] = field(default_factory=dict)
    stmts: list[_Stmt] = field(default_factory=list)
    directives: list[tuple[int, str, list[str]]] = field(default_factory=list)


def _split_args(text: str) -> list[str]:
    out, depth, cur = [], 0, ""
    for ch in text:
        if ch in "[{":
            depth += 1
        elif ch in "]}":
            depth -= 1
        if ch == "," and depth == 0:
            out.append(cur.strip())
            cur = ""
        else:
            cur += ch
    if cur.strip():
        out.append(cur.strip())
    return out


def evaluate(expr: str, labels: dict[str, int], lineno: int = 0) -> int:
    """Evaluate ``term (+|- term)*`` where a term is a number or a label."""
    text = expr.strip().lstrip("#").strip()
    if not text:
        raise AsmError(lineno, "missing expression")
    pos, total, first = 0, 0, True
    while pos < len(text):
        m = _TERM.match(text, pos)
        if m is None or m.end() == pos:
            raise AsmError(lineno, f"bad expression {expr!r}")
        sign, tok = m.groups()
        if sign is None and not first:
            raise AsmError(lineno, f"bad expression {expr!r}")
        if tok[0].isdigit():
            value = int(tok, 0)
        elif tok in labels:
            value = labels[tok]
        else:
            raise AsmError(lineno, f"undefined label {tok!r}")
        total += -value if sign == "-" else value
        pos, first = m.end(), False
    return total


def _reg(tok: str, lineno: int) -> int:
    r = _REGS.get(tok.strip().lower())
    if r is None:
        raise AsmError(lineno, f"bad register {tok!r}")
    return r


def _reglist(tok: str, lineno: int, special: str) -> tuple[tuple[int, ...], bool]:
    tok = tok.strip()
    if not (tok.startswith("{") and tok.endswith("}")):
        raise AsmError(lineno, f"expected register list, got {tok!r}")
    regs: list[int] = []
    flag = False
    for item in filter(None, (t.strip() for t in tok[1:-1].split(","))):
        if item.lower() == special:
            flag = True
        elif "-" in item:
            lo, hi = (_reg(t, lineno) for t in item.split("-", 1))
            regs.extend(range(lo, hi + 1))
        else:
            regs.append(_reg(item, lineno))
    if any(r > 7 for r in regs):
        raise AsmError(lineno, "register lists may only name r0-r7 plus lr/pc")
    return tuple(sorted(set(regs))), flag


def _size(mnemonic: str) -> int:
    return 4 if mnemonic == "bl" else 2


def _parse_instruction(st: _Stmt, labels: dict[str, int]) -> Instruction:
    mn, n = st.mnemonic, st.lineno
    args = _split_args(st.args)

    def want(count: int) -> None:
        if len(args) != count:
            raise AsmError(n, f"{mn} takes {count} operand(s)")

    if mn in ("nop", "sg", "halt"):
        want(0)
        return {"nop": isa.NOP, "sg": isa.SG, "halt": isa.HALT}[mn]
    if mn in ("mov", "add", "sub", "cmp"):
        want(2)
        ctor = {"mov": isa.mov, "add": isa.add, "sub": isa.sub, "cmp": isa.cmp}[mn]
        return ctor(_reg(args[0], n), evaluate(args[1], labels, n))
    if mn in ("ldr", "str"):
        want(2)
        mem = args[1].strip()
        if not (mem.startswith("[") and mem.endswith("]")):
            raise AsmError(n, f"expected [rN, #offset], got {mem!r}")
        parts = _split_args(mem[1:-1])
        offset = evaluate(parts[1], labels, n) if len(parts) > 1 else 0
        ctor = isa.ldr if mn == "ldr" else isa.str_
        return ctor(_reg(args[0], n), _reg(parts[0], n), offset)
    if mn == "push":
        want(1)
        regs, lr = _reglist(args[0], n, "lr")
        return isa.push(*regs, lr=lr)
    if mn == "pop":
        want(1)
        regs, pc = _reglist(args[0], n, "pc")
        return isa.pop(*regs, pc=pc)
    if mn in _BRANCHES or mn == "bl":
        want(1)
        offset = evaluate(args[0], labels, n) - (st.addr + 4)
        if mn == "bl":
            return isa.bl(offset)
        cond = _BRANCHES[mn]
        return isa.b(offset) if cond is None else isa.bcond(cond, offset)
    if mn in ("bx", "blx", "bxns"):
        want(1)
        ctor = {"bx": isa.bx, "blx": isa.blx, "bxns": isa.bxns}[mn]
        return ctor(_reg(args[0], n))
    if mn == "svc":
        want(1)
        return isa.svc(evaluate(args[0], labels, n))
    raise AsmError(n, f"unknown mnemonic {mn!r}")


_MANIFEST_DIRECTIVES = {".region": 5, ".entry": 1, ".vectors": 2, ".bootstrap": 2, ".main": 2,
                        ".pool": 2, ".reserve": 3}


def _expand(text: str) -> list[tuple[int, str]]:
    """Strip comments and unroll ``.rept N`` ... ``.endr`` blocks."""
    out: list[tuple[int, str]] = []
    stack: list[tuple[int, int, list[tuple[int, str]]]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split(";", 1)[0].strip()
        head = line.split(None, 1)[0].lower() if line else ""
        if head == ".rept":
            count = evaluate(line[5:], {}, lineno)
            if count < 0:
                raise AsmError(lineno, ".rept count must not be negative")
            stack.append((lineno, count, []))
            continue
        if head == ".endr":
            if not stack:
                raise AsmError(lineno, ".endr without .rept")
            _, count, body = stack.pop()
            (stack[-1][2] if stack else out).extend(body * count)
            continue
        (stack[-1][2] if stack else out).append((lineno, line))
    if stack:
        raise AsmError(stack[-1][0], ".rept without .endr")
    return out


def _first_pass(text: str) -> _State:
    state = _State()
    addr = 0
    for lineno, line in _expand(text):
        while line:
            m = _LABEL.match(line)
            if m is None:
                break
            name = m.group(1)
            if name in state.labels:
                raise AsmError(lineno, f"duplicate label {name!r}")
            state.labels[name] = addr
            line = line[m.end():].strip()
        if not line:
            continue
        head, _, rest = line.replace("\t", " ").partition(" ")
        head = head.lower()
        rest = rest.strip()
        if head == ".org":
            addr = evaluate(rest, state.labels, lineno)
            if addr % 2:
                raise AsmError(lineno, ".org address must be halfword aligned")
        elif head in (".word", ".half"):
            width = 4 if head == ".word" else 2
            if addr % width:
                raise AsmError(lineno, f"{head} at unaligned address {addr:#x}")
            count = len(_split_args(rest))
            if count == 0:
                raise AsmError(lineno, f"{head} needs at least one value")
            state.stmts.append(_Stmt(lineno, addr, head[1:], args=rest, size=width * count))
            addr += width * count
        elif head == ".space":
            size = evaluate(rest, state.labels, lineno)
            if size < 0 or size % 2:
                raise AsmError(lineno, ".space size must be a non-negative even number")
            state.stmts.append(_Stmt(lineno, addr, "space", size=size))
            addr += size
        elif head in _MANIFEST_DIRECTIVES:
            args = rest.split()
            if len(args) != _MANIFEST_DIRECTIVES[head]:
                raise AsmError(lineno, f"{head} takes {_MANIFEST_DIRECTIVES[head]} arguments")
            state.directives.append((lineno, head, args))
        elif head.startswith("."):
            raise AsmError(lineno, f"unknown directive {head!r}")
        else:
            size = _size(head)
            state.stmts.append(_Stmt(lineno, addr, "ins", mnemonic=head, args=rest, size=size))
            addr += size
    return state


def _build_manifest(state: _State) -> Manifest:
    m = Manifest()
    labels = state.labels
    for lineno, head, args in state.directives:
        ev = lambda tok: evaluate(tok, labels, lineno)  # noqa: E731
        if head == ".region":
            name, base, size, perms, sec = args
            try:
                security = Security(sec)
            except ValueError:
                raise AsmError(lineno, f"bad security attribute {sec!r}") from None
            if set(perms) - set("rwx-"):
                raise AsmError(lineno, f"bad permissions {perms!r}")
            m.regions.append(Region(name, ev(base), ev(size), perms.replace("-", ""), security))
        elif head == ".entry":
            m.entry = ev(args[0])
        elif head == ".vectors":
            m.vectors = (ev(args[0]), ev(args[1]))
        elif head == ".reserve":
            m.reserves[args[0]] = Span(ev(args[1]), ev(args[2]))
        else:
            span = Span(ev(args[0]), ev(args[1]))
            {".bootstrap": m.bootstrap, ".main": m.main, ".pool": m.pools}[head].append(span)
    for name, addr in labels.items():
        if name.startswith(".L"):
            continue
        region = m.region_at(addr)
        if region is not None and region.executable:
            m.symbols[name] = addr
    return m


def assemble(text: str) -> FirmwareImage:
    """Assemble ``text`` into a firmware image whose manifest comes from the directives."""
    state = _first_pass(text)
    chunks: list[tuple[int, bytes, int]] = []
    for st in state.stmts:
        if st.kind == "ins":
            ins = _parse_instruction(st, state.labels)
            try:
                data = isa.encode(ins)
            except EncodeError as exc:
                raise AsmError(st.lineno, str(exc)) from None
        elif st.kind == "space":
            data = bytes(st.size)
        else:
            width = 4 if st.kind == "word" else 2
            data = b""
            for tok in _split_args(st.args):
                value = evaluate(tok, state.labels, st.lineno)
                if not -(1 << (8 * width - 1)) <= value < (1 << (8 * width)):
                    raise AsmError(st.lineno, f"value {value:#x} does not fit in {width} bytes")
                data += (value & ((1 << (8 * width)) - 1)).to_bytes(width, "little")
        chunks.append((st.addr, data, st.lineno))
    end = max((a + len(d) for a, d, _ in chunks), default=0)
    image = bytearray(end)
    written = bytearray(end)
    for addr, data, lineno in chunks:
        if any(written[addr:addr + len(data)]):
            raise AsmError(lineno, f"output at {addr:#x} overlaps earlier output")
        image[addr:addr + len(data)] = data
        written[addr:addr + len(data)] = b"\x01" * len(data)
    manifest = _build_manifest(state)
    try:
        manifest.validate()
    except ManifestError as exc:
        raise AsmError(0, str(exc)) from None
    return FirmwareImage(bytes(image), manifest)


def assemble_file(path: str | Path) -> FirmwareImage:
    return assemble(Path(path).read_text())
