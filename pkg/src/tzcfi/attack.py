"""Scripted attacker and interrupt schedules.

One ``<trigger> <action>`` per line (or separated by ``;``)::

    at-cycle 500 raise-irq 3
    at-symbol vuln+4 write32 sp+8 gadget
    at-pc 0x2340 set-reg r3 0x2401

Addresses and values are expressions over numbers, image symbols and
``sp`` (the Non-secure stack pointer when the action fires).  Every trigger
fires at most once.  Writes are Non-secure stores, so writes aimed at Secure
memory or read-only code fault exactly as a real memory bug would.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .asm import AsmError, evaluate
from .image import Security
from .machine import Machine, MachineFault

_WRITE_SIZES = {"write8": 1, "write16": 2, "write32": 4}


class AttackError(ValueError):
    pass


class TriggerKind(enum.Enum):
    CYCLE = "at-cycle"
    PC = "at-pc"
    SYMBOL = "at-symbol"


@dataclass
class AttackStep:
    trigger: TriggerKind
    when: str
    action: str
    args: tuple[str, ...]
    lineno: int
    fired: bool = False


def parse_attack(text: str) -> list[AttackStep]:
    steps = []
    for lineno, raw in enumerate(text.replace(";", "\n").splitlines(), 1):
        tok = raw.split("#", 1)[0].split()
        if not tok:
            continue
        if len(tok) < 3:
            raise AttackError(f"line {lineno}: expected '<trigger> <value> <action> ...'")
        try:
            trigger = TriggerKind(tok[0])
        except ValueError:
            raise AttackError(f"line {lineno}: unknown trigger {tok[0]!r}") from None
        action, args = tok[2], tuple(tok[3:])
        want = {"write8": 2, "write16": 2, "write32": 2, "set-reg": 2, "raise-irq": 1}.get(action)
        if want is None:
            raise AttackError(f"line {lineno}: unknown action {action!r}")
        if len(args) != want:
            raise AttackError(f"line {lineno}: {action} takes {want} argument(s)")
        steps.append(AttackStep(trigger, tok[1], action, args, lineno))
    return steps


class AttackEngine:
    """Fires scripted actions from the machine's ``before_step`` hook."""

    def __init__(self, steps: list[AttackStep], symbols: dict[str, int]):
        self.steps = steps
        self.symbols = dict(symbols)
        self.log: list[str] = []
        self._pcs: dict[int, list[AttackStep]] = {}
        self._cycles: list[AttackStep] = []
        for st in steps:
            if st.trigger is TriggerKind.CYCLE:
                self._cycles.append(st)
            else:
                addr = self._eval(st.when, st.lineno) & ~1
                self._pcs.setdefault(addr, []).append(st)

    def _eval(self, expr: str, lineno: int, extra: dict[str, int] | None = None) -> int:
        names = self.symbols if extra is None else self.symbols | extra
        try:
            return evaluate(expr, names, lineno) & 0xFFFFFFFF
        except AsmError as exc:
            raise AttackError(str(exc)) from None

    def __call__(self, m: Machine) -> None:
        for st in self._cycles:
            if not st.fired and m.cycles >= int(st.when, 0):
                self._fire(m, st)
        for st in self._pcs.get(m.pc, ()):
            if not st.fired:
                self._fire(m, st)

    def _fire(self, m: Machine, st: AttackStep) -> None:
        st.fired = True
        env = {"sp": m.sp_main_ns}
        self.log.append(f"cycle {m.cycles}: {st.action} {' '.join(st.args)}")
        if st.action == "raise-irq":
            m.raise_irq(self._eval(st.args[0], st.lineno))
        elif st.action == "set-reg":
            name = st.args[0].lower()
            index = {"sp": 13, "lr": 14, "pc": 15}.get(name)
            if index is None:
                if not (name.startswith("r") and name[1:].isdigit() and int(name[1:]) <= 12):
                    raise AttackError(f"line {st.lineno}: bad register {st.args[0]!r}")
                index = int(name[1:])
            m.set_reg(index, self._eval(st.args[1], st.lineno, env))
        else:
            addr = self._eval(st.args[0], st.lineno, env)
            value = self._eval(st.args[1], st.lineno, env)
            try:
                m.store(addr, value, _WRITE_SIZES[st.action], security=Security.NONSECURE)
            except MachineFault as exc:
                m.fail(exc, detail=f"attack write: {exc.detail}")
