"""A small CFG intermediate representation for the hybrid hardening path.

Values live in virtual registers (plain ints).  Lifting maps architectural
register ``rN`` to vreg ``N``; passes allocate fresh vregs above
:data:`FIRST_TEMP`.  Compare results are booleans held in vregs; once lowered
they are 0/1 words.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Union

from ..asm import AsmLine

FIRST_TEMP = 16

PREDICATES = ("eq", "ne", "lt", "ge")
BINOPS = ("add", "sub", "xor", "and", "or")
UNOPS = ("not", "mov")


class IRError(Exception):
    pass


class UnsupportedShape(IRError):
    pass


class IndirectFlow(IRError):
    """Reserved: FI32 has no indirect jumps."""


class MissingUid(IRError):
    pass


class RegisterPressure(IRError):
    pass


# ---- instructions -------------------------------------------------------

@dataclass(frozen=True)
class Const:
    dst: int
    value: Union[int, str]  # a str is a data symbol resolved by the assembler


@dataclass(frozen=True)
class BinOp:
    op: str
    dst: int
    a: int
    b: int


@dataclass(frozen=True)
class UnOp:
    op: str
    dst: int
    a: int


@dataclass(frozen=True)
class Load:
    dst: int
    base: int
    offset: int


@dataclass(frozen=True)
class Store:
    base: int
    offset: int
    src: int


@dataclass(frozen=True)
class Compare:
    dst: int
    pred: str
    a: int
    b: int


@dataclass(frozen=True)
class ZExt:
    dst: int
    src: int


Op = Union[Const, BinOp, UnOp, Load, Store, Compare, ZExt]


# ---- terminators --------------------------------------------------------

@dataclass(frozen=True)
class CondBr:
    cond: int
    true_dst: str
    false_dst: str


@dataclass(frozen=True)
class Br:
    dst: str


@dataclass(frozen=True)
class Halt:
    code: int


@dataclass(frozen=True)
class Trap:
    pass


Terminator = Union[CondBr, Br, Halt, Trap]


def defs(op) -> tuple[int, ...]:
    if isinstance(op, (Store, CondBr, Br, Halt, Trap)):
        return ()
    return (op.dst,)


def uses(op) -> tuple[int, ...]:
    if isinstance(op, BinOp) or isinstance(op, Compare):
        return (op.a, op.b)
    if isinstance(op, UnOp):
        return (op.a,)
    if isinstance(op, Load):
        return (op.base,)
    if isinstance(op, Store):
        return (op.base, op.src)
    if isinstance(op, ZExt):
        return (op.src,)
    if isinstance(op, CondBr):
        return (op.cond,)
    return ()


def successors(term) -> tuple[str, ...]:
    if isinstance(term, CondBr):
        return (term.true_dst, term.false_dst)
    if isinstance(term, Br):
        return (term.dst,)
    return ()


@dataclass(frozen=True)
class BasicBlock:
    label: str
    instrs: tuple
    term: Terminator
    uid: int = 0
    # index of the first instruction of a hardened branch fragment in this
    # block, and the uid of the protected branch; None when unprotected
    region_start: int | None = None
    region: int | None = None


@dataclass(frozen=True)
class IRModule:
    blocks: tuple[BasicBlock, ...]
    entry: str
    data: tuple[AsmLine, ...] = ()        # data section, emitted unchanged
    pinned: dict = field(default_factory=dict)  # vreg -> physical register

    def __post_init__(self):
        labels = [b.label for b in self.blocks]
        if len(set(labels)) != len(labels):
            raise IRError("duplicate block label")
        known = set(labels)
        if self.blocks and self.entry not in known:
            raise IRError(f"entry {self.entry!r} is not a block")
        for b in self.blocks:
            for s in successors(b.term):
                if s not in known:
                    raise IRError(f"block {b.label!r} branches to unknown {s!r}")

    def block(self, label: str) -> BasicBlock:
        for b in self.blocks:
            if b.label == label:
                return b
        raise KeyError(label)

    def with_blocks(self, blocks, **kw) -> IRModule:
        return replace(self, blocks=tuple(blocks), **kw)

    def max_vreg(self) -> int:
        top = FIRST_TEMP - 1
        for b in self.blocks:
            for op in b.instrs + (b.term,):
                for v in defs(op) + uses(op):
                    top = max(top, v)
        return top

    def condbr_count(self) -> int:
        return sum(isinstance(b.term, CondBr) for b in self.blocks)

    def dump(self) -> str:
        """Textual form: one stanza per block, ``block <uid>:`` then ops."""
        out = []
        for b in self.blocks:
            head = f"block {b.uid}:  ; {b.label}"
            if b.label == self.entry:
                head += " (entry)"
            out.append(head)
            out.extend(f"  {format_op(op)}" for op in b.instrs)
            out.append(f"  {format_op(b.term)}")
        return "\n".join(out) + "\n"


def _v(n: int) -> str:
    return f"v{n}"


def format_op(op) -> str:
    if isinstance(op, Const):
        return f"{_v(op.dst)} = const {op.value}"
    if isinstance(op, BinOp):
        return f"{_v(op.dst)} = {op.op} {_v(op.a)}, {_v(op.b)}"
    if isinstance(op, UnOp):
        return f"{_v(op.dst)} = {op.op} {_v(op.a)}"
    if isinstance(op, Load):
        return f"{_v(op.dst)} = load [{_v(op.base)}+{op.offset}]"
    if isinstance(op, Store):
        return f"store [{_v(op.base)}+{op.offset}], {_v(op.src)}"
    if isinstance(op, Compare):
        return f"{_v(op.dst)} = compare {op.pred} {_v(op.a)}, {_v(op.b)}"
    if isinstance(op, ZExt):
        return f"{_v(op.dst)} = zext {_v(op.src)}"
    if isinstance(op, CondBr):
        return f"condbr {_v(op.cond)}, {op.true_dst}, {op.false_dst}"
    if isinstance(op, Br):
        return f"br {op.dst}"
    if isinstance(op, Halt):
        return f"halt {op.code}"
    if isinstance(op, Trap):
        return "trap"
    raise TypeError(op)
