"""FI32 instruction set: opcode table, bit-exact encoding and decoding.

Every instruction is one 32-bit word laid out as::

    31..24  opcode
    23..20  rd
    19..16  rs
    15..12  rt
    11..0   imm12      (MOVI, JMP and Bcc use bits 15..0 as imm16)

Fields an opcode does not use must be zero.  ``decode`` is total: any word
that is not the canonical encoding of some instruction decodes to an
``InvalidInstruction`` value.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache

WORD_MASK = 0xFFFFFFFF
NUM_REGS = 16
SP = 15


class Fmt(enum.Enum):
    NONE = "none"          # NOP, TRAP, PUSHF, POPF
    IMM12 = "imm12"        # HALT imm12
    RD_IMM16 = "rd_imm16"  # MOVI rd, imm16
    RD_RS = "rd_rs"        # MOV, NOT
    RD_RS_IMM = "rd_rs_imm"  # LD rd, [rs+imm12]
    RS_RT_IMM = "rs_rt_imm"  # ST [rs+imm12], rt
    RS = "rs"              # PUSH rs
    RD = "rd"              # POP rd
    RD_RS_RT = "rd_rs_rt"  # ADD ... OR
    RS_RT = "rs_rt"        # CMP rs, rt
    REL16 = "rel16"        # JMP, Bcc


class Op(enum.IntEnum):
    NOP = 0x00
    HALT = 0x01
    TRAP = 0x02
    MOVI = 0x10
    MOV = 0x11
    LD = 0x12
    ST = 0x13
    PUSH = 0x14
    POP = 0x15
    PUSHF = 0x16
    POPF = 0x17
    ADD = 0x20
    SUB = 0x21
    XOR = 0x22
    AND = 0x23
    OR = 0x24
    NOT = 0x25
    CMP = 0x30
    JMP = 0x40
    BEQ = 0x41
    BNE = 0x42
    BLT = 0x43
    BGE = 0x44

    @property
    def fmt(self) -> Fmt:
        return FORMATS[self]

    @property
    def is_branch(self) -> bool:
        return Op.JMP <= self <= Op.BGE

    @property
    def is_cond_branch(self) -> bool:
        return Op.BEQ <= self <= Op.BGE


FORMATS = {
    Op.NOP: Fmt.NONE,
    Op.HALT: Fmt.IMM12,
    Op.TRAP: Fmt.NONE,
    Op.MOVI: Fmt.RD_IMM16,
    Op.MOV: Fmt.RD_RS,
    Op.LD: Fmt.RD_RS_IMM,
    Op.ST: Fmt.RS_RT_IMM,
    Op.PUSH: Fmt.RS,
    Op.POP: Fmt.RD,
    Op.PUSHF: Fmt.NONE,
    Op.POPF: Fmt.NONE,
    Op.ADD: Fmt.RD_RS_RT,
    Op.SUB: Fmt.RD_RS_RT,
    Op.XOR: Fmt.RD_RS_RT,
    Op.AND: Fmt.RD_RS_RT,
    Op.OR: Fmt.RD_RS_RT,
    Op.NOT: Fmt.RD_RS,
    Op.CMP: Fmt.RS_RT,
    Op.JMP: Fmt.REL16,
    Op.BEQ: Fmt.REL16,
    Op.BNE: Fmt.REL16,
    Op.BLT: Fmt.REL16,
    Op.BGE: Fmt.REL16,
}

# which of rd/rs/rt each format uses
FIELDS = {
    Fmt.NONE: (),
    Fmt.IMM12: (),
    Fmt.RD_IMM16: ("rd",),
    Fmt.RD_RS: ("rd", "rs"),
    Fmt.RD_RS_IMM: ("rd", "rs"),
    Fmt.RS_RT_IMM: ("rs", "rt"),
    Fmt.RS: ("rs",),
    Fmt.RD: ("rd",),
    Fmt.RD_RS_RT: ("rd", "rs", "rt"),
    Fmt.RS_RT: ("rs", "rt"),
    Fmt.REL16: (),
}

# (lo, hi) inclusive immediate range per format; None = no immediate
IMM_RANGE = {
    Fmt.IMM12: (0, 0xFFF),
    Fmt.RD_IMM16: (0, 0xFFFF),
    Fmt.RD_RS_IMM: (0, 0xFFF),
    Fmt.RS_RT_IMM: (0, 0xFFF),
    Fmt.REL16: (-0x8000, 0x7FFF),
}

INVERSE_BRANCH = {Op.BEQ: Op.BNE, Op.BNE: Op.BEQ, Op.BLT: Op.BGE, Op.BGE: Op.BLT}

_BY_CODE = {int(op): op for op in Op}


@dataclass(frozen=True)
class Instruction:
    """A decoded FI32 instruction in canonical form."""

    op: Op
    rd: int = 0
    rs: int = 0
    rt: int = 0
    imm: int = 0

    def __post_init__(self):
        fmt = self.op.fmt
        used = FIELDS[fmt]
        for name in ("rd", "rs", "rt"):
            value = getattr(self, name)
            if not 0 <= value < NUM_REGS:
                raise ValueError(f"{self.op.name}: {name}={value} out of range")
            if name not in used and value != 0:
                raise ValueError(f"{self.op.name}: unused field {name} must be 0")
        bounds = IMM_RANGE.get(fmt)
        if bounds is None:
            if self.imm != 0:
                raise ValueError(f"{self.op.name} takes no immediate")
        elif not bounds[0] <= self.imm <= bounds[1]:
            raise ValueError(f"{self.op.name}: immediate {self.imm} does not fit")

    def __str__(self) -> str:
        return format_instruction(self)


@dataclass(frozen=True)
class InvalidInstruction:
    """The decode result for a word that is not a canonical instruction."""

    word: int

    def __str__(self) -> str:
        return f"<invalid 0x{self.word:08x}>"


def encode(instr: Instruction) -> int:
    fmt = instr.op.fmt
    word = int(instr.op) << 24 | instr.rd << 20 | instr.rs << 16 | instr.rt << 12
    if fmt in (Fmt.RD_IMM16, Fmt.REL16):
        word |= instr.imm & 0xFFFF
    else:
        word |= instr.imm & 0xFFF
    return word


@lru_cache(maxsize=1 << 16)
def decode(word: int) -> Instruction | InvalidInstruction:
    word &= WORD_MASK
    op = _BY_CODE.get(word >> 24)
    if op is None:
        return InvalidInstruction(word)
    fmt = op.fmt
    rd = (word >> 20) & 0xF
    rs = (word >> 16) & 0xF
    rt = (word >> 12) & 0xF
    wide = fmt in (Fmt.RD_IMM16, Fmt.REL16)
    regs = {"rd": rd, "rs": rs} if wide else {"rd": rd, "rs": rs, "rt": rt}
    if any(v for n, v in regs.items() if n not in FIELDS[fmt]):
        return InvalidInstruction(word)
    if wide:
        imm = word & 0xFFFF
        if fmt is Fmt.REL16 and imm & 0x8000:
            imm -= 0x10000
    else:
        imm = word & 0xFFF
        if fmt not in IMM_RANGE and imm:
            return InvalidInstruction(word)
    return Instruction(op, imm=imm, **{n: regs[n] for n in FIELDS[fmt]})


def reg_name(index: int) -> str:
    return "sp" if index == SP else f"r{index}"


def format_instruction(instr: Instruction, target: str | None = None) -> str:
    """Assembly text for ``instr``; ``target`` replaces a branch displacement."""
    op, fmt = instr.op, instr.op.fmt
    name = op.name
    rd, rs, rt = reg_name(instr.rd), reg_name(instr.rs), reg_name(instr.rt)
    if fmt is Fmt.NONE:
        return name
    if fmt is Fmt.IMM12:
        return f"{name} {instr.imm}"
    if fmt is Fmt.RD_IMM16:
        return f"{name} {rd}, {instr.imm}"
    if fmt is Fmt.RD_RS:
        return f"{name} {rd}, {rs}"
    if fmt is Fmt.RD_RS_IMM:
        return f"{name} {rd}, [{rs}+{instr.imm}]"
    if fmt is Fmt.RS_RT_IMM:
        return f"{name} [{rs}+{instr.imm}], {rt}"
    if fmt is Fmt.RS:
        return f"{name} {rs}"
    if fmt is Fmt.RD:
        return f"{name} {rd}"
    if fmt is Fmt.RD_RS_RT:
        return f"{name} {rd}, {rs}, {rt}"
    if fmt is Fmt.RS_RT:
        return f"{name} {rs}, {rt}"
    if target is not None:
        return f"{name} {target}"
    return f"{name} {instr.imm:+d}"


def mnemonic(word: int) -> str:
    """Disassembly text of a single raw word (used in fault reports)."""
    instr = decode(word)
    if isinstance(instr, InvalidInstruction):
        return f".word 0x{word:08x}"
    return format_instruction(instr)
