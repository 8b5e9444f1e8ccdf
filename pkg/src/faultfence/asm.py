"""Assembler, disassembler and the FI32 program image.

The working form for rewriting is an :class:`AsmUnit`: an ordered list of
lines, each an optional label and an optional statement.  Branch targets are
symbolic, so instructions can be inserted anywhere and the assembler simply
recomputes the PC-relative displacements (``target - (pc + 1)``).
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

from .isa import (
    FIELDS,
    IMM_RANGE,
    Fmt,
    Instruction,
    InvalidInstruction,
    Op,
    decode,
    encode,
    reg_name,
)

MAX_CODE_WORDS = 16384
MEM_WORDS = 65536

IMAGE_MAGIC = b"FI32"
IMAGE_VERSION = 1


class AsmError(Exception):
    """Base class for assembly errors; always names the offending line."""

    def __init__(self, message: str, lineno: int = 0, text: str = ""):
        self.lineno = lineno
        self.text = text
        where = f"line {lineno}: " if lineno else ""
        suffix = f" ({text.strip()!r})" if text.strip() else ""
        super().__init__(f"{where}{message}{suffix}")


class AsmSyntaxError(AsmError):
    pass


class UnknownMnemonic(AsmError):
    pass


class UndefinedLabel(AsmError):
    pass


class ImmediateOverflow(AsmError):
    pass


class DuplicateLabel(AsmError):
    pass


class LayoutError(AsmError):
    pass


class DanglingBranch(Exception):
    """A decoded branch whose target leaves the code region."""


@dataclass
class ProgramImage:
    code: list[int]
    data_init: dict[int, int] = field(default_factory=dict)
    symbols: dict[str, int] = field(default_factory=dict)
    entry: int = 0

    def __post_init__(self):
        if len(self.code) > MAX_CODE_WORDS:
            raise LayoutError(f"code is {len(self.code)} words, limit {MAX_CODE_WORDS}")
        for addr in self.data_init:
            if addr < len(self.code) or addr >= MEM_WORDS:
                raise LayoutError(f"data word at 0x{addr:04x} overlaps code or leaves memory")
        for name, addr in self.symbols.items():
            if not 0 <= addr < MEM_WORDS:
                raise LayoutError(f"symbol {name} -> {addr} outside the image")

    def same_words(self, other: ProgramImage) -> bool:
        return self.code == other.code and self.data_init == other.data_init

    @property
    def size(self) -> int:
        return len(self.code)


@dataclass(frozen=True)
class Stmt:
    """One instruction or directive.  ``imm`` may be a label name."""

    op: str
    rd: int = 0
    rs: int = 0
    rt: int = 0
    imm: int | str = 0

    @property
    def opcode(self) -> Op | None:
        return Op.__members__.get(self.op)

    @property
    def is_directive(self) -> bool:
        return self.op.startswith(".")

    def text(self) -> str:
        if self.op == ".word":
            return f".word 0x{self.imm:08x}" if isinstance(self.imm, int) else f".word {self.imm}"
        if self.op == ".org":
            return f".org 0x{self.imm:04x}"
        op = Op[self.op]
        fmt = op.fmt
        rd, rs, rt = reg_name(self.rd), reg_name(self.rs), reg_name(self.rt)
        imm = self.imm
        if fmt is Fmt.NONE:
            return self.op
        if fmt is Fmt.IMM12:
            return f"{self.op} {imm}"
        if fmt is Fmt.RD_IMM16:
            return f"{self.op} {rd}, {imm}"
        if fmt is Fmt.RD_RS:
            return f"{self.op} {rd}, {rs}"
        if fmt is Fmt.RD_RS_IMM:
            return f"{self.op} {rd}, [{rs}+{imm}]"
        if fmt is Fmt.RS_RT_IMM:
            return f"{self.op} [{rs}+{imm}], {rt}"
        if fmt is Fmt.RS:
            return f"{self.op} {rs}"
        if fmt is Fmt.RD:
            return f"{self.op} {rd}"
        if fmt is Fmt.RD_RS_RT:
            return f"{self.op} {rd}, {rs}, {rt}"
        if fmt is Fmt.RS_RT:
            return f"{self.op} {rs}, {rt}"
        return f"{self.op} {imm:+d}" if isinstance(imm, int) else f"{self.op} {imm}"

    @classmethod
    def of(cls, instr: Instruction, target: str | None = None) -> Stmt:
        return cls(instr.op.name, instr.rd, instr.rs, instr.rt,
                   target if target is not None else instr.imm)


@dataclass(frozen=True)
class AsmLine:
    label: str | None = None
    stmt: Stmt | None = None
    lineno: int = 0
    note: str | None = None  # free-form tag carried by tools (printed as a comment)

    def text(self) -> str:
        if self.stmt is None:
            line = f"{self.label}:"
        elif self.label is None:
            line = "    " + self.stmt.text()
        else:
            line = f"{self.label}: {self.stmt.text()}"
        if self.note:
            line = f"{line:<32} ; {self.note}"
        return line


@dataclass
class AsmUnit:
    lines: list[AsmLine] = field(default_factory=list)

    def text(self) -> str:
        return "\n".join(line.text() for line in self.lines) + "\n"

    def labels(self) -> list[str]:
        return [ln.label for ln in self.lines if ln.label is not None]

    def addresses(self) -> list[int]:
        """Address of every line (label-only lines get the next word's address)."""
        out = []
        addr = 0
        for ln in self.lines:
            st = ln.stmt
            if st is not None and st.op == ".org":
                addr = _require_int(st.imm, ln)
            out.append(addr)
            if st is not None and st.op != ".org":
                addr += 1
        return out

    def code_line_at(self) -> dict[int, int]:
        """Map code address -> index of the statement line encoded there."""
        out = {}
        addr = 0
        for i, ln in enumerate(self.lines):
            st = ln.stmt
            if st is None:
                continue
            if st.op == ".org":
                break
            out[addr] = i
            addr += 1
        return out


_LABEL_RE = re.compile(r"^\s*([A-Za-z_.$][\w.$]*)\s*:")
_REG_RE = re.compile(r"^(?:r(\d+)|sp)$", re.IGNORECASE)
_MEM_RE = re.compile(r"^\[\s*([A-Za-z0-9]+)\s*(?:([+-])\s*([^\]]+?))?\s*\]$")


def _parse_int(tok: str) -> int | None:
    try:
        return int(tok, 0)
    except ValueError:
        return None


def _parse_reg(tok: str, lineno: int, text: str) -> int:
    m = _REG_RE.match(tok.strip())
    if not m:
        raise AsmSyntaxError(f"expected register, got {tok!r}", lineno, text)
    if m.group(1) is None:
        return 15
    idx = int(m.group(1))
    if idx > 15:
        raise AsmSyntaxError(f"no register r{idx}", lineno, text)
    return idx


def _parse_value(tok: str, lineno: int, text: str) -> int | str:
    tok = tok.strip()
    if tok.startswith("+") and _parse_int(tok[1:]) is not None:
        return int(tok[1:], 0)
    value = _parse_int(tok)
    if value is not None:
        return value
    if re.fullmatch(r"[A-Za-z_.$][\w.$]*", tok):
        return tok
    raise AsmSyntaxError(f"bad immediate {tok!r}", lineno, text)


def _parse_mem(tok: str, lineno: int, text: str) -> tuple[int, int | str]:
    m = _MEM_RE.match(tok.strip())
    if not m:
        raise AsmSyntaxError(f"expected [reg+imm], got {tok!r}", lineno, text)
    base = _parse_reg(m.group(1), lineno, text)
    if m.group(2) is None:
        return base, 0
    off = _parse_value(m.group(3), lineno, text)
    if m.group(2) == "-":
        if not isinstance(off, int):
            raise AsmSyntaxError("cannot negate a label offset", lineno, text)
        off = -off
    return base, off


def _split_operands(rest: str) -> list[str]:
    ops, depth, cur = [], 0, ""
    for ch in rest:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            ops.append(cur.strip())
            cur = ""
        else:
            cur += ch
    if cur.strip():
        ops.append(cur.strip())
    return ops


def parse_stmt(body: str, lineno: int = 0, text: str = "") -> Stmt:
    text = text or body
    head, _, rest = body.strip().partition(" ")
    name = head.strip()
    operands = _split_operands(rest)
    if name.lower() in (".word", ".org"):
        if len(operands) != 1:
            raise AsmSyntaxError(f"{name} takes one operand", lineno, text)
        return Stmt(name.lower(), imm=_parse_value(operands[0], lineno, text))
    op = Op.__members__.get(name.upper())
    if op is None:
        raise UnknownMnemonic(f"unknown mnemonic {name!r}", lineno, text)
    fmt = op.fmt
    expected = {
        Fmt.NONE: 0, Fmt.IMM12: 1, Fmt.RD_IMM16: 2, Fmt.RD_RS: 2, Fmt.RD_RS_IMM: 2,
        Fmt.RS_RT_IMM: 2, Fmt.RS: 1, Fmt.RD: 1, Fmt.RD_RS_RT: 3, Fmt.RS_RT: 2, Fmt.REL16: 1,
    }[fmt]
    if len(operands) != expected:
        raise AsmSyntaxError(f"{op.name} takes {expected} operand(s)", lineno, text)
    reg = lambda t: _parse_reg(t, lineno, text)  # noqa: E731
    if fmt is Fmt.NONE:
        return Stmt(op.name)
    if fmt in (Fmt.IMM12, Fmt.REL16):
        return Stmt(op.name, imm=_parse_value(operands[0], lineno, text))
    if fmt is Fmt.RD_IMM16:
        return Stmt(op.name, rd=reg(operands[0]), imm=_parse_value(operands[1], lineno, text))
    if fmt is Fmt.RD_RS:
        return Stmt(op.name, rd=reg(operands[0]), rs=reg(operands[1]))
    if fmt is Fmt.RD_RS_IMM:
        base, off = _parse_mem(operands[1], lineno, text)
        return Stmt(op.name, rd=reg(operands[0]), rs=base, imm=off)
    if fmt is Fmt.RS_RT_IMM:
        base, off = _parse_mem(operands[0], lineno, text)
        return Stmt(op.name, rs=base, rt=reg(operands[1]), imm=off)
    if fmt is Fmt.RS:
        return Stmt(op.name, rs=reg(operands[0]))
    if fmt is Fmt.RD:
        return Stmt(op.name, rd=reg(operands[0]))
    if fmt is Fmt.RD_RS_RT:
        return Stmt(op.name, rd=reg(operands[0]), rs=reg(operands[1]), rt=reg(operands[2]))
    return Stmt(op.name, rs=reg(operands[0]), rt=reg(operands[1]))


def parse(source: str) -> AsmUnit:
    """Parse assembly text into an :class:`AsmUnit` (labels not yet resolved)."""
    lines = []
    for lineno, raw in enumerate(source.splitlines(), start=1):
        body = raw.split(";", 1)[0].rstrip()
        while True:
            m = _LABEL_RE.match(body)
            if not m:
                break
            lines.append(AsmLine(m.group(1), None, lineno))
            body = body[m.end():]
        if body.strip():
            stmt = parse_stmt(body, lineno, raw)
            if lines and lines[-1].lineno == lineno and lines[-1].stmt is None:
                # "label: stmt" stays one line
                last = lines.pop()
                lines.append(AsmLine(last.label, stmt, lineno))
            else:
                lines.append(AsmLine(None, stmt, lineno))
    return AsmUnit(lines)


def _require_int(value, line: AsmLine) -> int:
    if not isinstance(value, int):
        raise AsmSyntaxError(f"expected a number, got {value!r}", line.lineno,
                             line.stmt.text() if line.stmt else "")
    return value


def _line_text(line: AsmLine) -> str:
    return line.text()


def layout(unit: AsmUnit) -> tuple[dict[str, int], int]:
    """Resolve label addresses; returns (symbols, code length)."""
    symbols: dict[str, int] = {}
    addr = 0
    code_len = None
    for ln in unit.lines:
        st = ln.stmt
        if st is not None and st.op == ".org":
            if code_len is None:
                code_len = addr
            addr = _require_int(st.imm, ln)
            if not 0 <= addr < MEM_WORDS:
                raise LayoutError(f".org 0x{addr:x} outside memory", ln.lineno, _line_text(ln))
        if ln.label is not None:
            if ln.label in symbols:
                raise DuplicateLabel(f"label {ln.label!r} defined twice", ln.lineno, _line_text(ln))
            symbols[ln.label] = addr
        if st is not None and st.op != ".org":
            if code_len is not None and not st.is_directive:
                raise LayoutError("instructions must precede the first .org", ln.lineno,
                                  _line_text(ln))
            addr += 1
    if code_len is None:
        code_len = addr
    return symbols, code_len


def _resolve(value: int | str, symbols: dict[str, int], ln: AsmLine) -> int:
    if isinstance(value, int):
        return value
    if value not in symbols:
        raise UndefinedLabel(f"undefined label {value!r}", ln.lineno, _line_text(ln))
    return symbols[value]


def assemble_unit(unit: AsmUnit) -> ProgramImage:
    symbols, code_len = layout(unit)
    code: list[int] = []
    data: dict[int, int] = {}
    addr = 0
    in_data = False
    for ln in unit.lines:
        st = ln.stmt
        if st is None:
            continue
        if st.op == ".org":
            in_data = True
            addr = st.imm
            continue
        if st.op == ".word":
            value = _resolve(st.imm, symbols, ln)
            if not -0x80000000 <= value <= 0xFFFFFFFF:
                raise ImmediateOverflow(f".word value {value} exceeds 32 bits", ln.lineno,
                                        _line_text(ln))
            value &= 0xFFFFFFFF
            if in_data:
                if addr < code_len or addr in data:
                    raise LayoutError(f"data word at 0x{addr:04x} overlaps", ln.lineno,
                                      _line_text(ln))
                data[addr] = value
            else:
                code.append(value)
            addr += 1
            continue
        op = Op[st.op]
        fmt = op.fmt
        imm = _resolve(st.imm, symbols, ln)
        if fmt is Fmt.REL16 and isinstance(st.imm, str):
            imm = imm - (addr + 1)
        lo_hi = IMM_RANGE.get(fmt)
        if lo_hi is not None and not lo_hi[0] <= imm <= lo_hi[1]:
            raise ImmediateOverflow(f"immediate {imm} does not fit {op.name}", ln.lineno,
                                    _line_text(ln))
        used = FIELDS[fmt]
        instr = Instruction(op, **{n: getattr(st, n) for n in used},
                            imm=imm if lo_hi is not None else 0)
        code.append(encode(instr))
        addr += 1
    if len(code) > MAX_CODE_WORDS:
        raise LayoutError(f"program is {len(code)} words, limit {MAX_CODE_WORDS}")
    return ProgramImage(code, data, symbols)


def assemble(source: str) -> ProgramImage:
    return assemble_unit(parse(source))


def disassemble(image: ProgramImage) -> AsmUnit:
    """Recover a label-based, reassembleable listing of ``image``.

    Image symbols are kept as labels; every other branch target gets a
    synthetic ``L_<addr>`` label.
    """
    n = len(image.code)
    decoded = [decode(w) for w in image.code]
    by_addr: dict[int, list[str]] = {}
    for name, addr in sorted(image.symbols.items(), key=lambda kv: (kv[1], kv[0])):
        by_addr.setdefault(addr, []).append(name)
    targets: dict[int, str] = {}
    for pc, ins in enumerate(decoded):
        if isinstance(ins, Instruction) and ins.op.is_branch:
            tgt = pc + 1 + ins.imm
            if not 0 <= tgt < n:
                raise DanglingBranch(f"branch at 0x{pc:04x} targets 0x{tgt:x} outside code")
            if tgt not in by_addr:
                by_addr[tgt] = [f"L_{tgt:04x}"]
            targets[pc] = by_addr[tgt][0]

    lines: list[AsmLine] = []
    for pc, ins in enumerate(decoded):
        for name in by_addr.get(pc, ()):
            lines.append(AsmLine(name))
        if isinstance(ins, InvalidInstruction):
            lines.append(AsmLine(None, Stmt(".word", imm=ins.word)))
        else:
            lines.append(AsmLine(None, Stmt.of(ins, targets.get(pc))))
    for name in by_addr.get(n, ()):
        lines.append(AsmLine(name))

    data_addrs = sorted(set(image.data_init) | {a for a in by_addr if a > n})
    expect = None
    for addr in data_addrs:
        if addr != expect:
            lines.append(AsmLine(None, Stmt(".org", imm=addr)))
        for name in by_addr.get(addr, ()):
            lines.append(AsmLine(name))
        if addr in image.data_init:
            lines.append(AsmLine(None, Stmt(".word", imm=image.data_init[addr])))
            expect = addr + 1
        else:
            expect = addr
    return AsmUnit(lines)


# -- binary image file ----------------------------------------------------

def image_to_bytes(image: ProgramImage) -> bytes:
    out = bytearray(IMAGE_MAGIC)
    out += struct.pack("<BI", IMAGE_VERSION, len(image.code))
    out += struct.pack(f"<{len(image.code)}I", *image.code)
    data = sorted(image.data_init.items())
    out += struct.pack("<I", len(data))
    for addr, value in data:
        out += struct.pack("<II", addr, value)
    syms = sorted(image.symbols.items())
    out += struct.pack("<I", len(syms))
    for name, addr in syms:
        raw = name.encode()
        out += struct.pack("<H", len(raw)) + raw + struct.pack("<I", addr)
    return bytes(out)


def image_from_bytes(blob: bytes) -> ProgramImage:
    if blob[:4] != IMAGE_MAGIC:
        raise ValueError("not an FI32 image (bad magic)")
    version, ncode = struct.unpack_from("<BI", blob, 4)
    if version != IMAGE_VERSION:
        raise ValueError(f"unsupported image version {version}")
    off = 9
    code = list(struct.unpack_from(f"<{ncode}I", blob, off))
    off += 4 * ncode
    (ndata,) = struct.unpack_from("<I", blob, off)
    off += 4
    data = {}
    for _ in range(ndata):
        addr, value = struct.unpack_from("<II", blob, off)
        data[addr] = value
        off += 8
    (nsym,) = struct.unpack_from("<I", blob, off)
    off += 4
    symbols = {}
    for _ in range(nsym):
        (length,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + length].decode()
        off += length
        (addr,) = struct.unpack_from("<I", blob, off)
        off += 4
        symbols[name] = addr
    return ProgramImage(code, data, symbols)


def write_image(image: ProgramImage, path: str | Path) -> None:
    Path(path).write_bytes(image_to_bytes(image))


def read_image(path: str | Path) -> ProgramImage:
    return image_from_bytes(Path(path).read_bytes())


def load_program(path: str | Path) -> ProgramImage:
    """Load either a binary image or assembly source, sniffing the magic."""
    blob = Path(path).read_bytes()
    if blob[:4] == IMAGE_MAGIC:
        return image_from_bytes(blob)
    return assemble(blob.decode())
