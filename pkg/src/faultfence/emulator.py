"""Deterministic FI32 execution engine with trace recording and fault hooks.

Memory map (word addresses)::

    0x0000 ..        code image (entry at 0), data words placed by ``.org``
    0x8000 - 0x800F  input region, preloaded with the run's input words
    0xF000 - 0xFFEF  stack; sp (r15) starts at 0xFFF0 and grows down

Only ``CMP`` writes the Z/N flags.  ``TRAP`` halts with the reserved code
:data:`TRAP_CODE`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple

from .asm import MEM_WORDS, ProgramImage
from .isa import Instruction, Op, decode

INPUT_BASE = 0x8000
INPUT_WORDS = 16
STACK_BASE = 0xF000
SP_INIT = 0xFFF0
TRAP_CODE = 0xFD
DEFAULT_MAX_STEPS = 100_000

_MASK = 0xFFFFFFFF


class CrashReason(str, enum.Enum):
    INVALID_OPCODE = "InvalidOpcode"
    MEM_OUT_OF_RANGE = "MemOutOfRange"
    STACK_OUT_OF_RANGE = "StackOutOfRange"
    PC_OUT_OF_RANGE = "PcOutOfRange"
    STEP_LIMIT = "StepLimit"


class FaultModel(str, enum.Enum):
    SKIP = "skip"
    BITFLIP = "bitflip"


class OffsetUnreached(Exception):
    """The fault-free run ends before the requested trace offset."""


@dataclass(frozen=True)
class FaultSpec:
    trace_offset: int
    bit: int | None = None
    model: FaultModel = FaultModel.SKIP

    def __post_init__(self):
        if self.trace_offset < 0:
            raise ValueError("trace_offset must be >= 0")
        if (self.model is FaultModel.BITFLIP) != (self.bit is not None):
            raise ValueError("bit is required for bitflip faults and only for them")
        if self.bit is not None and not 0 <= self.bit < 32:
            raise ValueError(f"bit {self.bit} out of range")

    @property
    def key(self) -> tuple[int, int]:
        return (self.trace_offset, -1 if self.bit is None else self.bit)

    @classmethod
    def skip(cls, offset: int) -> FaultSpec:
        return cls(offset, None, FaultModel.SKIP)

    @classmethod
    def bitflip(cls, offset: int, bit: int) -> FaultSpec:
        return cls(offset, bit, FaultModel.BITFLIP)


class TraceEntry(NamedTuple):
    offset: int
    pc: int
    word: int


@dataclass(frozen=True)
class Halted:
    code: int


@dataclass(frozen=True)
class Crashed:
    reason: CrashReason


@dataclass(frozen=True)
class RunResult:
    outcome: Halted | Crashed
    steps: int
    trace: tuple[TraceEntry, ...] | None = None

    @property
    def halted(self) -> bool:
        return isinstance(self.outcome, Halted)

    @property
    def code(self) -> int | None:
        return self.outcome.code if isinstance(self.outcome, Halted) else None


# word -> (opcode int, rd, rs, rt, imm) or None when invalid
_DECODED: dict[int, tuple | None] = {}


def _fetch_decoded(word: int):
    try:
        return _DECODED[word]
    except KeyError:
        ins = decode(word)
        val = (int(ins.op), ins.rd, ins.rs, ins.rt, ins.imm) if isinstance(ins, Instruction) else None
        if len(_DECODED) > 1 << 18:
            _DECODED.clear()
        _DECODED[word] = val
        return val


_NOP, _HALT, _TRAP = int(Op.NOP), int(Op.HALT), int(Op.TRAP)
_MOVI, _MOV, _LD, _ST = int(Op.MOVI), int(Op.MOV), int(Op.LD), int(Op.ST)
_PUSH, _POP, _PUSHF, _POPF = int(Op.PUSH), int(Op.POP), int(Op.PUSHF), int(Op.POPF)
_ADD, _SUB, _XOR, _AND, _OR, _NOT = (int(Op.ADD), int(Op.SUB), int(Op.XOR), int(Op.AND),
                                     int(Op.OR), int(Op.NOT))
_CMP, _JMP, _BEQ, _BNE, _BLT, _BGE = (int(Op.CMP), int(Op.JMP), int(Op.BEQ), int(Op.BNE),
                                      int(Op.BLT), int(Op.BGE))


def _signed(v: int) -> int:
    return v - 0x100000000 if v & 0x80000000 else v


def _execute(image: ProgramImage, inputs, max_steps: int, faults: tuple[FaultSpec, ...],
             record: bool) -> RunResult:
    if len(inputs) > INPUT_WORDS:
        raise ValueError(f"input has {len(inputs)} words, region holds {INPUT_WORDS}")
    code = image.code
    ncode = len(code)
    mem = [0] * MEM_WORDS
    mem[:ncode] = code
    for addr, value in image.data_init.items():
        mem[addr] = value
    for i, value in enumerate(inputs):
        mem[INPUT_BASE + i] = value & _MASK
    regs = [0] * 16
    regs[15] = SP_INIT
    z = n = False
    pc = image.entry
    steps = 0
    trace = [] if record else None
    pending = sorted(faults, key=lambda f: f.trace_offset, reverse=True)
    fault = pending.pop() if pending else None
    fault_at = fault.trace_offset if fault is not None else -1
    outcome = None

    while True:
        if steps >= max_steps:
            outcome = Crashed(CrashReason.STEP_LIMIT)
            break
        if not 0 <= pc < ncode:
            outcome = Crashed(CrashReason.PC_OUT_OF_RANGE)
            break
        if steps == fault_at:
            hit = fault
            fault = pending.pop() if pending else None
            fault_at = fault.trace_offset if fault is not None else -1
            if hit.model is FaultModel.SKIP:
                pc += 1
                continue
            mem[pc] ^= 1 << hit.bit
        word = mem[pc]
        if record:
            trace.append(TraceEntry(steps, pc, word))
        steps += 1
        d = _fetch_decoded(word)
        if d is None:
            outcome = Crashed(CrashReason.INVALID_OPCODE)
            break
        op, rd, rs, rt, imm = d
        pc += 1
        if op == _LD:
            addr = (regs[rs] + imm) & _MASK
            if addr >= MEM_WORDS:
                outcome = Crashed(CrashReason.MEM_OUT_OF_RANGE)
                break
            regs[rd] = mem[addr]
        elif op == _MOVI:
            regs[rd] = imm
        elif op == _CMP:
            a, b = regs[rs], regs[rt]
            z = a == b
            n = _signed(a) < _signed(b)
        elif op >= _JMP:
            if op == _JMP or (op == _BEQ and z) or (op == _BNE and not z) \
                    or (op == _BLT and n) or (op == _BGE and not n):
                pc += imm
        elif op == _XOR:
            regs[rd] = regs[rs] ^ regs[rt]
        elif op == _ADD:
            regs[rd] = (regs[rs] + regs[rt]) & _MASK
        elif op == _SUB:
            regs[rd] = (regs[rs] - regs[rt]) & _MASK
        elif op == _AND:
            regs[rd] = regs[rs] & regs[rt]
        elif op == _OR:
            regs[rd] = regs[rs] | regs[rt]
        elif op == _NOT:
            regs[rd] = ~regs[rs] & _MASK
        elif op == _MOV:
            regs[rd] = regs[rs]
        elif op == _ST:
            addr = (regs[rs] + imm) & _MASK
            if addr >= MEM_WORDS:
                outcome = Crashed(CrashReason.MEM_OUT_OF_RANGE)
                break
            mem[addr] = regs[rt]
        elif op == _PUSH or op == _PUSHF:
            sp = regs[15] - 1
            if not STACK_BASE <= sp < SP_INIT:
                outcome = Crashed(CrashReason.STACK_OUT_OF_RANGE)
                break
            mem[sp] = regs[rs] if op == _PUSH else (int(z) | int(n) << 1)
            regs[15] = sp
        elif op == _POP or op == _POPF:
            sp = regs[15]
            if not STACK_BASE <= sp < SP_INIT:
                outcome = Crashed(CrashReason.STACK_OUT_OF_RANGE)
                break
            value = mem[sp]
            regs[15] = sp + 1
            if op == _POP:
                regs[rd] = value
            else:
                z = bool(value & 1)
                n = bool(value & 2)
        elif op == _HALT:
            outcome = Halted(imm)
            break
        elif op == _TRAP:
            outcome = Halted(TRAP_CODE)
            break
        # NOP falls through

    if fault_at >= 0:
        raise OffsetUnreached(
            f"trace offset {fault_at} not reached: fault-free run ends after {steps} steps")
    return RunResult(outcome, steps, tuple(trace) if record else None)


def run(image: ProgramImage, inputs=(), max_steps: int = DEFAULT_MAX_STEPS,
        record_trace: bool = True) -> RunResult:
    """Run ``image`` fault-free on ``inputs``."""
    return _execute(image, list(inputs), max_steps, (), record_trace)


def run_with_fault(image: ProgramImage, inputs, fault: FaultSpec,
                   max_steps: int = DEFAULT_MAX_STEPS, record_trace: bool = False) -> RunResult:
    """Run ``image`` with one fault injected at ``fault.trace_offset``.

    A skipped instruction has no effect at all and is not counted as a step.
    A bit flip corrupts the code word in memory when execution reaches the
    offset; the corruption persists for the rest of the run.
    """
    return _execute(image, list(inputs), max_steps, (fault,), record_trace)


def run_with_faults(image: ProgramImage, inputs, faults,
                    max_steps: int = DEFAULT_MAX_STEPS, record_trace: bool = False) -> RunResult:
    """Inject several faults in one run (negative controls only).

    Offsets count steps of the faulted run, so a later fault's offset already
    accounts for earlier skips.  Two faults may not share an offset.
    """
    faults = tuple(faults)
    if len({f.trace_offset for f in faults}) != len(faults):
        raise ValueError("two faults at the same trace offset")
    return _execute(image, list(inputs), max_steps, faults, record_trace)


def trace(image: ProgramImage, inputs=(), max_steps: int = DEFAULT_MAX_STEPS) -> list[TraceEntry]:
    return list(run(image, inputs, max_steps).trace)
