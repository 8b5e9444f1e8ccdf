"""Lift labeled FI32 assembly into the CFG IR.

Blocks start at every label and after every branch, HALT or TRAP.  A ``CMP``
immediately followed by a conditional branch becomes ``compare`` + ``condbr``;
flags are not otherwise modelled, so a branch without its ``CMP`` right
before it is rejected.
"""

from __future__ import annotations

import itertools

from ..asm import AsmLine, AsmUnit, Stmt
from ..isa import SP, Op
from .ir import (
    FIRST_TEMP,
    BasicBlock,
    BinOp,
    Br,
    Compare,
    CondBr,
    Const,
    Halt,
    IRModule,
    Load,
    Store,
    Trap,
    UnOp,
    UnsupportedShape,
)

_PRED = {Op.BEQ: "eq", Op.BNE: "ne", Op.BLT: "lt", Op.BGE: "ge"}
_BIN = {Op.ADD: "add", Op.SUB: "sub", Op.XOR: "xor", Op.AND: "and", Op.OR: "or"}
_TERMINATING = (Op.JMP, Op.HALT, Op.TRAP)


def _split(asm: AsmUnit):
    """Code lines grouped into (labels, stmts) runs, plus the data lines."""
    code_end = next((i for i, ln in enumerate(asm.lines)
                     if ln.stmt is not None and ln.stmt.op == ".org"), len(asm.lines))
    data = tuple(asm.lines[code_end:])
    groups: list[tuple[list[str], list[AsmLine]]] = []
    labels: list[str] = []
    body: list[AsmLine] = []
    for ln in asm.lines[:code_end]:
        if ln.label is not None:
            if body:
                groups.append((labels, body))
                labels, body = [], []
            labels.append(ln.label)
        if ln.stmt is None:
            continue
        body.append(ln)
        op = ln.stmt.opcode
        if op is not None and (op.is_branch or op in _TERMINATING):
            groups.append((labels, body))
            labels, body = [], []
    if labels or body:
        groups.append((labels, body))
    return groups, data


def lift(asm: AsmUnit) -> IRModule:
    groups, data = _split(asm)
    data_labels = {ln.label for ln in data if ln.label is not None}
    counter = itertools.count()
    names = []
    alias: dict[str, str] = {}
    for labels, _ in groups:
        name = labels[0] if labels else f"bb{next(counter)}"
        while name in alias:  # synthetic name clashing with a user label
            name = f"bb{next(counter)}"
        names.append(name)
        for lab in labels:
            alias[lab] = name
    code_labels = set(alias)

    temps = itertools.count(FIRST_TEMP)
    blocks = []
    for idx, (labels, body) in enumerate(groups):
        nxt = names[idx + 1] if idx + 1 < len(groups) else None
        instrs = []
        term = None
        i = 0
        while i < len(body):
            ln = body[i]
            st = ln.stmt
            where = f"line {ln.lineno}: {st.text()}"
            op = st.opcode
            if op is None:
                raise UnsupportedShape(f"{where}: data directive inside code")
            for r in (st.rd, st.rs, st.rt):
                if r == SP and op not in (Op.NOP, Op.HALT, Op.TRAP):
                    raise UnsupportedShape(f"{where}: stack pointer use")
            if op is Op.NOP:
                pass
            elif op is Op.MOVI:
                if isinstance(st.imm, str) and st.imm in code_labels:
                    raise UnsupportedShape(f"{where}: code address taken")
                instrs.append(Const(st.rd, st.imm))
            elif op is Op.MOV:
                instrs.append(UnOp("mov", st.rd, st.rs))
            elif op is Op.NOT:
                instrs.append(UnOp("not", st.rd, st.rs))
            elif op in _BIN:
                instrs.append(BinOp(_BIN[op], st.rd, st.rs, st.rt))
            elif op is Op.LD:
                instrs.append(Load(st.rd, st.rs, st.imm))
            elif op is Op.ST:
                instrs.append(Store(st.rs, st.imm, st.rt))
            elif op is Op.CMP:
                follow = body[i + 1].stmt.opcode if i + 1 < len(body) else None
                if follow is None or not follow.is_cond_branch:
                    # flags nobody reads: the compare has no effect
                    i += 1
                    continue
                br = body[i + 1].stmt
                target = _target(br, alias, data_labels, body[i + 1])
                if nxt is None:
                    raise UnsupportedShape(f"{where}: branch falls off the end of the code")
                c = next(temps)
                instrs.append(Compare(c, _PRED[follow], st.rs, st.rt))
                term = CondBr(c, target, nxt)
                i += 2
                continue
            elif op.is_cond_branch:
                raise UnsupportedShape(f"{where}: conditional branch without an adjacent CMP")
            elif op is Op.JMP:
                term = Br(_target(st, alias, data_labels, ln))
            elif op is Op.HALT:
                term = Halt(st.imm)
            elif op is Op.TRAP:
                term = Trap()
            else:
                raise UnsupportedShape(f"{where}: {op.name} has no IR form")
            i += 1
        if term is None:
            if nxt is None:
                raise UnsupportedShape(f"block {names[idx]!r} falls off the end of the code")
            term = Br(nxt)
        blocks.append(BasicBlock(names[idx], tuple(instrs), term))

    if not blocks:
        raise UnsupportedShape("program has no code")
    return IRModule(tuple(blocks), blocks[0].label, data)


def _target(st: Stmt, alias, data_labels, ln: AsmLine) -> str:
    if not isinstance(st.imm, str):
        raise UnsupportedShape(f"line {ln.lineno}: {st.text()}: numeric branch displacement")
    if st.imm in data_labels or st.imm not in alias:
        raise UnsupportedShape(f"line {ln.lineno}: {st.text()}: target is not code")
    return alias[st.imm]
