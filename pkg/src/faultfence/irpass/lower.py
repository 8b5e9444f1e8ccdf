"""Lower the IR back to FI32 assembly.

* A compare whose only consumer is the block's own ``condbr`` fuses into
  ``CMP`` + one conditional branch (plus ``JMP`` when neither successor is
  the next block).  Any other compare is materialized as a 0/1 word:
  ``CMP a,b; MOVI d,1; B<pred> L; MOVI d,0; L:``.
* ``zext`` of such a word is a ``MOV`` (nothing when both sides share a
  register).
* Registers: greedy colouring of the interference graph into r0..r12,
  preferring a vreg's own number so lifted code keeps its registers.  Pinned
  vregs (the checksum copies) get their fixed register; r15 is never used.

Lines belonging to a hardened branch carry the note ``hb<uid>``.
"""

from __future__ import annotations

import re

from ..asm import AsmLine, AsmUnit, Stmt
from .ir import (
    BinOp,
    Br,
    Compare,
    CondBr,
    Const,
    Halt,
    IRModule,
    Load,
    RegisterPressure,
    Store,
    Trap,
    UnOp,
    UnsupportedShape,
    ZExt,
    defs,
    successors,
    uses,
)

ALLOCATABLE = 13  # r0..r12
_BRANCH = {"eq": "BEQ", "ne": "BNE", "lt": "BLT", "ge": "BGE"}
_INVERSE = {"eq": "ne", "ne": "eq", "lt": "ge", "ge": "lt"}
_ALU = {"add": "ADD", "sub": "SUB", "xor": "XOR", "and": "AND", "or": "OR"}
_NOTE_RE = re.compile(r"^hb(\d+)$")


def _liveness(m: IRModule) -> dict[str, set[int]]:
    gen, kill = {}, {}
    for b in m.blocks:
        g, k = set(), set()
        for op in b.instrs + (b.term,):
            g |= set(uses(op)) - k
            k |= set(defs(op))
        gen[b.label], kill[b.label] = g, k
    live_in = {b.label: set() for b in m.blocks}
    live_out = {b.label: set() for b in m.blocks}
    changed = True
    while changed:
        changed = False
        for b in reversed(m.blocks):
            out = set().union(*(live_in[s] for s in successors(b.term)))
            inn = gen[b.label] | (out - kill[b.label])
            if out != live_out[b.label] or inn != live_in[b.label]:
                live_out[b.label], live_in[b.label] = out, inn
                changed = True
    return live_out


def _fused(m: IRModule, live_out) -> set[int]:
    """Compare results consumed only by their block's condbr."""
    out = set()
    for b in m.blocks:
        t = b.term
        if not isinstance(t, CondBr):
            continue
        last = b.instrs[-1] if b.instrs else None
        if isinstance(last, Compare) and last.dst == t.cond and t.cond not in live_out[b.label]:
            out.add(t.cond)
        else:
            raise UnsupportedShape(f"block {b.label!r}: condbr is not fed by the last compare")
    return out


def allocate(m: IRModule) -> dict[int, int]:
    """vreg -> physical register."""
    live_out = _liveness(m)
    fused = _fused(m, live_out)
    edges: dict[int, set[int]] = {}
    moves: dict[int, int] = {}

    def node(v):
        if v not in fused:
            edges.setdefault(v, set())

    for b in m.blocks:
        live = set(live_out[b.label])
        ops = b.instrs + (b.term,)
        for op in reversed(ops):
            src = None
            if isinstance(op, ZExt) or (isinstance(op, UnOp) and op.op == "mov"):
                src = op.a if isinstance(op, UnOp) else op.src
                moves[op.dst] = src
            for d in defs(op):
                node(d)
                if d in fused:
                    continue
                for v in live:
                    if v != d and v != src and v not in fused:
                        node(v)
                        edges[d].add(v)
                        edges[v].add(d)
            live -= set(defs(op))
            live |= set(uses(op))
            for u in uses(op):
                node(u)
        # values live on entry are read before any write: they still need a home
        for v in live:
            node(v)

    color: dict[int, int] = {}
    for v, reg in m.pinned.items():
        if v in edges:
            color[v] = reg
    for v, reg in color.items():
        if any(color.get(n) == reg for n in edges[v]):
            raise RegisterPressure(f"pinned v{v} conflicts in r{reg}")
    for v in sorted(edges):
        if v in color:
            continue
        busy = {color[n] for n in edges[v] if n in color}
        prefs = []
        if v in moves and moves[v] in color:
            prefs.append(color[moves[v]])
        if v < ALLOCATABLE:
            prefs.append(v)
        choice = next((r for r in prefs if r < ALLOCATABLE and r not in busy), None)
        if choice is None:
            choice = next((r for r in range(ALLOCATABLE) if r not in busy), None)
        if choice is None:
            raise RegisterPressure(f"no register left for v{v}: {len(busy)} live neighbours")
        color[v] = choice
    return color


def lower(m: IRModule) -> AsmUnit:
    reg = allocate(m)
    live_out = _liveness(m)
    fused = _fused(m, live_out)
    taken = {b.label for b in m.blocks}
    lines: list[AsmLine] = []
    counter = 0

    for bi, b in enumerate(m.blocks):
        nxt = m.blocks[bi + 1].label if bi + 1 < len(m.blocks) else None
        lines.append(AsmLine(b.label, None))

        def note_for(i):
            if b.region is None:
                return None
            if b.region_start is None or i >= b.region_start:
                return f"hb{b.region}"
            return None

        def emit(i, op, rd=0, rs=0, rt=0, imm=0, label=None):
            lines.append(AsmLine(label, Stmt(op, rd, rs, rt, imm), note=note_for(i)))

        for i, op in enumerate(b.instrs):
            if isinstance(op, Const):
                emit(i, "MOVI", rd=reg[op.dst], imm=op.value)
            elif isinstance(op, BinOp):
                emit(i, _ALU[op.op], rd=reg[op.dst], rs=reg[op.a], rt=reg[op.b])
            elif isinstance(op, UnOp):
                if op.op == "not":
                    emit(i, "NOT", rd=reg[op.dst], rs=reg[op.a])
                elif reg[op.dst] != reg[op.a]:
                    emit(i, "MOV", rd=reg[op.dst], rs=reg[op.a])
            elif isinstance(op, ZExt):
                if reg[op.dst] != reg[op.src]:
                    emit(i, "MOV", rd=reg[op.dst], rs=reg[op.src])
            elif isinstance(op, Load):
                emit(i, "LD", rd=reg[op.dst], rs=reg[op.base], imm=op.offset)
            elif isinstance(op, Store):
                emit(i, "ST", rs=reg[op.base], rt=reg[op.src], imm=op.offset)
            elif isinstance(op, Compare):
                emit(i, "CMP", rs=reg[op.a], rt=reg[op.b])
                if op.dst in fused:
                    continue
                while True:
                    label = f"{b.label}_m{counter}"
                    counter += 1
                    if label not in taken:
                        break
                taken.add(label)
                d = reg[op.dst]
                emit(i, "MOVI", rd=d, imm=1)
                emit(i, _BRANCH[op.pred], imm=label)
                emit(i, "MOVI", rd=d, imm=0)
                lines.append(AsmLine(label, None))
            else:
                raise TypeError(op)

        t = b.term
        i = len(b.instrs)
        if isinstance(t, CondBr):
            pred = b.instrs[-1].pred
            if t.true_dst == nxt:
                emit(i, _BRANCH[_INVERSE[pred]], imm=t.false_dst)
            else:
                emit(i, _BRANCH[pred], imm=t.true_dst)
                if t.false_dst != nxt:
                    emit(i, "JMP", imm=t.false_dst)
        elif isinstance(t, Br):
            if t.dst != nxt:
                emit(i, "JMP", imm=t.dst)
        elif isinstance(t, Halt):
            emit(i, "HALT", imm=t.code)
        elif isinstance(t, Trap):
            emit(i, "TRAP")
        else:
            raise TypeError(t)

    lines.extend(m.data)
    return AsmUnit(lines)


def protected_regions(asm: AsmUnit) -> dict[int, int]:
    """Code address -> uid of the hardened branch whose fragment holds it."""
    out = {}
    for ln, addr in zip(asm.lines, asm.addresses()):
        if ln.stmt is None or ln.stmt.is_directive or not ln.note:
            continue
        m = _NOTE_RE.match(ln.note)
        if m:
            out[addr] = int(m.group(1))
    return out
