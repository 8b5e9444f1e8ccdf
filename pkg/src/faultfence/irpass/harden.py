"""UID-checksum hardening of conditional branches.

For a block ``src`` ending in ``condbr(c, T, F)`` the pass computes, right
after the compare, an edge checksum from the compare result::

    const_T = uid_T ^ uid_src        const_F = uid_F ^ uid_src
    mask    = zext(c) - 1            # 0 when c holds, all ones otherwise
    h       = (~mask & const_T) | (mask & const_F)

twice, into two pinned registers (D1, D2), re-executes the compare (C2) and
branches on that.  Each side then checks D1 and D2 against the constant the
edge expects before reaching the real destination; a mismatch traps.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

from .ir import (
    BasicBlock,
    BinOp,
    Compare,
    CondBr,
    Const,
    IRModule,
    MissingUid,
    Trap,
    UnOp,
    UnsupportedShape,
    ZExt,
)

WORD = 0xFFFFFFFF
D1_REG = 13
D2_REG = 14


def assign_uids(m: IRModule) -> IRModule:
    """Number blocks 1..n in block order."""
    return m.with_blocks(replace(b, uid=i) for i, b in enumerate(m.blocks, 1))


@dataclass(frozen=True)
class EdgeChecksums:
    uid_src: int
    uid_Tdst: int
    uid_Fdst: int
    const_Tdst: int
    const_Fdst: int

    def __post_init__(self):
        if self.const_Tdst != (self.uid_Tdst ^ self.uid_src) & WORD:
            raise ValueError("const_Tdst must be uid_Tdst ^ uid_src")
        if self.const_Fdst != (self.uid_Fdst ^ self.uid_src) & WORD:
            raise ValueError("const_Fdst must be uid_Fdst ^ uid_src")

    @classmethod
    def of(cls, uid_src: int, uid_Tdst: int, uid_Fdst: int) -> EdgeChecksums:
        return cls(uid_src, uid_Tdst, uid_Fdst,
                   (uid_Tdst ^ uid_src) & WORD, (uid_Fdst ^ uid_src) & WORD)


def compute_checksum(cmp_res: int, ec: EdgeChecksums) -> int:
    """Branchless select of the edge constant, as the lowered code computes it."""
    if cmp_res not in (0, 1):
        raise ValueError("cmp_res must be 0 or 1")
    mask = (cmp_res - 1) & WORD
    return ((~mask & ec.const_Tdst) | (mask & ec.const_Fdst)) & WORD


def _checksum_ops(c: int, const_t: int, const_f: int, out: int, fresh) -> list:
    """The checksum select as IR: every intermediate is a fresh vreg."""
    z, one, mask, inv, kt, t, kf, f = (next(fresh) for _ in range(8))
    return [
        ZExt(z, c),
        Const(one, 1),
        BinOp("sub", mask, z, one),
        UnOp("not", inv, mask),
        Const(kt, const_t),
        BinOp("and", t, inv, kt),
        Const(kf, const_f),
        BinOp("and", f, mask, kf),
        BinOp("or", out, t, f),
    ]


def harden_branches(m: IRModule) -> IRModule:
    uids = {b.label: b.uid for b in m.blocks}
    for b in m.blocks:
        if not b.uid:
            raise MissingUid(f"block {b.label!r} has no uid")
    if len(set(uids.values())) != len(uids):
        raise MissingUid("block uids are not unique")

    fresh = itertools.count(m.max_vreg() + 1)
    next_uid = itertools.count(max(uids.values()) + 1)
    taken = set(uids)
    pinned = dict(m.pinned)
    out: list[BasicBlock] = []

    def name(stem: str) -> str:
        n = stem
        k = itertools.count(1)
        while n in taken:
            n = f"{stem}_{next(k)}"
        taken.add(n)
        return n

    for b in m.blocks:
        term = b.term
        if not isinstance(term, CondBr):
            out.append(b)
            continue
        cmp_ = next((op for op in reversed(b.instrs)
                     if isinstance(op, Compare) and op.dst == term.cond), None)
        if cmp_ is None:
            raise UnsupportedShape(f"block {b.label!r}: condbr condition is not a compare here")
        if any(op.dst in (cmp_.a, cmp_.b) for op in b.instrs[b.instrs.index(cmp_) + 1:]
               if hasattr(op, "dst")):
            raise UnsupportedShape(f"block {b.label!r}: compare operands change before the branch")

        ec = EdgeChecksums.of(b.uid, uids[term.true_dst], uids[term.false_dst])
        d1, d2 = next(fresh), next(fresh)
        pinned[d1], pinned[d2] = D1_REG, D2_REG
        c2 = next(fresh)
        start = b.instrs.index(cmp_)
        body = (list(b.instrs)
                + _checksum_ops(cmp_.dst, ec.const_Tdst, ec.const_Fdst, d1, fresh)
                + _checksum_ops(cmp_.dst, ec.const_Tdst, ec.const_Fdst, d2, fresh)
                + [Compare(c2, cmp_.pred, cmp_.a, cmp_.b)])

        stem = f"hb{b.uid}"
        vt1, vt2, flt_t = name(f"{stem}_vt1"), name(f"{stem}_vt2"), name(f"{stem}_flt_t")
        vf1, vf2, flt_f = name(f"{stem}_vf1"), name(f"{stem}_vf2"), name(f"{stem}_flt_f")
        out.append(replace(b, instrs=tuple(body), term=CondBr(c2, vt1, vf1),
                           region_start=start, region=b.uid))
        for first, second, trap, dst, expect in (
                (vt1, vt2, flt_t, term.true_dst, ec.const_Tdst),
                (vf1, vf2, flt_f, term.false_dst, ec.const_Fdst)):
            n, e1, e2 = next(fresh), next(fresh), next(fresh)
            out.append(BasicBlock(first, (Const(n, expect), Compare(e1, "eq", d1, n)),
                                  CondBr(e1, second, trap), next(next_uid), 0, b.uid))
            out.append(BasicBlock(second, (Compare(e2, "eq", d2, n),),
                                  CondBr(e2, dst, trap), next(next_uid), 0, b.uid))
            out.append(BasicBlock(trap, (), Trap(), next(next_uid), 0, b.uid))
    return m.with_blocks(out, pinned=pinned)
