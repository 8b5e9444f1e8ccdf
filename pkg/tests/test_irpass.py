import random
import re

import pytest

from faultfence import corpus
from faultfence.asm import assemble, assemble_unit, disassemble, parse
from faultfence.emulator import TRAP_CODE, FaultSpec, Halted, run, run_with_fault, run_with_faults
from faultfence.faulter import SUCCESS, campaign
from faultfence.irpass import (
    D1_REG,
    D2_REG,
    BasicBlock,
    EdgeChecksums,
    IRModule,
    MissingUid,
    RegisterPressure,
    UnsupportedShape,
    assign_uids,
    compute_checksum,
    harden_branches,
    hybrid_pipeline,
    lift,
    lower,
    protected_regions,
)
from faultfence.irpass.ir import BinOp, Br, Compare, CondBr, Const, Halt, Trap
from faultfence.isa import Op, decode

WORD = 0xFFFFFFFF


def _oracle(cmp_res, s, t, f):
    # two-case select: the true edge's constant when the compare held
    return (t ^ s) if cmp_res else (f ^ s)


# -- lift ------------------------------------------------------------------

def test_lift_straight_line():
    m = lift(parse("MOVI r1, 5\nHALT 0"))
    assert len(m.blocks) == 1
    assert m.blocks[0].instrs == (Const(1, 5),)
    assert m.blocks[0].term == Halt(0)


def test_lift_bne_round_trips_to_compare_ne():
    m = lift(parse("CMP r1, r2\nBNE x\nHALT 0\nx: HALT 1"))
    b = m.blocks[0]
    assert isinstance(b.instrs[-1], Compare) and b.instrs[-1].pred == "ne"
    assert b.term == CondBr(b.instrs[-1].dst, "x", m.blocks[1].label)
    lowered = lower(m)
    assert any(ln.stmt and ln.stmt.op == "BNE" for ln in lowered.lines)


def test_lift_pincheck_condbrs(pincheck):
    m = lift(parse(pincheck.source))
    # one per pin digit plus the final score check
    assert m.condbr_count() == 5
    assert "block 1:" in assign_uids(m).dump()


@pytest.mark.parametrize("src", [
    "PUSH r1\nHALT 0",
    "BEQ x\nx: HALT 0",
    "MOVI r1, 1",
    "CMP r1, r2\nBEQ 3\nHALT 0",
    "MOVI r1, x\nx: HALT 0",
    "LD r1, [sp+0]\nHALT 0",
])
def test_lift_rejects(src):
    with pytest.raises(UnsupportedShape):
        lift(parse(src))


@pytest.mark.parametrize("entry", corpus.all_entries(), ids=lambda e: e.name)
def test_lower_lift_preserves_codes(entry):
    img = assemble_unit(lower(lift(parse(entry.source))))
    for inp in (entry.good_input, entry.bad_input):
        assert run(img, inp).code == run(entry.image(), inp).code


def test_lift_from_disassembly(pin_image, pincheck):
    img = assemble_unit(hybrid_pipeline(disassemble(pin_image)))
    assert run(img, pincheck.good_input).code == 1
    assert run(img, pincheck.bad_input).code == 0


# -- uids and checksums ----------------------------------------------------

THREE = "CMP r1, r2\nBEQ t\nHALT 0\nt: HALT 1"


def test_assign_uids():
    m = assign_uids(lift(parse(THREE)))
    assert [b.uid for b in m.blocks] == [1, 2, 3]
    assert assign_uids(m) == m


def test_assign_uids_many_blocks():
    blocks = [BasicBlock(f"b{i}", (), Br(f"b{i + 1}")) for i in range(99)]
    blocks.append(BasicBlock("b99", (), Halt(0)))
    uids = [b.uid for b in assign_uids(IRModule(tuple(blocks), "b0")).blocks]
    assert len(set(uids)) == 100 and 0 not in uids


def test_checksum_worked_examples():
    ec = EdgeChecksums.of(0x3, 0x5, 0x9)
    assert (ec.const_Tdst, ec.const_Fdst) == (0x6, 0xA)
    assert compute_checksum(1, ec) == 0x00000006
    assert compute_checksum(0, ec) == 0x0000000A


def test_checksum_matches_oracle():
    rng = random.Random(1234)
    for _ in range(1000):
        s, t, f = (rng.randrange(1, 1 << 32) for _ in range(3))
        c = rng.randrange(2)
        ec = EdgeChecksums.of(s, t, f)
        assert compute_checksum(c, ec) == _oracle(c, s, t, f)
        assert compute_checksum(1, ec) ^ compute_checksum(0, ec) == t ^ f


def test_checksum_input_validation():
    with pytest.raises(ValueError):
        compute_checksum(2, EdgeChecksums.of(1, 2, 3))
    with pytest.raises(ValueError):
        EdgeChecksums(1, 2, 3, 0, 2)


# -- harden_branches -------------------------------------------------------

def test_harden_one_condbr():
    m = harden_branches(assign_uids(lift(parse(THREE))))
    assert len(m.blocks) == 9
    labels = [b.label for b in m.blocks]
    assert labels[1:7] == ["hb1_vt1", "hb1_vt2", "hb1_flt_t", "hb1_vf1", "hb1_vf2", "hb1_flt_f"]
    assert sum(isinstance(b.term, Trap) for b in m.blocks) == 2
    assert sorted(m.pinned.values()) == [D1_REG, D2_REG]
    uids = [b.uid for b in m.blocks]
    assert len(set(uids)) == len(uids)


def test_harden_without_condbr_is_identity():
    m = assign_uids(lift(parse("MOVI r1, 2\nHALT 0")))
    assert harden_branches(m) == m


def test_harden_requires_uids():
    with pytest.raises(MissingUid):
        harden_branches(lift(parse(THREE)))


def test_hardened_ir_matches_checksum_oracle():
    """Interpret the pass's checksum ops and compare with compute_checksum."""
    m = harden_branches(assign_uids(lift(parse(THREE))))
    src = m.blocks[0]
    cmp_ = src.instrs[0]
    for c in (0, 1):
        env = {cmp_.dst: c}
        for op in src.instrs[1:]:
            if isinstance(op, Const):
                env[op.dst] = op.value
            elif isinstance(op, BinOp):
                a, b = env[op.a], env[op.b]
                env[op.dst] = {"sub": a - b, "and": a & b, "or": a | b,
                               "xor": a ^ b, "add": a + b}[op.op] & WORD
            elif type(op).__name__ == "UnOp":
                env[op.dst] = ~env[op.a] & WORD
            elif type(op).__name__ == "ZExt":
                env[op.dst] = env[op.src]
        d1, d2 = sorted(m.pinned)
        true_uid = m.block("t").uid
        false_uid = next(b.uid for b in m.blocks if isinstance(b.term, Halt) and b.term.code == 0)
        ec = EdgeChecksums.of(src.uid, true_uid, false_uid)
        assert env[d1] == env[d2] == compute_checksum(c, ec)


# -- lowering --------------------------------------------------------------

def _fragments(asm):
    out = {}
    for ln in asm.lines:
        if ln.stmt is not None and ln.note and re.fullmatch(r"hb\d+", ln.note):
            out.setdefault(ln.note, []).append(ln.stmt)
    return out


@pytest.mark.parametrize("entry", corpus.all_entries(), ids=lambda e: e.name)
def test_fragment_shape(entry):
    m = lift(parse(entry.source))
    asm = hybrid_pipeline(parse(entry.source))
    frags = _fragments(asm)
    assert len(frags) == m.condbr_count()
    for stmts in frags.values():
        operand_cmps = [s for s in stmts if s.op == "CMP"
                        and not {s.rs, s.rt} & {D1_REG, D2_REG}]
        assert len(operand_cmps) == 2
        validation = [b for a, b in zip(stmts, stmts[1:])
                      if a.op == "CMP" and {a.rs, a.rt} & {D1_REG, D2_REG}
                      and Op[b.op].is_cond_branch]
        assert len(validation) >= 4


def test_register_pressure():
    n = 20
    instrs = tuple(Const(16 + i, i) for i in range(n))
    acc = 16
    tail = []
    for i in range(1, n):
        tail.append(BinOp("add", 100 + i, acc, 16 + i))
        acc = 100 + i
    m = IRModule((BasicBlock("b", instrs + tuple(tail), Halt(0)),), "b")
    with pytest.raises(RegisterPressure):
        lower(m)


def test_protected_regions_map_fragment_addresses(pincheck):
    asm = hybrid_pipeline(parse(pincheck.source))
    regions = protected_regions(asm)
    sources = {b.uid for b in assign_uids(lift(parse(pincheck.source))).blocks
               if isinstance(b.term, CondBr)}
    assert set(regions.values()) == sources
    img = assemble_unit(asm)
    assert all(0 <= a < img.size for a in regions)


# -- fault behaviour of the hybrid output ----------------------------------

@pytest.mark.parametrize("entry", corpus.all_entries(), ids=lambda e: e.name)
def test_skips_in_protected_regions_never_succeed(entry):
    asm = hybrid_pipeline(parse(entry.source))
    img = assemble_unit(asm)
    regions = protected_regions(asm)
    rep = campaign(img, entry.good_input, entry.bad_input, "skip", workers=1)
    inside = [o for o in rep.outcomes if o.pc in regions]
    assert inside
    for o in inside:
        assert o.classification.kind != SUCCESS
        assert o.classification.kind in ("other", "crash", "no_effect")
        if o.classification.kind == "other":
            assert o.classification.code == TRAP_CODE
    assert rep.successes == []


def test_two_fault_negative_control(bootloader):
    """A checksum skip plus a flip of the re-executed branch still gets through.

    The pass is built against one fault per run; this pins down that the
    protection is not accidentally stronger than claimed, and that each fault
    alone is caught.
    """
    asm = hybrid_pipeline(parse(bootloader.source))
    img = assemble_unit(asm)
    addrs = asm.addresses()
    mat = c2 = None
    for ln, addr in zip(asm.lines, addrs):
        st = ln.stmt
        if st is None or not ln.note or not st.opcode or not st.opcode.is_cond_branch:
            continue
        if re.search(r"_m\d+$", str(st.imm)) and mat is None:
            mat = addr
        if re.fullmatch(r"hb\d+_v[tf]1", str(st.imm)) and c2 is None:
            c2 = addr
    bad = bootloader.bad_input
    tr = run(img, bad).trace
    skip_at = next(e.offset for e in tr if e.pc == mat)
    assert run_with_fault(img, bad, FaultSpec.skip(skip_at)).outcome == Halted(TRAP_CODE)

    skipped = run_with_fault(img, bad, FaultSpec.skip(skip_at), record_trace=True).trace
    flip_at = next(e.offset for e in skipped if e.pc == c2)
    wins = [bit for bit in range(32)
            if run_with_faults(img, bad, [FaultSpec.skip(skip_at),
                                          FaultSpec.bitflip(flip_at, bit)]).outcome == Halted(1)]
    assert wins
    for bit in wins:
        alone = run_with_fault(img, bad, FaultSpec.bitflip(flip_at, bit)).outcome
        assert alone != Halted(1)


def test_straight_line_hybrid():
    src = "MOVI r10, 0x8000\nLD r1, [r10+0]\nMOVI r2, 1\nADD r1, r1, r2\nHALT 0"
    asm = hybrid_pipeline(parse(src))
    assert protected_regions(asm) == {}
    img = assemble_unit(asm)
    assert [decode(w) for w in img.code] == [decode(w) for w in assemble(src).code]


def test_hybrid_round_trip(pincheck):
    img = assemble_unit(hybrid_pipeline(parse(pincheck.source)))
    assert assemble(disassemble(img).text()).same_words(img)
