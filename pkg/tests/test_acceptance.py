"""Acceptance criteria 1-10.  Each test records one PASS/FAIL line."""

import random
import re
import time
from contextlib import contextmanager

import pytest

from faultfence import corpus, driver
from faultfence.asm import assemble, assemble_unit, disassemble, parse
from faultfence.emulator import TRAP_CODE, run
from faultfence.faulter import CRASH, NO_EFFECT, OTHER, campaign
from faultfence.irpass import (
    D1_REG,
    D2_REG,
    EdgeChecksums,
    compute_checksum,
    hybrid_pipeline,
    lift,
    protected_regions,
)
from faultfence.isa import FIELDS, IMM_RANGE, Instruction, Op, decode, encode
from faultfence.patcher import harden_iterate

from .conftest import ACCEPTANCE

ENTRIES = {e.name: e for e in corpus.all_entries()}
SITE_OPS = {Op.CMP, Op.MOV, Op.MOVI, Op.LD, Op.BEQ, Op.BNE, Op.BLT, Op.BGE}


@contextmanager
def criterion(n, title):
    info = {}
    t0 = time.perf_counter()
    try:
        yield info
    except BaseException:
        ACCEPTANCE[n] = f"[FAIL] {n:>2}. {title} {info.get('detail', '')}".rstrip()
        print(ACCEPTANCE[n])
        raise
    dt = time.perf_counter() - t0
    ACCEPTANCE[n] = f"[PASS] {n:>2}. {title} ({dt:.2f}s) {info.get('detail', '')}".rstrip()
    print(ACCEPTANCE[n])


def _timed(fn, *a, **kw):
    t0 = time.perf_counter()
    out = fn(*a, **kw)
    return out, time.perf_counter() - t0


@pytest.fixture(scope="module")
def hardened():
    """(name, model) -> (HardenResult, seconds)."""
    out = {}
    for name, e in ENTRIES.items():
        for model in ("skip", "bitflip"):
            out[name, model] = _timed(harden_iterate, e.image(), e.good_input, e.bad_input,
                                      model, 10)
    return out


@pytest.fixture(scope="module")
def hybrids():
    return {name: hybrid_pipeline(parse(e.source)) for name, e in ENTRIES.items()}


def test_c1_vulnerability_existence():
    with criterion(1, "vulnerability existence") as info:
        parts = []
        for name, e in ENTRIES.items():
            img = e.image()
            rep, dt = _timed(campaign, img, e.good_input, e.bad_input, "skip")
            assert rep.successes, name
            assert dt < 10, (name, dt)
            for o in rep.successes:
                assert decode(img.code[o.pc]).op in SITE_OPS, (name, o.disasm)
            parts.append(f"{name}={len(rep.successes)}")
        info["detail"] = "successes: " + ", ".join(parts)


def test_c2_skip_fixpoint(hardened):
    with criterion(2, "skip-model fixpoint") as info:
        parts = []
        for name, e in ENTRIES.items():
            res, dt = hardened[name, "skip"]
            assert res.converged and res.residual == []
            assert res.iterations <= 10 and dt < 60
            final = campaign(res.final_image, e.good_input, e.bad_input, "skip")
            assert final.successes == []
            parts.append(f"{name}: {res.initial_successes}->0 in {res.iterations} it, {dt:.2f}s")
        info["detail"] = "; ".join(parts)


def test_c3_bitflip_mitigation(hardened):
    with criterion(3, "bit-flip mitigation >= 50%") as info:
        parts = []
        ok = True
        for name in ENTRIES:
            res, dt = hardened[name, "bitflip"]
            ratio = res.final_successes / res.initial_successes
            parts.append(f"{name}: {res.initial_successes}->{res.final_successes} "
                         f"(ratio {ratio:.2f}, {dt:.2f}s)")
            ok &= ratio <= 0.5 and dt < 300
        info["detail"] = "; ".join(parts)
        assert ok, info["detail"]


def test_c4_hybrid_detection(hybrids):
    with criterion(4, "hybrid detection") as info:
        parts = []
        for name, e in ENTRIES.items():
            asm = hybrids[name]
            img = assemble_unit(asm)
            regions = protected_regions(asm)
            rep = campaign(img, e.good_input, e.bad_input, "skip")
            inside = [o for o in rep.outcomes if o.pc in regions]
            assert inside
            assert not [o for o in rep.successes if o.pc in regions]
            for o in inside:
                k = o.classification
                assert k.kind in (CRASH, NO_EFFECT) or (k.kind == OTHER and k.code == TRAP_CODE)
            parts.append(f"{name}: {len(inside)} in-fragment skips, 0 successes")
        info["detail"] = "; ".join(parts)


def test_c5_overhead_ordering(hardened, hybrids):
    with criterion(5, "overhead ordering") as info:
        parts = []
        for name, e in ENTRIES.items():
            orig = e.image()
            fp = driver.overhead(orig, hardened[name, "skip"][0].final_image,
                                 driver.FAULTER_PATCHER).overhead_pct
            hy = driver.overhead(orig, assemble_unit(hybrids[name]), driver.HYBRID).overhead_pct
            parts.append(f"{name}: FaulterPatcher {fp:.2f}% < Hybrid {hy:.2f}%")
            assert 0 < fp < hy < 300, parts[-1]
        info["detail"] = "; ".join(parts)


def test_c6_checksum_oracle():
    with criterion(6, "checksum oracle equivalence") as info:
        t0 = time.perf_counter()
        ec = EdgeChecksums.of(0x3, 0x5, 0x9)
        assert compute_checksum(1, ec) == 0x6
        assert compute_checksum(0, ec) == 0xA
        rng = random.Random(6)
        for _ in range(1000):
            s, t, f = (rng.randrange(1, 1 << 32) for _ in range(3))
            c = rng.randrange(2)
            expect = (t ^ s) if c else (f ^ s)
            assert compute_checksum(c, EdgeChecksums.of(s, t, f)) == expect
        assert time.perf_counter() - t0 < 1
        info["detail"] = "1000 random tuples + worked examples"


def test_c7_semantic_preservation(hardened, hybrids):
    with criterion(7, "semantic preservation") as info:
        t0 = time.perf_counter()
        n = 0
        for name, e in ENTRIES.items():
            orig = e.image()
            images = [hardened[name, m][0].final_image for m in ("skip", "bitflip")]
            images.append(assemble_unit(hybrids[name]))
            for img in images:
                for inp in (e.good_input, e.bad_input):
                    assert run(img, inp).outcome == run(orig, inp).outcome
                    n += 1
        assert time.perf_counter() - t0 < 5
        info["detail"] = f"{n} runs"


def test_c8_fragment_structure(hybrids):
    with criterion(8, "hardened branch fragment structure") as info:
        parts = []
        for name, e in ENTRIES.items():
            asm = hybrids[name]
            frags = {}
            for ln in asm.lines:
                if ln.stmt is not None and ln.note and re.fullmatch(r"hb\d+", ln.note):
                    frags.setdefault(ln.note, []).append(ln.stmt)
            assert len(frags) == lift(parse(e.source)).condbr_count()
            for stmts in frags.values():
                cmps = [s for s in stmts if s.op == "CMP" and not {s.rs, s.rt} & {D1_REG, D2_REG}]
                checks = [b for a, b in zip(stmts, stmts[1:]) if a.op == "CMP"
                          and {a.rs, a.rt} & {D1_REG, D2_REG} and Op[b.op].is_cond_branch]
                assert len(cmps) == 2 and len(checks) >= 4
            parts.append(f"{name}: {len(frags)} fragments, 2 cmp / 4 validation jcc each")
        info["detail"] = "; ".join(parts)


def test_c9_round_trips(hardened, hybrids):
    with criterion(9, "toolchain round-trips") as info:
        rng = random.Random(9)
        ops = list(Op)
        for _ in range(100_000):
            op = rng.choice(ops)
            bounds = IMM_RANGE.get(op.fmt)
            ins = Instruction(op, imm=rng.randint(*bounds) if bounds else 0,
                              **{f: rng.randrange(16) for f in FIELDS[op.fmt]})
            assert decode(encode(ins)) == ins
        images = [e.image() for e in ENTRIES.values()]
        images += [r.final_image for r, _ in hardened.values()]
        images += [assemble_unit(a) for a in hybrids.values()]
        for img in images:
            assert assemble(disassemble(img).text()).same_words(img)
        info["detail"] = f"1e5 instructions, {len(images)} images"


def test_c10_determinism():
    with criterion(10, "determinism serial vs parallel") as info:
        for name, e in ENTRIES.items():
            img = e.image()
            for model in ("skip", "bitflip"):
                a = campaign(img, e.good_input, e.bad_input, model, workers=1).to_json()
                b = campaign(img, e.good_input, e.bad_input, model, workers=4).to_json()
                c = campaign(img, e.good_input, e.bad_input, model, workers=4).to_json()
                assert a == b == c
            h1 = harden_iterate(img, e.good_input, e.bad_input, "bitflip", workers=1).to_json()
            h2 = harden_iterate(img, e.good_input, e.bad_input, "bitflip", workers=4).to_json()
            assert h1 == h2
        info["detail"] = "campaign and harden JSON byte-identical"
