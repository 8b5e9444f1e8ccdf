"""Local hardening patterns and the fault -> patch -> re-fault fixpoint loop.

Each vulnerable instruction is replaced in the disassembled listing by a
redundant fragment; the assembler then recomputes every branch displacement,
so surrounding code is untouched apart from shifted addresses.

Fragments (``rX``/``rY`` are scratch registers, saved and restored on the stack):

* ``DupMove``       ``MOVI``/``MOV`` executed twice.
* ``VerifiedLoad``  load, reload into ``rX``, compare, ``TRAP`` on mismatch;
  flags are preserved with ``PUSHF``/``POPF``.
* ``DoubleCompare`` compare twice, compare the two pushed flag words, branch
  to the fault handler on mismatch, then compare again (twice) to leave the
  original flags behind.
* ``GuardedBranch`` the fall-through path re-checks the condition in line; the
  taken path goes through an out-of-line stub at the end of the code that
  re-checks it with the inverse branch.  Mismatches go to the fault handler.

The fault handler is a single shared ``TRAP`` placed in a dead slot after an
unconditional terminator, together with the stubs.  Check
branches that jump to it are never taken on a fault-free path, so corrupting
their displacement is harmless; a ``BEQ`` over a local ``TRAP`` would
instead have displacement 1 and flip into ``HALT 1`` with one bit.
"""

from __future__ import annotations

import enum
import itertools
import json
import logging
from dataclasses import dataclass, field

from .asm import AsmLine, AsmUnit, ProgramImage, Stmt, assemble_unit, disassemble
from .emulator import DEFAULT_MAX_STEPS, FaultModel, run
from .faulter import FaultOutcome, VulnerabilityReport, campaign, observables
from .isa import INVERSE_BRANCH, SP, Op

log = logging.getLogger(__name__)


class PatchKind(str, enum.Enum):
    DUP_MOVE = "DupMove"
    VERIFIED_LOAD = "VerifiedLoad"
    DOUBLE_COMPARE = "DoubleCompare"
    GUARDED_BRANCH = "GuardedBranch"


class PatchError(Exception):
    pass


class OverlappingPatches(PatchError):
    pass


class LabelCollision(PatchError):
    pass


class SemanticsBroken(PatchError):
    """A patched image changed a fault-free observable."""


FAULT_HANDLER = "fault_handler"


@dataclass(frozen=True)
class PatchPattern:
    kind: PatchKind
    site: int
    replacement: tuple[AsmLine, ...]
    scratch: tuple[int, ...] = ()
    tail: tuple[AsmLine, ...] = ()  # out-of-line lines placed after the code

    @property
    def labels(self) -> list[str]:
        return [ln.label for ln in self.replacement + self.tail if ln.label is not None]

    @property
    def uses_handler(self) -> bool:
        return any(ln.stmt is not None and ln.stmt.imm == FAULT_HANDLER
                   for ln in self.replacement + self.tail)


@dataclass(frozen=True)
class Unpatchable:
    site: int
    instruction: str
    reason: str = "no pattern for this opcode"


class _Labels:
    """Fresh label source that never returns a name already in use."""

    def __init__(self, taken):
        self.taken = set(taken)

    def fresh(self, stem: str) -> str:
        for n in itertools.count():
            name = f"{stem}_{n}" if n else stem
            if name not in self.taken:
                self.taken.add(name)
                return name
        raise AssertionError("unreachable")


def _scratch(exclude, count: int) -> tuple[int, ...]:
    free = [r for r in range(SP) if r not in set(exclude)]
    return tuple(free[:count])


def _line(op: str, rd=0, rs=0, rt=0, imm=0, label=None, note=None) -> AsmLine:
    return AsmLine(label, Stmt(op, rd, rs, rt, imm), note=note)


def _dup_move(site: int, st: Stmt) -> PatchPattern:
    note = f"DupMove@{site:04x}"
    return PatchPattern(PatchKind.DUP_MOVE, site,
                        (AsmLine(None, st, note=note), AsmLine(None, st, note=note)))


def _verified_load(site: int, st: Stmt, labels: _Labels) -> PatchPattern | Unpatchable:
    rd, rs, imm = st.rd, st.rs, st.imm
    if SP in (rd, rs):
        return Unpatchable(site, st.text(), "stack-relative load")
    (rx,) = _scratch((rd, rs), 1)
    ok = labels.fresh(f"vl_{site:04x}_ok")
    note = f"VerifiedLoad@{site:04x}"
    if rd != rs:
        body = [
            _line("LD", rd=rd, rs=rs, imm=imm),
            _line("PUSH", rs=rx),
            _line("PUSHF"),
            _line("LD", rd=rx, rs=rs, imm=imm),
        ]
    else:
        # the first load clobbers its own base, so load the check copy first
        body = [
            _line("PUSH", rs=rx),
            _line("PUSHF"),
            _line("LD", rd=rx, rs=rs, imm=imm),
            _line("LD", rd=rd, rs=rs, imm=imm),
        ]
    body += [
        _line("CMP", rs=rd, rt=rx),
        _line("BEQ", imm=ok),
        _line("TRAP"),
        _line("POPF", label=ok),
        _line("POP", rd=rx),
    ]
    return PatchPattern(PatchKind.VERIFIED_LOAD, site,
                        tuple(AsmLine(ln.label, ln.stmt, note=note) for ln in body), (rx,))


def _double_compare(site: int, st: Stmt, labels: _Labels) -> PatchPattern | Unpatchable:
    a, b = st.rs, st.rt
    if SP in (a, b):
        return Unpatchable(site, st.text(), "compare reads the stack pointer")
    rx, ry = _scratch((a, b), 2)
    note = f"DoubleCompare@{site:04x}"
    body = [
        _line("CMP", rs=a, rt=b),
        _line("PUSH", rs=rx),
        _line("PUSH", rs=ry),
        _line("PUSHF"),
        _line("CMP", rs=a, rt=b),
        _line("PUSHF"),
        _line("POP", rd=rx),
        _line("POP", rd=ry),
        _line("CMP", rs=rx, rt=ry),
        _line("BNE", imm=FAULT_HANDLER),
        _line("POP", rd=ry),
        _line("POP", rd=rx),
        # the flag-word check left Z=1 behind; a pair so one skip cannot leave it
        _line("CMP", rs=a, rt=b),
        _line("CMP", rs=a, rt=b),
    ]
    return PatchPattern(PatchKind.DOUBLE_COMPARE, site,
                        tuple(AsmLine(ln.label, ln.stmt, note=note) for ln in body), (rx, ry))


def _guarded_branch(site: int, st: Stmt, labels: _Labels) -> PatchPattern | Unpatchable:
    if not isinstance(st.imm, str):
        return Unpatchable(site, st.text(), "branch target is not symbolic")
    if st.imm == FAULT_HANDLER or st.imm.startswith("gb_"):
        # wrapping a guard's own branches again only adds displacements to corrupt
        return Unpatchable(site, st.text(), "branch is part of a guard fragment")
    op = Op[st.op]
    inv = INVERSE_BRANCH[op].name
    taken = labels.fresh(f"gb_{site:04x}_t")
    note = f"GuardedBranch@{site:04x}"
    body = (
        _line(op.name, imm=taken, note=note),
        _line(op.name, imm=FAULT_HANDLER, note=note),  # fall-through: condition must be false
    )
    tail = (
        _line(inv, imm=FAULT_HANDLER, label=taken, note=note),  # taken: condition must be true
        _line("JMP", imm=st.imm, note=note),
        _line("TRAP", note=note),
    )
    return PatchPattern(PatchKind.GUARDED_BRANCH, site, body, tail=tail)


def select_pattern(vuln: FaultOutcome | int, asm: AsmUnit,
                   taken_labels=None) -> PatchPattern | Unpatchable:
    """Pick the hardened fragment for the instruction at ``vuln.pc``.

    ``taken_labels`` lets a caller reserve labels across several selections.
    """
    site = vuln if isinstance(vuln, int) else vuln.pc
    index = asm.code_line_at().get(site)
    if index is None:
        raise PatchError(f"no instruction at 0x{site:04x}")
    st = asm.lines[index].stmt
    labels = taken_labels if isinstance(taken_labels, _Labels) else _Labels(asm.labels())
    op = st.opcode
    if op in (Op.MOVI, Op.MOV):
        return _dup_move(site, st)
    if op is Op.LD:
        return _verified_load(site, st, labels)
    if op is Op.CMP:
        return _double_compare(site, st, labels)
    if op is not None and op.is_cond_branch:
        return _guarded_branch(site, st, labels)
    return Unpatchable(site, st.text())


def apply_patches(asm: AsmUnit, patterns) -> AsmUnit:
    """Replace each pattern's site line by its fragment.

    Out-of-line tails, and the shared fault handler when a fragment needs
    it, go into a dead slot chosen by :func:`_tail_anchor`.
    """
    patterns = sorted(patterns, key=lambda p: p.site)
    index_of = asm.code_line_at()
    by_index: dict[int, PatchPattern] = {}
    existing = set(asm.labels())
    new_labels: set[str] = set()
    for p in patterns:
        idx = index_of.get(p.site)
        if idx is None:
            raise PatchError(f"no instruction at 0x{p.site:04x}")
        if idx in by_index:
            raise OverlappingPatches(f"two patches target 0x{p.site:04x}")
        for lab in p.labels:
            if lab in existing or lab in new_labels:
                raise LabelCollision(f"fragment label {lab!r} already in use")
            new_labels.add(lab)
        by_index[idx] = p

    tail: list[AsmLine] = [ln for p in patterns for ln in p.tail]
    if any(p.uses_handler for p in patterns) and FAULT_HANDLER not in existing:
        tail.append(AsmLine(FAULT_HANDLER, Stmt("TRAP")))
    anchor = _tail_anchor(asm, min(by_index)) if tail else None

    out: list[AsmLine] = []
    for i, ln in enumerate(asm.lines):
        p = by_index.get(i)
        if p is None:
            out.append(ln)
        else:
            if ln.label is not None:
                out.append(AsmLine(ln.label, None, ln.lineno))
            out.extend(p.replacement)
        if i == anchor:
            out.extend(tail)
    if tail and anchor == len(asm.lines):
        out.extend(tail)
    return AsmUnit(out)


def _tail_anchor(asm: AsmUnit, first_site_index: int) -> int:
    """Line index after which out-of-line code goes.

    Right after an existing fault handler, else after the first HALT, TRAP or
    JMP at or below the first patched site: a dead slot close to the patches.
    Every stub ends in ``TRAP`` and the handler closes the first slot, so
    nothing that falls into the slot runs off its end.
    """
    for i, ln in enumerate(asm.lines):
        if ln.label == FAULT_HANDLER:
            while asm.lines[i].stmt is None:
                i += 1
            return i
    for i in range(first_site_index, len(asm.lines)):
        st = asm.lines[i].stmt
        if st is not None and st.op == ".org":
            break
        if st is not None and st.opcode in (Op.HALT, Op.TRAP, Op.JMP):
            return i
    # no terminator: fall back to the end of the code
    for i in range(len(asm.lines) - 1, -1, -1):
        st = asm.lines[i].stmt
        if st is not None and st.op != ".org" and st.op != ".word":
            return i
    return len(asm.lines)


def patch_image(image: ProgramImage, sites) -> tuple[ProgramImage, list[PatchPattern],
                                                     list[Unpatchable]]:
    """Disassemble, patch every patchable site, reassemble."""
    asm = disassemble(image)
    labels = _Labels(asm.labels())
    patterns, skipped = [], []
    for site in sorted(set(sites)):
        p = select_pattern(site, asm, labels)
        (patterns if isinstance(p, PatchPattern) else skipped).append(p)
    if not patterns:
        return image, [], skipped
    return assemble_unit(apply_patches(asm, patterns)), patterns, skipped


@dataclass
class IterationRecord:
    iteration: int
    successes: int
    patches: int
    sites: list[int] = field(default_factory=list)
    kinds: list[str] = field(default_factory=list)
    code_words: int = 0


@dataclass
class HardenResult:
    final_image: ProgramImage
    model: FaultModel
    iterations: int
    converged: bool
    residual: list[FaultOutcome]
    per_iteration: list[IterationRecord]
    initial_report: VulnerabilityReport
    final_report: VulnerabilityReport

    @property
    def initial_successes(self) -> int:
        return len(self.initial_report.successes)

    @property
    def final_successes(self) -> int:
        return len(self.final_report.successes)

    def to_dict(self) -> dict:
        return {
            "model": self.model.value,
            "converged": self.converged,
            "iterations": self.iterations,
            "initial_successes": self.initial_successes,
            "final_successes": self.final_successes,
            "final_code_words": self.final_image.size,
            "per_iteration": [
                {"iteration": r.iteration, "successes": r.successes, "patches": r.patches,
                 "code_words": r.code_words, "sites": r.sites, "kinds": r.kinds}
                for r in self.per_iteration
            ],
            "residual": [o.to_dict() for o in self.residual],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def harden_iterate(image: ProgramImage, good_input, bad_input, model: FaultModel | str,
                   max_iters: int = 10, max_steps: int = DEFAULT_MAX_STEPS,
                   workers: int | None = None) -> HardenResult:
    """Run fault campaigns and patch every successful site until nothing is left.

    Stops when a campaign finds no successes (converged), when every success
    sits on an instruction without a pattern, or after ``max_iters`` campaigns.
    """
    model = FaultModel(model)
    if max_iters < 1:
        raise ValueError("max_iters must be positive")
    expected = observables(image, good_input, bad_input, max_steps)
    current = image
    records: list[IterationRecord] = []
    first = None
    report = None
    converged = False
    for it in range(1, max_iters + 1):
        report = campaign(current, good_input, bad_input, model, max_steps, workers)
        first = first or report
        succ = report.successes
        log.info("iteration %d: %d successes over %d runs", it, len(succ), report.campaign_runs)
        if not succ:
            records.append(IterationRecord(it, 0, 0, code_words=current.size))
            converged = True
            break
        if it == max_iters:
            records.append(IterationRecord(it, len(succ), 0, code_words=current.size))
            break
        patched, patterns, _ = patch_image(current, report.success_sites())
        records.append(IterationRecord(it, len(succ), len(patterns),
                                       [p.site for p in patterns],
                                       [p.kind.value for p in patterns], current.size))
        if not patterns:
            break
        _check_semantics(patched, good_input, bad_input, expected, max_steps)
        current = patched

    residual = [] if converged else report.successes
    return HardenResult(current, model, len(records), converged, residual, records, first, report)


def _check_semantics(image, good_input, bad_input, expected, max_steps):
    got = tuple(run(image, inp, max_steps, record_trace=False).code
                for inp in (good_input, bad_input))
    if got != tuple(expected):
        raise SemanticsBroken(f"fault-free observables changed from {expected} to {got}")
