"""Fault campaigns: enumerate every fault over the bad-input trace, simulate
each one and classify the outcome against the good/bad observables.

A fault is *successful* when the bad-input run halts with the good input's
code.  Everything else is still recorded so the report doubles as an audit
log; only the successes feed the patcher.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

from .asm import ProgramImage
from .emulator import (
    DEFAULT_MAX_STEPS,
    Crashed,
    FaultModel,
    FaultSpec,
    Halted,
    RunResult,
    run,
    run_with_fault,
)
from .isa import mnemonic

SUCCESS = "success"
NO_EFFECT = "no_effect"
CRASH = "crash"
OTHER = "other"


class FaulterError(Exception):
    pass


class IndistinguishableInputs(FaulterError):
    pass


class BaselineCrash(FaulterError):
    pass


@dataclass(frozen=True)
class Classification:
    kind: str
    reason: str | None = None
    code: int | None = None

    def __str__(self) -> str:
        if self.kind == CRASH:
            return f"crash({self.reason})"
        if self.kind == OTHER:
            return f"other(0x{self.code:x})"
        return self.kind


@dataclass(frozen=True)
class FaultOutcome:
    spec: FaultSpec
    classification: Classification
    pc: int
    disasm: str

    @property
    def success(self) -> bool:
        return self.classification.kind == SUCCESS

    def to_dict(self) -> dict:
        d = {"model": self.spec.model.value, "trace_offset": self.spec.trace_offset}
        if self.spec.bit is not None:
            d["bit"] = self.spec.bit
        d["pc"] = self.pc
        d["disasm"] = self.disasm
        d["classification"] = self.classification.kind
        if self.classification.reason is not None:
            d["reason"] = self.classification.reason
        if self.classification.code is not None:
            d["code"] = self.classification.code
        return d

    @classmethod
    def from_dict(cls, d: dict) -> FaultOutcome:
        model = FaultModel(d["model"])
        spec = FaultSpec(d["trace_offset"], d.get("bit"), model)
        cls_ = Classification(d["classification"], d.get("reason"), d.get("code"))
        return cls(spec, cls_, d["pc"], d["disasm"])


@dataclass
class VulnerabilityReport:
    model: FaultModel
    good_observable: int
    bad_observable: int
    trace_length: int
    outcomes: list[FaultOutcome] = field(default_factory=list)

    @property
    def campaign_runs(self) -> int:
        return len(self.outcomes)

    @property
    def successes(self) -> list[FaultOutcome]:
        return [o for o in self.outcomes if o.success]

    def counts(self) -> dict[str, int]:
        out = {SUCCESS: 0, NO_EFFECT: 0, CRASH: 0, OTHER: 0}
        for o in self.outcomes:
            out[o.classification.kind] += 1
        return out

    def success_sites(self) -> list[int]:
        return sorted({o.pc for o in self.successes})

    def to_dict(self) -> dict:
        return {
            "model": self.model.value,
            "good_observable": self.good_observable,
            "bad_observable": self.bad_observable,
            "trace_length": self.trace_length,
            "campaign_runs": self.campaign_runs,
            "outcomes": [o.to_dict() for o in self.outcomes],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> VulnerabilityReport:
        return cls(FaultModel(d["model"]), d["good_observable"], d["bad_observable"],
                   d["trace_length"], [FaultOutcome.from_dict(o) for o in d["outcomes"]])


def observables(image: ProgramImage, good_input, bad_input,
                max_steps: int = DEFAULT_MAX_STEPS) -> tuple[int, int]:
    """Fault-free halt codes ``(good, bad)`` of the two inputs."""
    good = run(image, good_input, max_steps, record_trace=False)
    bad = run(image, bad_input, max_steps, record_trace=False)
    for name, res in (("good", good), ("bad", bad)):
        if not res.halted:
            raise BaselineCrash(f"fault-free {name}-input run crashed: {res.outcome.reason.value}")
    if good.code == bad.code:
        raise IndistinguishableInputs(f"both inputs halt with code {good.code}")
    return good.code, bad.code


def enumerate_faults(image: ProgramImage, bad_input, model: FaultModel | str,
                     max_steps: int = DEFAULT_MAX_STEPS) -> list[FaultSpec]:
    model = FaultModel(model)
    if not image.code:
        return []
    res = run(image, bad_input, max_steps)
    if not res.halted:
        raise BaselineCrash(f"fault-free bad-input run crashed: {res.outcome.reason.value}")
    return _specs(len(res.trace), model)


def _specs(length: int, model: FaultModel) -> list[FaultSpec]:
    if model is FaultModel.SKIP:
        return [FaultSpec.skip(i) for i in range(length)]
    return [FaultSpec.bitflip(i, b) for i in range(length) for b in range(32)]


def classify(result: RunResult, good: int, bad: int) -> Classification:
    out = result.outcome
    if isinstance(out, Crashed):
        return Classification(CRASH, reason=out.reason.value)
    assert isinstance(out, Halted)
    if out.code == good:
        return Classification(SUCCESS)
    if out.code == bad:
        return Classification(NO_EFFECT)
    return Classification(OTHER, code=out.code)


def default_workers() -> int:
    env = os.environ.get("FF_WORKERS")
    if env:
        return max(1, int(env))
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:  # pragma: no cover - non-Linux
        return os.cpu_count() or 1


def _simulate(args) -> list[Classification]:
    image, bad_input, specs, good, bad, max_steps = args
    return [classify(run_with_fault(image, bad_input, s, max_steps), good, bad) for s in specs]


def campaign(image: ProgramImage, good_input, bad_input, model: FaultModel | str,
             max_steps: int = DEFAULT_MAX_STEPS, workers: int | None = None) -> VulnerabilityReport:
    """Simulate every fault of ``model`` on the bad-input run."""
    model = FaultModel(model)
    good, bad = observables(image, good_input, bad_input, max_steps)
    tr = run(image, bad_input, max_steps).trace
    specs = _specs(len(tr), model)
    workers = default_workers() if workers is None else max(1, workers)
    bad_input = list(bad_input)

    if workers == 1 or len(specs) < 64:
        results = _simulate((image, bad_input, specs, good, bad, max_steps))
    else:
        # contiguous chunks keep aggregation order identical to the serial path
        nchunks = min(len(specs), workers * 4)
        size = -(-len(specs) // nchunks)
        chunks = [specs[i:i + size] for i in range(0, len(specs), size)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = pool.map(_simulate, [(image, bad_input, c, good, bad, max_steps)
                                         for c in chunks])
            results = [c for part in parts for c in part]

    outcomes = [
        FaultOutcome(spec, cl, tr[spec.trace_offset].pc, mnemonic(tr[spec.trace_offset].word))
        for spec, cl in zip(specs, results)
    ]
    outcomes.sort(key=lambda o: o.spec.key)
    return VulnerabilityReport(model, good, bad, len(tr), outcomes)
