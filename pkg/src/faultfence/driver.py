"""Orchestration behind the CLI: configuration, overhead accounting and the
harden / hybrid pipelines with their on-disk artifacts.

Exit status contract: 0 when ``harden`` converged with no residual, or when
the hybrid verification campaign found no success inside a protected branch;
1 when it did not; 2 on any error (an error JSON is written).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from . import corpus
from .asm import AsmUnit, ProgramImage, assemble_unit, disassemble, load_program, parse, write_image
from .emulator import DEFAULT_MAX_STEPS, FaultModel, run
from .faulter import VulnerabilityReport, campaign
from .irpass import hybrid_pipeline, protected_regions
from .patcher import HardenResult, harden_iterate

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RESIDUAL = 1
EXIT_ERROR = 2

FAULTER_PATCHER = "FaulterPatcher"
HYBRID = "Hybrid"


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    fault_model: FaultModel = FaultModel.SKIP
    max_iters: int = 10
    max_steps: int = DEFAULT_MAX_STEPS
    workers: int | None = None  # None: FF_WORKERS or all available CPUs
    good_input: tuple[int, ...] = ()
    bad_input: tuple[int, ...] = ()
    out_dir: Path = Path("out")

    def __post_init__(self):
        self.fault_model = FaultModel(self.fault_model)
        self.good_input = tuple(self.good_input)
        self.bad_input = tuple(self.bad_input)
        self.out_dir = Path(self.out_dir)
        if not self.good_input or not self.bad_input:
            raise ConfigError("good and bad inputs must be non-empty")
        if self.good_input == self.bad_input:
            raise ConfigError("good and bad inputs must differ")
        for name in ("max_iters", "max_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.workers is not None and self.workers < 1:
            raise ConfigError("workers must be positive")


@dataclass(frozen=True)
class OverheadReport:
    original_size: int
    hardened_size: int
    overhead_pct: float
    method: str

    def to_dict(self) -> dict:
        return {"method": self.method, "original_size": self.original_size,
                "hardened_size": self.hardened_size,
                "overhead_pct": round(self.overhead_pct, 2)}


def overhead(original: ProgramImage, hardened: ProgramImage, method: str) -> OverheadReport:
    if method not in (FAULTER_PATCHER, HYBRID):
        raise ValueError(f"unknown method {method!r}")
    n, h = original.size, hardened.size
    if n == 0:
        raise ValueError("original image has no code")
    return OverheadReport(n, h, 100.0 * (h - n) / n, method)


@dataclass
class Program:
    image: ProgramImage
    asm: AsmUnit
    good_input: tuple[int, ...] = ()
    bad_input: tuple[int, ...] = ()


def load(spec: str) -> Program:
    """A program from a path (assembly text or binary image) or ``corpus:<name>``.

    Corpus programs also carry their declared inputs.
    """
    if spec.startswith("corpus:"):
        e = corpus.load(spec.split(":", 1)[1])
        asm = parse(e.source)
        return Program(assemble_unit(asm), asm, e.good_input, e.bad_input)
    path = Path(spec)
    if not path.is_file():
        raise FileNotFoundError(f"no such program: {spec}")
    if path.read_bytes()[:4] == b"FI32":
        image = load_program(path)
        return Program(image, disassemble(image))
    asm = parse(path.read_text(encoding="utf-8"))
    return Program(assemble_unit(asm), asm)


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def _write_program(out: Path, stem: str, image: ProgramImage, asm: AsmUnit | None = None) -> None:
    write_image(image, out / f"{stem}.fi32")
    (out / f"{stem}.s").write_text((asm or disassemble(image)).text(), encoding="utf-8")


@dataclass
class HardenOutcome:
    result: HardenResult
    overhead: OverheadReport
    exit_code: int


def cmd_harden(config: Config, program: Program) -> HardenOutcome:
    res = harden_iterate(program.image, config.good_input, config.bad_input, config.fault_model,
                         config.max_iters, config.max_steps, config.workers)
    ov = overhead(program.image, res.final_image, FAULTER_PATCHER)
    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    _write_program(out, "hardened", res.final_image)
    _write_json(out / "harden_report.json", res.to_dict())
    _write_json(out / "overhead.json", ov.to_dict())
    code = EXIT_OK if res.converged and not res.residual else EXIT_RESIDUAL
    log.info("harden: %d -> %d successes, overhead %.2f%%", res.initial_successes,
             res.final_successes, ov.overhead_pct)
    return HardenOutcome(res, ov, code)


@dataclass
class HybridOutcome:
    image: ProgramImage
    asm: AsmUnit
    overhead: OverheadReport
    report: VulnerabilityReport
    protected_successes: list = field(default_factory=list)
    other_successes: list = field(default_factory=list)
    exit_code: int = EXIT_OK

    def summary(self) -> dict:
        return {
            "method": HYBRID,
            "model": self.report.model.value,
            "campaign_runs": self.report.campaign_runs,
            "successes": len(self.report.successes),
            "protected_branch_successes": [o.to_dict() for o in self.protected_successes],
            "other_successes": [o.to_dict() for o in self.other_successes],
            "overhead": self.overhead.to_dict(),
        }


def cmd_hybrid(config: Config, program: Program) -> HybridOutcome:
    asm = hybrid_pipeline(program.asm)
    image = assemble_unit(asm)
    for inp in (config.good_input, config.bad_input):
        before = run(program.image, inp, config.max_steps, record_trace=False).outcome
        after = run(image, inp, config.max_steps, record_trace=False).outcome
        if before != after:
            raise RuntimeError(f"hybrid output changed the fault-free result: {before} -> {after}")
    report = campaign(image, config.good_input, config.bad_input, config.fault_model,
                      config.max_steps, config.workers)
    regions = protected_regions(asm)
    prot = [o for o in report.successes if o.pc in regions]
    other = [o for o in report.successes if o.pc not in regions]
    ov = overhead(program.image, image, HYBRID)
    outcome = HybridOutcome(image, asm, ov, report, prot, other,
                            EXIT_OK if not prot else EXIT_RESIDUAL)
    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    _write_program(out, "hybrid", image, asm)
    (out / "hybrid_campaign.json").write_text(report.to_json(), encoding="utf-8")
    _write_json(out / "hybrid_summary.json", outcome.summary())
    _write_json(out / "overhead.json", ov.to_dict())
    return outcome


def error_payload(exc: BaseException) -> dict:
    return {"error": type(exc).__name__, "message": str(exc)}
