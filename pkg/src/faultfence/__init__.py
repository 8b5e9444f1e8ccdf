"""Fault-injection hardening for the FI32 toy ISA: assembler, emulator,
fault campaigns, binary patching and an IR-level branch checksum pass."""

from .asm import assemble, disassemble
from .emulator import FaultModel, FaultSpec, run, run_with_fault
from .faulter import VulnerabilityReport, campaign
from .patcher import HardenResult, harden_iterate

__version__ = "0.1.0"

__all__ = [
    "FaultModel", "FaultSpec", "HardenResult", "VulnerabilityReport", "assemble",
    "campaign", "disassemble", "harden_iterate", "run", "run_with_fault",
]
