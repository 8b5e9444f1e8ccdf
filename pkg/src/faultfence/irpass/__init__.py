"""Hybrid path: lift assembly to a CFG IR, harden conditional branches with
edge checksums, lower back to FI32."""

from ..asm import AsmUnit
from .harden import (
    D1_REG,
    D2_REG,
    EdgeChecksums,
    assign_uids,
    compute_checksum,
    harden_branches,
)
from .ir import (
    BasicBlock,
    IndirectFlow,
    IRError,
    IRModule,
    MissingUid,
    RegisterPressure,
    UnsupportedShape,
)
from .lift import lift
from .lower import allocate, lower, protected_regions


def hybrid_pipeline(asm: AsmUnit) -> AsmUnit:
    """lift -> assign_uids -> harden_branches -> lower."""
    return lower(harden_branches(assign_uids(lift(asm))))


__all__ = [
    "BasicBlock", "D1_REG", "D2_REG", "EdgeChecksums", "IRError", "IRModule",
    "IndirectFlow", "MissingUid", "RegisterPressure", "UnsupportedShape", "allocate",
    "assign_uids", "compute_checksum", "harden_branches", "hybrid_pipeline", "lift",
    "lower", "protected_regions",
]
