"""Miniature stack-bytecode victim: loader + interpreter that emit IM traces."""

from .bytecode import (
    OPCODES,
    BytecodeProgram,
    Function,
    Instruction,
    parse_program,
    parse_program_file,
)
from .expansion import (
    BranchExpansion,
    ExpansionSpec,
    LinearExpansion,
    LoopExpansion,
    NoiseModel,
    StepTemplate,
    default_spec,
)
from .simulator import interpret_phase, load_phase

__all__ = [
    "OPCODES", "BytecodeProgram", "Function", "Instruction",
    "parse_program", "parse_program_file",
    "BranchExpansion", "ExpansionSpec", "LinearExpansion", "LoopExpansion",
    "NoiseModel", "StepTemplate", "default_spec",
    "interpret_phase", "load_phase",
]
