"""leakscope: desk-scale analysis of bytecode instruction leakage in TEEs.

A victim simulator amplifies each bytecode instruction into a trace of
per-native-instruction measurements; the attacker pipeline profiles known
programs into token patterns, generalizes them into bounded matchers,
segments unlabeled traces by backtracking search, assigns candidate sets,
and optionally prunes them with a latency classifier. A separate analysis
computes candidate-set distributions for native execution from an ISA
feature dataset under realistic and idealized attacker models.
"""

__version__ = "0.1.0"

from .trace_model import (  # noqa: F401
    AttackerModel,
    ExecutionTrace,
    InstructionMeasurement,
    LabelSpan,
    MemAccess,
    Phase,
    Token,
    feature_key,
    tokenize,
)
