"""Exception hierarchy shared by all leakscope subsystems.

Every error carries a short machine-parsable ``code`` so the CLI can emit a
single stable error line regardless of which stage failed.
"""

from __future__ import annotations


class LeakscopeError(Exception):
    """Base class; ``code`` is a short stable identifier for scripting."""

    code = "generic"

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class ParseError(LeakscopeError):
    """Malformed input file (trace, dataset, pattern db, matcher db, program)."""

    code = "parse"

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ProgramError(LeakscopeError):
    """Structurally invalid bytecode program."""

    code = "program"

    def __init__(self, message: str, index: int | None = None):
        if index is not None:
            message = f"instruction {index}: {message}"
        super().__init__(message)
        self.index = index


class DatasetError(LeakscopeError):
    code = "dataset"


class IntegrityError(LeakscopeError):
    """Ground-truth labels disagree with the control-flow anchors in a trace."""

    code = "integrity"


class TruncationError(LeakscopeError):
    """Interpreter step budget exhausted; carries the partial trace."""

    code = "truncated"

    def __init__(self, message: str, partial_trace=None):
        super().__init__(message)
        self.partial_trace = partial_trace


class MatcherError(LeakscopeError):
    code = "matcher"


class GeneralizationRefused(LeakscopeError):
    """Patterns share no usable prefix/suffix; caller should keep them verbatim."""

    code = "generalization-refused"


class SegmentationError(LeakscopeError):
    """No complete segmentation exists; reports how far the search got."""

    code = "segmentation"

    def __init__(self, message: str, deepest_offset: int = 0, context: str = ""):
        super().__init__(message)
        self.deepest_offset = deepest_offset
        self.context = context


class ClassifierError(LeakscopeError):
    code = "classifier"


class StageError(LeakscopeError):
    """Pipeline stage failure; names the stage that aborted the run."""

    code = "stage"

    def __init__(self, stage: str, cause: str):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
