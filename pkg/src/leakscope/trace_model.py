"""Core data model for per-instruction side-channel observations.

An attacker that single-steps a victim records, for every executed native
instruction, one *instruction measurement* (IM): execution latency in cycles,
the code page it ran from, the type of memory access it performed (and the
data page, if any), whether that access hit the stack page, and whether the
instruction was observed as a control-flow transfer. A sequence of IMs is an
execution trace, tagged with the phase of the victim that produced it.

Two projections of an IM matter downstream:

* ``tokenize`` reduces each IM to its (code page, memory-access tag) token;
  concatenated token texts form the pattern string used for segmentation.
* ``feature_key`` reduces an IM to the equivalence key observable under a
  given attacker model (bucketed latency, memory type, optional stack /
  control-flow flags, optional functional-unit occupancy).
"""

from __future__ import annotations

from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from types import MappingProxyType

from .errors import ParseError


class MemAccess(Enum):
    """Memory behavior of one instruction, as seen through page monitoring."""

    READ = "r"
    WRITE = "w"
    NONE = "-"

    @classmethod
    def from_tag(cls, tag: str) -> "MemAccess":
        try:
            return cls(tag)
        except ValueError:
            raise ParseError(f"unknown memory tag {tag!r}") from None


class Phase(Enum):
    LOAD = "load"
    INTERPRET = "interpret"
    NATIVE = "native"


@dataclass(frozen=True)
class InstructionMeasurement:
    """One observed native instruction.

    ``data_page`` is present exactly when a memory access happened, and
    ``stack_access`` can only be set when there was a memory access. ``ip``
    is ground truth available in profiling mode only.
    """

    latency_cycles: int
    code_page: int
    mem_access: MemAccess
    data_page: int | None = None
    stack_access: bool = False
    is_control_flow: bool = False
    ip: int | None = None

    def __post_init__(self):
        if self.latency_cycles < 0:
            raise ValueError("latency_cycles must be non-negative")
        if self.code_page < 0:
            raise ValueError("code_page must be non-negative")
        if (self.data_page is not None) != (self.mem_access is not MemAccess.NONE):
            raise ValueError("data_page must be present iff a memory access happened")
        if self.data_page is not None and self.data_page < 0:
            raise ValueError("data_page must be non-negative")
        if self.stack_access and self.mem_access is MemAccess.NONE:
            raise ValueError("stack_access requires a memory access")


@dataclass(frozen=True)
class LabelSpan:
    """Ground-truth span: measurements [start, end) belong to one opcode."""

    start: int
    end: int
    opcode: str


@dataclass(frozen=True)
class ExecutionTrace:
    measurements: tuple[InstructionMeasurement, ...]
    phase: Phase
    labels: tuple[LabelSpan, ...] | None = None
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "measurements", tuple(self.measurements))
        object.__setattr__(self, "metadata", MappingProxyType(dict(self.metadata)))
        if self.labels is not None:
            object.__setattr__(self, "labels", tuple(self.labels))
            prev_end = 0
            for span in self.labels:
                if span.start < prev_end:
                    raise ValueError("label spans must be sorted and non-overlapping")
                if not (0 <= span.start <= span.end <= len(self.measurements)):
                    raise ValueError("label span out of bounds")
                prev_end = span.end
        else:
            # Production traces never carry ground-truth instruction pointers.
            for i, im in enumerate(self.measurements):
                if im.ip is not None:
                    raise ValueError(f"unlabeled trace carries an ip at index {i}")

    def __len__(self) -> int:
        return len(self.measurements)

    def without_ground_truth(self) -> "ExecutionTrace":
        """Strip labels, ips and profiling metadata (the attacker's view)."""
        stripped = tuple(
            im if im.ip is None else
            InstructionMeasurement(im.latency_cycles, im.code_page, im.mem_access,
                                   im.data_page, im.stack_access, im.is_control_flow)
            for im in self.measurements
        )
        public = {k: v for k, v in self.metadata.items()
                  if k not in ("fused_at", "fuseable_at")}
        return ExecutionTrace(stripped, self.phase, None, public)


class AttackerKind(Enum):
    SOTA = "sota"
    IDEAL = "ideal"


@dataclass(frozen=True)
class AttackerModel:
    """What the attacker can observe per instruction.

    The realistic (state-of-the-art) attacker sees latency at a coarse
    resolution plus memory / stack / control-flow flags. The ideal attacker
    is cycle-accurate and additionally sees functional-unit occupancy.
    """

    kind: AttackerKind
    latency_resolution_cycles: int = 10
    observe_fu: bool = False
    observe_stack: bool = True
    observe_cf: bool = True

    def __post_init__(self):
        if self.latency_resolution_cycles <= 0:
            raise ValueError("latency_resolution_cycles must be positive")
        if self.kind is AttackerKind.IDEAL:
            if self.latency_resolution_cycles != 1 or not self.observe_fu:
                raise ValueError("ideal attacker is cycle-accurate and observes FUs")
        elif self.observe_fu:
            raise ValueError("only the ideal attacker observes functional units")

    @classmethod
    def sota(cls, resolution: int = 10) -> "AttackerModel":
        return cls(AttackerKind.SOTA, latency_resolution_cycles=resolution)

    @classmethod
    def ideal(cls) -> "AttackerModel":
        return cls(AttackerKind.IDEAL, latency_resolution_cycles=1, observe_fu=True)


@dataclass(frozen=True)
class Token:
    """(code page, memory tag) projection of an IM; text form like ``1r``."""

    code_page: int
    mem_access: MemAccess = MemAccess.NONE

    def __post_init__(self):
        if self.code_page < 0:
            raise ValueError("code_page must be non-negative")

    @property
    def text(self) -> str:
        return f"{self.code_page}{self.mem_access.value}"

    def __str__(self) -> str:
        return self.text

    def __lt__(self, other: "Token") -> bool:
        return (self.code_page, self.mem_access.value) \
            < (other.code_page, other.mem_access.value)


def parse_token_string(text: str) -> tuple[Token, ...]:
    """Parse a concatenated pattern string like ``1r1-2w`` back into tokens."""
    tokens: list[Token] = []
    i = 0
    while i < len(text):
        j = i
        while j < len(text) and text[j].isdigit():
            j += 1
        if j == i or j >= len(text):
            raise ParseError(f"malformed token string at offset {i}: {text!r}")
        tokens.append(Token(int(text[i:j]), MemAccess.from_tag(text[j])))
        i = j + 1
    return tuple(tokens)


def format_token_string(tokens: Iterable[Token]) -> str:
    return "".join(t.text for t in tokens)


def tokenize(trace: ExecutionTrace) -> tuple[Token, ...]:
    """Project every IM of a trace onto its token, preserving order."""
    return tuple(Token(im.code_page, im.mem_access) for im in trace.measurements)


def rebase_code_pages(trace: ExecutionTrace) -> ExecutionTrace:
    """Rebase code page numbers relative to the first code page in the trace.

    Externally collected traces carry absolute page numbers; patterns must be
    position-independent across runs, so the first page seen becomes page 0.
    Raises if some instruction ran from a page below the first one.
    """
    if not trace.measurements:
        return trace
    base = trace.measurements[0].code_page
    rebased = []
    for i, im in enumerate(trace.measurements):
        if im.code_page < base:
            raise ValueError(
                f"IM {i} runs from page {im.code_page}, below the base page {base}")
        rebased.append(InstructionMeasurement(
            im.latency_cycles, im.code_page - base, im.mem_access,
            im.data_page, im.stack_access, im.is_control_flow, im.ip))
    return ExecutionTrace(tuple(rebased), trace.phase, trace.labels, trace.metadata)


@dataclass(frozen=True)
class FeatureKey:
    """Attacker-observable equivalence key of one instruction.

    ``stack_access`` / ``is_control_flow`` are None when the model does not
    observe them; ``fu`` carries functional-unit occupancy for the ideal
    attacker when the observation was joined against an ISA record.
    """

    latency_bucket: int
    mem_access: MemAccess
    stack_access: bool | None
    is_control_flow: bool | None
    fu: tuple[tuple[str, frozenset[str]], ...] | None = None


def feature_key(im: InstructionMeasurement, model: AttackerModel,
                fu: tuple[tuple[str, frozenset[str]], ...] | None = None) -> FeatureKey:
    """Reduce an IM to what the given attacker can distinguish.

    Latency falls into half-open buckets [k*r, (k+1)*r) aligned at zero.
    """
    return FeatureKey(
        latency_bucket=im.latency_cycles // model.latency_resolution_cycles,
        mem_access=im.mem_access,
        stack_access=im.stack_access if model.observe_stack else None,
        is_control_flow=im.is_control_flow if model.observe_cf else None,
        fu=fu if model.observe_fu else None,
    )


# ----------------------------------------------------------------------------
# Trace file format
#
# One IM per line: latency,code_page,mem_tag,data_page|-,stack,cf[,ip]
# Header: "#phase=<load|interpret|native>"; optional "#meta key=value" lines.
# Label sidecar: "start,end,opcode" per line.
# ----------------------------------------------------------------------------

def save_trace(trace: ExecutionTrace, path: str | Path) -> None:
    lines = [f"#phase={trace.phase.value}"]
    for key in sorted(trace.metadata):
        lines.append(f"#meta {key}={trace.metadata[key]}")
    for im in trace.measurements:
        data = "-" if im.data_page is None else str(im.data_page)
        row = (f"{im.latency_cycles},{im.code_page},{im.mem_access.value},"
               f"{data},{int(im.stack_access)},{int(im.is_control_flow)}")
        if im.ip is not None:
            row += f",{im.ip}"
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n")


def load_trace(path: str | Path,
               labels: tuple[LabelSpan, ...] | None = None) -> ExecutionTrace:
    phase: Phase | None = None
    metadata: dict[str, str] = {}
    measurements: list[InstructionMeasurement] = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#phase="):
            try:
                phase = Phase(line[len("#phase="):])
            except ValueError:
                raise ParseError(f"unknown phase {line!r}", lineno) from None
            continue
        if line.startswith("#meta "):
            key, _, value = line[len("#meta "):].partition("=")
            metadata[key] = value
            continue
        if line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) not in (6, 7):
            raise ParseError(f"expected 6 or 7 fields, got {len(parts)}", lineno)
        try:
            im = InstructionMeasurement(
                latency_cycles=int(parts[0]),
                code_page=int(parts[1]),
                mem_access=MemAccess.from_tag(parts[2]),
                data_page=None if parts[3] == "-" else int(parts[3]),
                stack_access=bool(int(parts[4])),
                is_control_flow=bool(int(parts[5])),
                ip=int(parts[6]) if len(parts) == 7 else None,
            )
        except (ValueError, ParseError) as exc:
            raise ParseError(str(exc), lineno) from None
        measurements.append(im)
    if phase is None:
        raise ParseError(f"{path}: missing #phase header")
    return ExecutionTrace(tuple(measurements), phase, labels, metadata)


def save_labels(labels: Sequence[LabelSpan], path: str | Path) -> None:
    lines = [f"{s.start},{s.end},{s.opcode}" for s in labels]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_labels(path: str | Path) -> tuple[LabelSpan, ...]:
    spans: list[LabelSpan] = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise ParseError(f"expected start,end,opcode, got {line!r}", lineno)
        try:
            spans.append(LabelSpan(int(parts[0]), int(parts[1]), parts[2]))
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
    return tuple(spans)
