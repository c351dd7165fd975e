"""Per-native-instruction feature tables and TEE legality filtering.

The native-side analysis consumes a benchmark-style table with one row per
instruction variant: latency, memory behavior, stack / control-flow flags,
functional-unit occupancy, and two legality columns. Loading a dataset for
a specific TEE applies the corresponding rule: instructions illegal inside
SGX enclaves are dropped outright, while instructions intercepted by the
SEV hypervisor stay in the table but are flagged (interception reveals them
through the host interface, so they later form singleton candidate sets).

File format: CSV with a header row naming the columns below. ``fu_sequence``
encodes pipeline stages separated by ``;`` where each stage lists alternative
units separated by ``|`` (e.g. ``P0|P1;D0``). One file may mix rows for
several microarchitectures.
"""

from __future__ import annotations

import csv
from collections.abc import Iterable
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path

from .errors import DatasetError, ParseError
from .trace_model import MemAccess

COLUMNS = (
    "mnemonic", "variant_id", "semantic_class", "latency_cycles", "mem_access",
    "stack_access", "is_control_flow", "fu_sequence", "sgx_legal",
    "sev_intercepted", "microarchitecture",
)

FuSequence = tuple[tuple[str, frozenset[str]], ...]


class TeeKind(Enum):
    SGX = "sgx"
    SEV = "sev"
    UNRESTRICTED = "none"


@dataclass(frozen=True)
class IsaRecord:
    mnemonic: str
    variant_id: str
    semantic_class: str
    latency_cycles: int
    mem_access: MemAccess
    stack_access: bool
    is_control_flow: bool
    fu_sequence: FuSequence
    sgx_legal: bool
    sev_intercepted: bool
    microarchitecture: str

    def __post_init__(self):
        if not self.semantic_class:
            raise ValueError(f"{self.variant_id}: semantic_class must be non-empty")
        if self.latency_cycles < 0:
            raise ValueError(f"{self.variant_id}: latency_cycles must be non-negative")


@dataclass(frozen=True)
class IsaDataset:
    records: tuple[IsaRecord, ...]
    tee: TeeKind
    microarchitecture: str

    def __post_init__(self):
        if self.tee is TeeKind.SGX and any(not r.sgx_legal for r in self.records):
            raise ValueError("SGX dataset still contains illegal records")

    def semantic_classes(self) -> set[str]:
        return {r.semantic_class for r in self.records}

    def by_variant(self, variant_id: str) -> IsaRecord:
        for r in self.records:
            if r.variant_id == variant_id:
                return r
        raise DatasetError(f"unknown variant_id {variant_id!r}")


def parse_fu_sequence(text: str) -> FuSequence:
    """Parse ``P0|P1;D0`` into ordered stages with alternative-unit sets."""
    if not text:
        return ()
    stages = []
    for stage in text.split(";"):
        units = [u for u in stage.split("|") if u]
        if not units:
            raise ParseError(f"empty pipeline stage in {text!r}")
        stages.append((units[0], frozenset(units)))
    return tuple(stages)


def format_fu_sequence(fu: FuSequence) -> str:
    return ";".join("|".join(sorted(alts)) for _, alts in fu)


def _parse_bool(value: str, column: str) -> bool:
    if value in ("0", "1"):
        return value == "1"
    raise ParseError(f"column {column} must be 0 or 1, got {value!r}")


def parse_records(path: str | Path) -> list[IsaRecord]:
    """Read every row of a dataset file, independent of TEE or march."""
    records: list[IsaRecord] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ParseError(f"{path}: empty dataset file")
        missing = [c for c in COLUMNS if c not in reader.fieldnames]
        if missing:
            raise ParseError(f"{path}: missing columns {', '.join(missing)}")
        for row in reader:
            lineno = reader.line_num
            try:
                records.append(IsaRecord(
                    mnemonic=row["mnemonic"],
                    variant_id=row["variant_id"],
                    semantic_class=row["semantic_class"],
                    latency_cycles=int(row["latency_cycles"]),
                    mem_access=MemAccess.from_tag(row["mem_access"]),
                    stack_access=_parse_bool(row["stack_access"], "stack_access"),
                    is_control_flow=_parse_bool(row["is_control_flow"],
                                                "is_control_flow"),
                    fu_sequence=parse_fu_sequence(row["fu_sequence"]),
                    sgx_legal=_parse_bool(row["sgx_legal"], "sgx_legal"),
                    sev_intercepted=_parse_bool(row["sev_intercepted"],
                                                "sev_intercepted"),
                    microarchitecture=row["microarchitecture"],
                ))
            except (ValueError, ParseError) as exc:
                msg = exc.message if isinstance(exc, ParseError) else str(exc)
                raise ParseError(msg, lineno) from None
    return records


def load_dataset(path: str | Path, tee: TeeKind,
                 microarchitecture: str) -> IsaDataset:
    """Load one microarchitecture's rows and apply the TEE filtering rule."""
    rows = parse_records(path)
    available = sorted({r.microarchitecture for r in rows})
    if microarchitecture not in available:
        raise DatasetError(
            f"unknown microarchitecture {microarchitecture!r}; "
            f"available: {', '.join(available) or '(none)'}")
    selected = [r for r in rows if r.microarchitecture == microarchitecture]
    if tee is TeeKind.SGX:
        selected = [r for r in selected if r.sgx_legal]
    return IsaDataset(tuple(selected), tee, microarchitecture)


def semantic_merge(variant_ids: Iterable[str], dataset: IsaDataset) -> set[str]:
    """Collapse variant ids onto their semantic classes."""
    by_id = {r.variant_id: r.semantic_class for r in dataset.records}
    merged = set()
    for vid in variant_ids:
        if vid not in by_id:
            raise DatasetError(f"unknown variant_id {vid!r}")
        merged.add(by_id[vid])
    return merged


def toy_dataset_path() -> Path:
    """Path of the bundled synthetic dataset (3 mock microarchitectures)."""
    return Path(resources.files("leakscope").joinpath("data/toy_isa.csv"))


def validate_dataset(path: str | Path) -> dict[str, int]:
    """Parse a dataset file and return row counts per microarchitecture."""
    rows = parse_records(path)
    counts: dict[str, int] = {}
    for r in rows:
        counts[r.microarchitecture] = counts.get(r.microarchitecture, 0) + 1
    return dict(sorted(counts.items()))
