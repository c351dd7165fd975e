"""Candidate-set analysis of a native instruction table.

Instructions whose observable features coincide are indistinguishable: they
form one equivalence class, and that class is the candidate set an attacker
is left with after observing any of its members. This module partitions an
ISA dataset into such classes under a given attacker model, merges
semantically equivalent instructions before any size is reported, and
summarizes the result as the minimum candidate-set size covering each
percentile of the ISA.

SEV-intercepted instructions bypass the feature partition entirely: the
hypervisor learns their identity through the intercept interface, so each
one sits in a candidate set of size 1 no matter what its features are.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import DatasetError
from .isa_dataset import IsaDataset, IsaRecord, TeeKind
from .trace_model import AttackerModel, FeatureKey


@dataclass(frozen=True)
class CandidateSet:
    """Semantically merged instruction classes consistent with one observation."""

    members: frozenset[str]

    def __post_init__(self):
        if not self.members:
            raise ValueError("candidate set cannot be empty")

    @property
    def size(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class InterceptKey:
    """Class key for a hypervisor-intercepted instruction (SEV)."""

    semantic_class: str


ClassKey = FeatureKey | InterceptKey


@dataclass(frozen=True)
class SizeDistribution:
    """Minimum candidate-set size containing at least x percent of the ISA."""

    points: tuple[tuple[int, int], ...]

    def __post_init__(self):
        last = 0
        for _, size in self.points:
            if size < last:
                raise ValueError("min_set_size must be non-decreasing")
            last = size

    def at(self, percentile: int) -> int:
        for pct, size in self.points:
            if pct >= percentile:
                return size
        raise ValueError(f"percentile {percentile} out of range")


def record_key(record: IsaRecord, model: AttackerModel) -> FeatureKey:
    return FeatureKey(
        latency_bucket=record.latency_cycles // model.latency_resolution_cycles,
        mem_access=record.mem_access,
        stack_access=record.stack_access if model.observe_stack else None,
        is_control_flow=record.is_control_flow if model.observe_cf else None,
        fu=record.fu_sequence if model.observe_fu else None,
    )


def build_classes(dataset: IsaDataset,
                  model: AttackerModel) -> dict[ClassKey, CandidateSet]:
    """Partition the dataset into attacker-indistinguishable classes.

    Every record lands in exactly one class; members are semantic classes
    (merged before sizes are read off anywhere).
    """
    if not dataset.records:
        raise DatasetError("cannot build classes over an empty dataset")
    groups: dict[ClassKey, set[str]] = {}
    for record in dataset.records:
        if dataset.tee is TeeKind.SEV and record.sev_intercepted:
            key: ClassKey = InterceptKey(record.semantic_class)
        else:
            key = record_key(record, model)
        groups.setdefault(key, set()).add(record.semantic_class)
    return {key: CandidateSet(frozenset(members)) for key, members in groups.items()}


def ideal_classes(dataset: IsaDataset) -> dict[ClassKey, CandidateSet]:
    """Classes under the cycle-accurate, FU-observing upper-bound attacker."""
    for record in dataset.records:
        if not record.fu_sequence:
            raise DatasetError(
                f"record {record.variant_id!r} has no fu_sequence; "
                "the ideal attacker model requires functional-unit data")
    return build_classes(dataset, AttackerModel.ideal())


def _semantic_class_sizes(classes: dict[ClassKey, CandidateSet],
                          dataset: IsaDataset, weight: str) -> list[int]:
    """Per-unit candidate-set sizes used as the distribution population.

    A semantic class may appear in several classes when its variants differ
    in features; it is assigned the smallest set any variant fell into (the
    attacker's best single observation). With per-semantic-class weighting
    each semantic class counts once; with per-variant weighting every record
    counts once, carrying its semantic class's assigned size.
    """
    best: dict[str, int] = {}
    for cand in classes.values():
        for member in cand.members:
            if member not in best or cand.size < best[member]:
                best[member] = cand.size
    if weight == "class":
        return [best[name] for name in sorted(best)]
    if weight == "variant":
        return [best[record.semantic_class] for record in dataset.records]
    raise ValueError(f"unknown weighting {weight!r}")


def size_distribution(classes: dict[ClassKey, CandidateSet], dataset: IsaDataset,
                      weight: str = "class") -> SizeDistribution:
    """Distribution of candidate-set sizes across the ISA.

    For percentile x (integer steps 1..100) the reported value is the
    smallest s such that at least x% of the population sits in candidate
    sets of size <= s.
    """
    sizes = sorted(_semantic_class_sizes(classes, dataset, weight))
    if not sizes:
        raise DatasetError("no classes to summarize")
    n = len(sizes)
    points = []
    for pct in range(1, 101):
        # smallest index covering at least pct percent of the population
        idx = -(-pct * n // 100) - 1
        points.append((pct, sizes[idx]))
    return SizeDistribution(tuple(points))


def resolution_sweep(dataset: IsaDataset, resolutions: list[int],
                     weight: str = "class") -> dict[int, SizeDistribution]:
    """One SotA distribution per latency resolution, other features fixed."""
    if not resolutions:
        raise ValueError("resolutions must be non-empty")
    out: dict[int, SizeDistribution] = {}
    for res in resolutions:
        classes = build_classes(dataset, AttackerModel.sota(resolution=res))
        out[res] = size_distribution(classes, dataset, weight)
    return out
