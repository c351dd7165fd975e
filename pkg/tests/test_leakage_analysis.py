"""Candidate-set analysis checks.

Expected values for the toy dataset were derived with the brute-force
oracle in ``brute_force_classes`` below (independent grouping straight off
the CSV rows) and are frozen in the assertions.
"""

import csv
from collections import defaultdict

import pytest

from leakscope.errors import DatasetError
from leakscope.isa_dataset import TeeKind, load_dataset, toy_dataset_path
from leakscope.leakage_analysis import (
    CandidateSet,
    InterceptKey,
    SizeDistribution,
    build_classes,
    ideal_classes,
    resolution_sweep,
    size_distribution,
)
from leakscope.trace_model import AttackerModel


def brute_force_classes(march, tee, resolution, ideal=False):
    """Oracle: group raw CSV rows by observable features, merge semantics."""
    with open(toy_dataset_path()) as fh:
        rows = [r for r in csv.DictReader(fh)
                if r["microarchitecture"] == march]
    if tee is TeeKind.SGX:
        rows = [r for r in rows if r["sgx_legal"] == "1"]
    groups = defaultdict(set)
    for r in rows:
        if tee is TeeKind.SEV and r["sev_intercepted"] == "1":
            groups[("intercept", r["semantic_class"])].add(r["semantic_class"])
            continue
        key = (int(r["latency_cycles"]) // resolution, r["mem_access"],
               r["stack_access"], r["is_control_flow"])
        if ideal:
            key += (r["fu_sequence"],)
        groups[key].add(r["semantic_class"])
    return sorted(frozenset(v) for v in groups.values())


def member_sets(classes):
    return sorted(c.members for c in classes.values())


def per_class_sizes(classes):
    best = {}
    for cand in classes.values():
        for member in cand.members:
            best[member] = min(best.get(member, 10 ** 9), cand.size)
    return sorted(best.values())


@pytest.fixture(scope="module")
def mocklake_sgx():
    return load_dataset(toy_dataset_path(), TeeKind.SGX, "mocklake")


@pytest.fixture(scope="module")
def mockzen_sev():
    return load_dataset(toy_dataset_path(), TeeKind.SEV, "mockzen")


@pytest.fixture(scope="module")
def mockcove():
    return load_dataset(toy_dataset_path(), TeeKind.UNRESTRICTED, "mockcove")


class TestBuildClasses:
    def test_matches_brute_force_oracle(self, mocklake_sgx):
        classes = build_classes(mocklake_sgx, AttackerModel.sota())
        assert member_sets(classes) == brute_force_classes(
            "mocklake", TeeKind.SGX, 10)

    def test_partition_covers_dataset_disjointly(self, mocklake_sgx):
        classes = build_classes(mocklake_sgx, AttackerModel.sota())
        seen = defaultdict(int)
        for record in mocklake_sgx.records:
            containing = [
                key for key, cand in classes.items()
                if record.semantic_class in cand.members
                and key.latency_bucket == record.latency_cycles // 10
                and key.mem_access is record.mem_access
                and key.stack_access == record.stack_access
                and key.is_control_flow == record.is_control_flow
            ]
            assert len(containing) == 1
            seen[containing[0]] += 1
        assert sum(seen.values()) == len(mocklake_sgx.records)

    def test_indistinguishable_arithmetic_shares_a_class(self, mocklake_sgx):
        # frozen from the oracle: the latency<10, no-memory bucket
        classes = build_classes(mocklake_sgx, AttackerModel.sota())
        assert frozenset({"mov", "add", "sub", "imul", "lea", "div"}) \
            in member_sets(classes)

    def test_sev_intercepted_forced_singleton(self, mockzen_sev):
        classes = build_classes(mockzen_sev, AttackerModel.sota())
        for name in ("cpuid", "rdtsc", "invd"):
            assert classes[InterceptKey(name)] == CandidateSet(frozenset({name}))

    def test_single_record_dataset(self, tmp_path):
        from leakscope.isa_dataset import COLUMNS
        path = tmp_path / "one.csv"
        path.write_text(",".join(COLUMNS) + "\n"
                        + "mov,mov_rr,mov,1,-,0,0,P0,1,0,m1\n")
        ds = load_dataset(path, TeeKind.UNRESTRICTED, "m1")
        classes = build_classes(ds, AttackerModel.sota())
        assert member_sets(classes) == [frozenset({"mov"})]

    def test_empty_dataset_rejected(self, mocklake_sgx):
        from leakscope.isa_dataset import IsaDataset
        empty = IsaDataset((), TeeKind.UNRESTRICTED, "m1")
        with pytest.raises(DatasetError):
            build_classes(empty, AttackerModel.sota())


class TestIdealClasses:
    def test_matches_brute_force_oracle(self, mocklake_sgx):
        classes = ideal_classes(mocklake_sgx)
        assert member_sets(classes) == brute_force_classes(
            "mocklake", TeeKind.SGX, 1, ideal=True)

    def test_exactly_one_of_ten_classes_is_singleton(self, mocklake_sgx):
        # the toy data mirrors the upper-bound shape: ~10% fully recoverable
        sizes = per_class_sizes(ideal_classes(mocklake_sgx))
        assert len(sizes) == 10
        assert sizes.count(1) == 1
        assert per_class_sizes(ideal_classes(mocklake_sgx)) == \
            [1, 2, 2, 2, 2, 2, 2, 2, 3, 3]

    def test_fu_separates_what_sota_merges(self, mockcove):
        # shl and rol differ only in functional units on mockcove
        sota = build_classes(mockcove, AttackerModel.sota())
        ideal = ideal_classes(mockcove)
        sota_sets = member_sets(sota)
        assert any({"shl", "rol"} <= s for s in sota_sets)
        assert frozenset({"shl"}) in member_sets(ideal)
        assert frozenset({"rol"}) in member_sets(ideal)

    def test_identical_records_share_a_class_under_both(self, mocklake_sgx):
        sota = build_classes(mocklake_sgx, AttackerModel.sota())
        ideal = ideal_classes(mocklake_sgx)
        assert any({"jmp", "jne"} <= s for s in member_sets(sota))
        assert any({"jmp", "jne"} <= s for s in member_sets(ideal))

    def test_ideal_refines_sota(self, mocklake_sgx):
        sota_sets = member_sets(build_classes(mocklake_sgx,
                                              AttackerModel.sota()))
        for ideal_set in member_sets(ideal_classes(mocklake_sgx)):
            assert any(ideal_set <= sota_set for sota_set in sota_sets)

    def test_missing_fu_data_names_the_record(self, tmp_path):
        from leakscope.isa_dataset import COLUMNS
        path = tmp_path / "nofu.csv"
        path.write_text(",".join(COLUMNS) + "\n"
                        + "mov,mov_rr,mov,1,-,0,0,,1,0,m1\n")
        ds = load_dataset(path, TeeKind.UNRESTRICTED, "m1")
        with pytest.raises(DatasetError) as err:
            ideal_classes(ds)
        assert "mov_rr" in str(err.value)


class TestSizeDistribution:
    def _dist_from_sizes(self, sizes):
        """Build a distribution from an explicit per-class size list via a
        fake partition: k classes of size s contribute k/s sets of size s."""
        from leakscope.trace_model import FeatureKey, MemAccess
        classes = {}
        names = iter(f"c{i}" for i in range(100))
        counted = {}
        for s in sizes:
            counted[s] = counted.get(s, 0) + 1
        key_id = 0
        for s, total in sorted(counted.items()):
            assert total % s == 0, "size list must describe a partition"
            for _ in range(total // s):
                members = frozenset(next(names) for _ in range(s))
                classes[FeatureKey(key_id, MemAccess.NONE, None, None)] = \
                    CandidateSet(members)
                key_id += 1
        return classes

    def test_derived_example_two_singletons_one_triple(self, mocklake_sgx):
        # per-class sizes [1,1,3,3,3]: at x=40 -> 1, at x=100 -> 3
        classes = self._dist_from_sizes([1, 1, 3, 3, 3])
        from leakscope.isa_dataset import IsaDataset
        dist = size_distribution(classes, IsaDataset((), TeeKind.UNRESTRICTED,
                                                     "m1"))
        assert dist.at(40) == 1
        assert dist.at(41) == 3
        assert dist.at(100) == 3

    def test_all_singletons(self):
        classes = self._dist_from_sizes([1, 1, 1, 1])
        from leakscope.isa_dataset import IsaDataset
        dist = size_distribution(classes, IsaDataset((), TeeKind.UNRESTRICTED,
                                                     "m1"))
        assert all(size == 1 for _, size in dist.points)

    def test_one_class_of_size_n(self):
        classes = self._dist_from_sizes([4, 4, 4, 4])
        from leakscope.isa_dataset import IsaDataset
        dist = size_distribution(classes, IsaDataset((), TeeKind.UNRESTRICTED,
                                                     "m1"))
        assert all(size == 4 for _, size in dist.points)

    def test_non_decreasing_in_percentile(self, mocklake_sgx):
        classes = build_classes(mocklake_sgx, AttackerModel.sota())
        dist = size_distribution(classes, mocklake_sgx)
        sizes = [size for _, size in dist.points]
        assert sizes == sorted(sizes)

    def test_frozen_toy_values(self, mocklake_sgx):
        classes = build_classes(mocklake_sgx, AttackerModel.sota())
        dist = size_distribution(classes, mocklake_sgx)
        assert dist.at(50) == 2
        assert dist.at(51) == 6
        assert dist.at(100) == 6

    def test_monotonicity_validated(self):
        with pytest.raises(ValueError):
            SizeDistribution(((1, 5), (2, 3)))


class TestResolutionSweep:
    def test_coarser_resolution_never_shrinks_sets(self, mocklake_sgx):
        sweep = resolution_sweep(mocklake_sgx, [1, 10, 100])
        for pct in range(1, 101):
            assert sweep[1].at(pct) <= sweep[10].at(pct) <= sweep[100].at(pct)

    def test_huge_resolution_equals_latency_blind(self, mocklake_sgx):
        sweep = resolution_sweep(mocklake_sgx, [10_000])
        blind_classes = build_classes(mocklake_sgx,
                                      AttackerModel.sota(resolution=10_000))
        blind = size_distribution(blind_classes, mocklake_sgx)
        assert sweep[10_000].points == blind.points

    def test_single_resolution_matches_default(self, mocklake_sgx):
        sweep = resolution_sweep(mocklake_sgx, [10])
        default = size_distribution(
            build_classes(mocklake_sgx, AttackerModel.sota()), mocklake_sgx)
        assert sweep[10].points == default.points

    def test_empty_resolution_list_rejected(self, mocklake_sgx):
        with pytest.raises(ValueError):
            resolution_sweep(mocklake_sgx, [])
