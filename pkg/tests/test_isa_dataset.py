import pytest

from leakscope.errors import DatasetError, ParseError
from leakscope.isa_dataset import (
    COLUMNS,
    IsaDataset,
    IsaRecord,
    TeeKind,
    format_fu_sequence,
    load_dataset,
    parse_fu_sequence,
    semantic_merge,
    toy_dataset_path,
    validate_dataset,
)
from leakscope.trace_model import MemAccess

HEADER = ",".join(COLUMNS)


def write_dataset(tmp_path, rows):
    path = tmp_path / "isa.csv"
    path.write_text("\n".join([HEADER] + rows) + "\n")
    return path


class TestFuSequence:
    def test_stages_and_alternatives(self):
        fu = parse_fu_sequence("P0|P1;D0")
        assert fu == (("P0", frozenset({"P0", "P1"})), ("D0", frozenset({"D0"})))

    def test_empty_means_no_data(self):
        assert parse_fu_sequence("") == ()

    def test_round_trip(self):
        text = "P0|P1;D0"
        assert format_fu_sequence(parse_fu_sequence(text)) == text


class TestLoadDataset:
    def test_sgx_drops_illegal_variants(self, tmp_path):
        path = write_dataset(tmp_path, [
            "mov,mov_rr,mov,1,-,0,0,P0,1,0,m1",
            "mov,mov_to_seg,mov,6,-,0,0,P0,0,0,m1",
        ])
        ds = load_dataset(path, TeeKind.SGX, "m1")
        assert len(ds.records) == 1
        assert ds.records[0].variant_id == "mov_rr"

    def test_sev_keeps_intercepted_flagged(self, tmp_path):
        path = write_dataset(tmp_path, [
            "cpuid,cpuid,cpuid,120,-,0,0,P0,1,1,m1",
        ])
        ds = load_dataset(path, TeeKind.SEV, "m1")
        assert len(ds.records) == 1
        assert ds.records[0].sev_intercepted

    def test_unrestricted_keeps_everything(self, tmp_path):
        path = write_dataset(tmp_path, [
            "mov,mov_rr,mov,1,-,0,0,P0,1,0,m1",
            "mov,mov_to_seg,mov,6,-,0,0,P0,0,0,m1",
        ])
        ds = load_dataset(path, TeeKind.UNRESTRICTED, "m1")
        assert len(ds.records) == 2

    def test_header_only_file_is_empty(self, tmp_path):
        path = write_dataset(tmp_path, [])
        with pytest.raises(DatasetError):
            load_dataset(path, TeeKind.SGX, "m1")

    def test_unknown_march_lists_available(self, tmp_path):
        path = write_dataset(tmp_path, [
            "mov,mov_rr,mov,1,-,0,0,P0,1,0,m1",
            "mov,mov_rr,mov,1,-,0,0,P0,1,0,m2",
        ])
        with pytest.raises(DatasetError) as err:
            load_dataset(path, TeeKind.SGX, "nope")
        assert "m1" in str(err.value) and "m2" in str(err.value)

    def test_malformed_row_reports_line(self, tmp_path):
        path = write_dataset(tmp_path, [
            "mov,mov_rr,mov,one,-,0,0,P0,1,0,m1",
        ])
        with pytest.raises(ParseError) as err:
            load_dataset(path, TeeKind.SGX, "m1")
        assert "line 2" in str(err.value)

    def test_filtering_is_idempotent(self, tmp_path):
        path = write_dataset(tmp_path, [
            "mov,mov_rr,mov,1,-,0,0,P0,1,0,m1",
            "in,in_al,in,80,-,0,0,P0,0,0,m1",
        ])
        once = load_dataset(path, TeeKind.SGX, "m1")
        again = IsaDataset(once.records, TeeKind.SGX, "m1")
        assert again.records == once.records

    def test_sgx_constructor_rejects_leftover_illegal(self):
        bad = IsaRecord("in", "in_al", "in", 80, MemAccess.NONE, False, False,
                        (), False, False, "m1")
        with pytest.raises(ValueError):
            IsaDataset((bad,), TeeKind.SGX, "m1")


class TestSemanticMerge:
    @pytest.fixture()
    def dataset(self, tmp_path):
        path = write_dataset(tmp_path, [
            "mov,mov_rr,mov,1,-,0,0,P0,1,0,m1",
            "movq,movq_rr,mov,1,-,0,0,P0,1,0,m1",
            "add,add_rr,add,1,-,0,0,P0,1,0,m1",
            "sub,sub_rr,sub,1,-,0,0,P0,1,0,m1",
        ])
        return load_dataset(path, TeeKind.UNRESTRICTED, "m1")

    def test_mov_and_movq_merge(self, dataset):
        assert semantic_merge({"mov_rr", "movq_rr"}, dataset) == {"mov"}

    def test_empty_input(self, dataset):
        assert semantic_merge(set(), dataset) == set()

    def test_distinct_classes_stay_distinct(self, dataset):
        merged = semantic_merge({"add_rr", "sub_rr", "mov_rr"}, dataset)
        assert merged == {"add", "sub", "mov"}

    def test_unknown_variant(self, dataset):
        with pytest.raises(DatasetError):
            semantic_merge({"nope"}, dataset)


class TestToyDataset:
    def test_three_mock_microarchitectures(self):
        counts = validate_dataset(toy_dataset_path())
        assert sorted(counts) == ["mockcove", "mocklake", "mockzen"]
        assert sum(counts.values()) == 40

    def test_mocklake_sgx_has_ten_semantic_classes(self):
        ds = load_dataset(toy_dataset_path(), TeeKind.SGX, "mocklake")
        assert len(ds.semantic_classes()) == 10

    def test_every_record_has_fu_data(self):
        for march in ("mocklake", "mockzen", "mockcove"):
            ds = load_dataset(toy_dataset_path(), TeeKind.UNRESTRICTED, march)
            assert all(r.fu_sequence for r in ds.records)
