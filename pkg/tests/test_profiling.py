import pytest

from leakscope.errors import IntegrityError
from leakscope.profiling import (
    LabeledSegment,
    Pattern,
    PatternDatabase,
    extract_patterns,
    load_patterns,
    merge_tokens,
    save_patterns,
    segment_with_ground_truth,
)
from leakscope.trace_model import (
    ExecutionTrace,
    LabelSpan,
    MemAccess,
    Phase,
    Token,
    parse_token_string,
)
from leakscope.victim import (
    NoiseModel,
    default_spec,
    interpret_phase,
    load_phase,
    parse_program,
)

QUIET = NoiseModel(seed=0)
SPEC = default_spec()


def toks(text: str):
    return parse_token_string(text)


def seg(text: str, label: str = "x",
        phase: Phase = Phase.INTERPRET) -> LabeledSegment:
    return LabeledSegment(toks(text), label, phase)


class TestMergeTokens:
    def test_single_memory_op_wins(self):
        assert merge_tokens(Token(3), Token(3, MemAccess.READ)) \
            == Token(3, MemAccess.READ)
        assert merge_tokens(Token(3), Token(3)) == Token(3)

    def test_two_memory_ops_cannot_fuse(self):
        assert merge_tokens(Token(3, MemAccess.READ),
                            Token(3, MemAccess.WRITE)) is None

    def test_cross_page_pairs_cannot_fuse(self):
        assert merge_tokens(Token(3), Token(4)) is None


class TestGroundTruthSegmentation:
    def test_two_instruction_lengths(self):
        # add expands to 9 interpreter IMs, load to 14 (derived from the sim)
        prog = parse_program(
            "func main\nconst 1\nconst 2\nadd\nlocal.set 0\n"
            "const 0\nload\nlocal.set 1\nendfunc")
        trace = interpret_phase(prog, [], SPEC, QUIET)
        segments = segment_with_ground_truth(trace)
        assert [(s.label, len(s.tokens)) for s in segments] \
            == [("add", 9), ("load", 14)]

    def test_empty_trace(self):
        trace = ExecutionTrace((), Phase.INTERPRET, ())
        assert segment_with_ground_truth(trace) == []

    def test_loop_target_yields_sixteen_segments(self):
        prog = parse_program(
            "func main 2\nloop\nconst 0\nconst 0\nload\nlocal.get 0\nmul\n"
            "store\nlocal.get 0\ndrop\nlocal.get 2\nconst 1\nadd\n"
            "local.tee 2\nlocal.get 1\nlt_s\nbr_if 0\nend\nendfunc")
        trace = interpret_phase(prog, [3, 2], SPEC, QUIET)
        assert len(segment_with_ground_truth(trace)) == 16

    def test_unlabeled_trace_rejected(self):
        trace = ExecutionTrace((), Phase.INTERPRET, None)
        with pytest.raises(IntegrityError):
            segment_with_ground_truth(trace)

    def test_interpret_span_must_end_at_control_flow(self):
        prog = parse_program("func main\nconst 1\ndrop\nendfunc")
        trace = interpret_phase(prog, [], SPEC, QUIET)
        # shift the only span one IM short: no longer ends at the dispatch
        bad = ExecutionTrace(
            trace.measurements, Phase.INTERPRET,
            (LabelSpan(0, len(trace) - 1, "drop"),), trace.metadata)
        with pytest.raises(IntegrityError) as err:
            segment_with_ground_truth(bad)
        assert "control-flow" in str(err.value)

    def test_load_spans_must_align_with_loop_entry_anchors(self):
        prog = parse_program("func main\nnop\nnop\nendfunc")
        trace = load_phase(prog, SPEC, QUIET)
        mid = trace.labels[1].start + 1
        bad = ExecutionTrace(
            trace.measurements, Phase.LOAD,
            (trace.labels[0], LabelSpan(mid, len(trace), "nop")),
            trace.metadata)
        with pytest.raises(IntegrityError):
            segment_with_ground_truth(bad)

    def test_fusion_ground_truth_attached_to_segments(self):
        prog = parse_program("func main\nconst 1\ndrop\nendfunc")
        trace = load_phase(prog, SPEC, NoiseModel(fusion_probability=1.0, seed=3))
        segments = segment_with_ground_truth(trace)
        assert any(s.fused_at for s in segments)
        unfused = load_phase(prog, SPEC, QUIET)
        assert any(s.fuseable_at
                   for s in segment_with_ground_truth(unfused))


class TestExtractPatterns:
    def test_split_observation_becomes_unfuse_position(self):
        # the fused and unfused sighting of one pair collapse to one pattern
        db = PatternDatabase()
        extract_patterns([seg("3-3r"), seg("3-3-3r")], db)
        patterns = db.patterns()
        assert len(patterns) == 1
        p = patterns[0]
        assert p.tokens == toks("3-3r")
        assert p.unfuse_positions == ((0, (Token(3), Token(3))),)
        assert p.source_count == 2

    def test_insertion_order_does_not_matter(self):
        a, b = PatternDatabase(), PatternDatabase()
        extract_patterns([seg("3-3r"), seg("3-3-3r")], a)
        extract_patterns([seg("3-3-3r"), seg("3-3r")], b)
        assert a.patterns() == b.patterns()

    def test_identical_observations_bump_count(self):
        db = PatternDatabase()
        extract_patterns([seg("1r1w"), seg("1r1w")], db)
        patterns = db.patterns()
        assert len(patterns) == 1
        assert patterns[0].source_count == 2

    def test_multiway_difference_creates_second_pattern(self):
        db = PatternDatabase()
        extract_patterns([seg("1r1-1-1w"), seg("1w1-1-1r")], db)
        assert len(db.patterns()) == 2

    def test_distinct_clz_paths_stay_distinct(self):
        prog = parse_program("func main 1\nlocal.get 0\nclz\ndrop\nendfunc")
        db = PatternDatabase()
        for value in (0x80000000, 0x20000000):
            trace = interpret_phase(prog, [value], SPEC, QUIET)
            extract_patterns(segment_with_ground_truth(trace), db)
        assert len(db.patterns_for("clz", Phase.INTERPRET)) == 2

    def test_ground_truth_and_inference_paths_cover_the_same_variants(self):
        # the unfuse *explanation* may differ (a split between equal tokens
        # is ambiguous), but the set of accepted sequences must not
        prog = parse_program("func main\nconst 5\nconst 7\nadd\ndrop\nendfunc")
        with_truth, blind = PatternDatabase(), PatternDatabase()
        for seed in range(8):
            for p in (0.0, 1.0, 0.5):
                noise = NoiseModel(fusion_probability=p, seed=seed)
                trace = interpret_phase(prog, [], SPEC, noise)
                segments = segment_with_ground_truth(trace)
                extract_patterns(segments, with_truth)
                stripped = [LabeledSegment(s.tokens, s.label, s.phase)
                            for s in segments]
                extract_patterns(stripped, blind)

        def coverage(db):
            out = {}
            for p in db.patterns():
                out.setdefault(p.label, set()).update(p.variants())
            return out

        assert coverage(with_truth) == coverage(blind)


class TestRoundTripProperty:
    @pytest.mark.parametrize("fusion_p", [0.0, 0.5, 1.0])
    def test_every_observation_matched_by_a_stored_pattern(self, fusion_p):
        from leakscope.pipeline import packaged_testsuite_dir, testsuite_programs
        from leakscope.victim.bytecode import parse_program_file
        db = PatternDatabase()
        observations = []
        for path in testsuite_programs(packaged_testsuite_dir()):
            program = parse_program_file(path)
            for idx, inputs in enumerate(program.input_sweeps or ((),)):
                noise = NoiseModel(fusion_probability=fusion_p, seed=idx)
                for trace in (load_phase(program, SPEC, noise),
                              interpret_phase(program, list(inputs), SPEC,
                                              noise)):
                    segments = segment_with_ground_truth(trace)
                    extract_patterns(segments, db)
                    observations.extend(segments)
        assert observations
        for s in observations:
            assert any(p.matches(s.tokens)
                       for p in db.patterns_for(s.label, s.phase)), s.label


class TestPatternVariants:
    def test_all_variants_accepted(self):
        pattern = Pattern(
            "x", Phase.INTERPRET, toks("3w3-3r"),
            ((0, (Token(3), Token(3, MemAccess.WRITE))),
             (2, (Token(3), Token(3, MemAccess.READ)))))
        variants = set(pattern.variants())
        assert len(variants) == 4
        for v in variants:
            assert pattern.matches(v)

    def test_non_variant_rejected(self):
        pattern = Pattern("x", Phase.INTERPRET, toks("3-3r"),
                          ((0, (Token(3), Token(3))),))
        assert not pattern.matches(toks("3r3r"))
        assert not pattern.matches(toks("3-3-3-3r"))

    def test_inconsistent_unfuse_pair_rejected(self):
        with pytest.raises(ValueError):
            Pattern("x", Phase.INTERPRET, toks("3-"),
                    ((0, (Token(4), Token(4))),))


class TestDatabaseMergeAndFiles:
    def test_merge_is_order_insensitive(self):
        obs = [seg("3-3r"), seg("3-3-3r"), seg("3-3r"), seg("2w2-")]
        left, right = PatternDatabase(), PatternDatabase()
        extract_patterns(obs[:2], left)
        extract_patterns(obs[2:], right)
        ab, ba = PatternDatabase(), PatternDatabase()
        ab.merge(left)
        ab.merge(right)
        ba.merge(right)
        ba.merge(left)
        assert ab.patterns() == ba.patterns()
        direct = PatternDatabase()
        extract_patterns(obs, direct)
        assert {(p.tokens, p.unfuse_positions, p.source_count)
                for p in ab.patterns()} \
            == {(p.tokens, p.unfuse_positions, p.source_count)
                for p in direct.patterns()}

    def test_duplicate_merge_only_bumps_counts(self):
        db = PatternDatabase()
        extract_patterns([seg("1r1w")], db)
        other = PatternDatabase()
        extract_patterns([seg("1r1w")], other)
        db.merge(other)
        assert len(db.patterns()) == 1
        assert db.patterns()[0].source_count == 2

    def test_file_round_trip(self, tmp_path):
        db = PatternDatabase()
        extract_patterns(
            [seg("3-3r"), seg("3-3-3r"), seg("12w12-", label="y",
                                             phase=Phase.LOAD)], db)
        path = tmp_path / "patterns.db"
        save_patterns(db, path)
        loaded = load_patterns(path)
        assert loaded.patterns() == db.patterns()

    def test_file_round_trip_preserves_counts_and_metadata(self, tmp_path):
        db = PatternDatabase()
        extract_patterns([seg("1r1w"), seg("1r1w")], db)
        db.metadata["trace_count"] = "7"
        path = tmp_path / "patterns.db"
        save_patterns(db, path)
        loaded = load_patterns(path)
        assert loaded.metadata["trace_count"] == "7"
        assert loaded.patterns()[0].source_count == 2
