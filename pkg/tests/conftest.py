from dataclasses import dataclass

import pytest

from leakscope.generalization import GeneralizedMatcher, compile_matchers
from leakscope.profiling import (
    LabeledSegment,
    PatternDatabase,
    extract_patterns,
    segment_with_ground_truth,
)
from leakscope.trace_model import ExecutionTrace
from leakscope.victim import (
    ExpansionSpec,
    NoiseModel,
    default_spec,
    interpret_phase,
    load_phase,
)
from leakscope.pipeline import packaged_testsuite_dir, testsuite_programs
from leakscope.victim.bytecode import parse_program_file


@dataclass
class ProfiledWorld:
    """Testsuite profiled across fusion settings: the attacker's knowledge."""

    spec: ExpansionSpec
    db: PatternDatabase
    matchers: list[GeneralizedMatcher]
    traces: list[ExecutionTrace]          # labeled, ground truth attached
    segments: list[LabeledSegment]


@pytest.fixture(scope="session")
def world() -> ProfiledWorld:
    spec = default_spec()
    db = PatternDatabase()
    traces: list[ExecutionTrace] = []
    segments: list[LabeledSegment] = []
    for path in testsuite_programs(packaged_testsuite_dir()):
        program = parse_program_file(path)
        for sweep_idx, inputs in enumerate(program.input_sweeps or ((),)):
            for noise_idx, fusion_p in enumerate((0.0, 0.5, 1.0)):
                noise = NoiseModel(fusion_probability=fusion_p,
                                   seed=31 * sweep_idx + noise_idx)
                for trace in (load_phase(program, spec, noise),
                              interpret_phase(program, list(inputs), spec,
                                              noise)):
                    segs = segment_with_ground_truth(trace)
                    extract_patterns(segs, db)
                    traces.append(trace)
                    segments.extend(segs)
    matchers = compile_matchers(db, max_splits=3, slack=3)
    return ProfiledWorld(spec, db, matchers, traces, segments)
