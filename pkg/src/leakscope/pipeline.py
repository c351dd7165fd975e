"""End-to-end orchestration: simulate, profile, generalize, attack, report.

A run is fully described by a ``RunConfig`` and reproducible from it: all
randomness is derived from the config seed, outputs contain no wall-clock
data, and recorded paths are relative to the output directory.

The profiling stage consumes every packaged (or user-supplied) test-suite
program; the target program is simulated separately, its ground-truth labels
are withheld from the attack and used only to score the result afterwards.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path

from .attack import prune_with_timing, save_result, segment_trace
from .errors import LeakscopeError, StageError
from .generalization import compile_matchers, save_matchers
from .profiling import (
    PatternDatabase,
    extract_patterns,
    save_patterns,
    segment_with_ground_truth,
)
from .timing import TimingParams, train_timing_classifier
from .trace_model import (
    ExecutionTrace,
    Phase,
    load_labels,
    load_trace,
    save_labels,
    save_trace,
)
from .victim import (
    NoiseModel,
    default_spec,
    interpret_phase,
    load_phase,
    parse_program_file,
)
from .victim.expansion import load_spec

TARGET_PREFIX = "target_"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    fusion_probability: float = 0.2
    latency_jitter: int = 2
    max_splits: int = 3
    slack: int = 3
    max_steps: int = 100_000
    testsuite_dir: str | None = None
    expansion_spec: str | None = None
    target_program: str | None = None
    target_inputs: tuple[int, ...] = (3, 2)
    use_timing: bool = False
    timing_trees: int = 50
    timing_depth: int = 8
    confidence_floor: float = 0.15
    workers: int = 4
    out_dir: str = "out"

    def to_json(self) -> str:
        doc = asdict(self)
        doc["target_inputs"] = list(self.target_inputs)
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        doc = json.loads(text)
        if "target_inputs" in doc:
            doc["target_inputs"] = tuple(doc["target_inputs"])
        return cls(**doc)


def packaged_testsuite_dir() -> Path:
    return Path(resources.files("leakscope").joinpath("testsuite"))


def testsuite_programs(directory: str | Path) -> list[Path]:
    """Profiling programs: every .mvm file not marked as an attack target."""
    paths = sorted(Path(directory).glob("*.mvm"))
    return [p for p in paths if not p.name.startswith(TARGET_PREFIX)]


def default_target_program() -> Path:
    return packaged_testsuite_dir() / "target_loop.mvm"


def _noise(config: RunConfig) -> NoiseModel:
    return NoiseModel(
        fusion_probability=config.fusion_probability,
        latency_jitter=config.latency_jitter,
        seed=config.seed,
    )


def _simulate_program(path: Path, spec, config: RunConfig, out_dir: Path,
                      run_index: int) -> list[Path]:
    """Simulate one program over its input sweeps; returns trace file paths."""
    program = parse_program_file(path)
    sweeps = program.input_sweeps or ((),)
    written: list[Path] = []
    for sweep_idx, inputs in enumerate(sweeps):
        noise = NoiseModel(
            fusion_probability=config.fusion_probability,
            latency_jitter=config.latency_jitter,
            seed=config.seed + 7919 * (run_index + 1) + sweep_idx,
        )
        if len(inputs) != program.entry.n_params:
            raise StageError(
                "simulate-suite",
                f"{path.name}: input sweep {sweep_idx} has {len(inputs)} "
                f"values, entry takes {program.entry.n_params}")
        stem = f"{path.stem}__{sweep_idx}"
        for phase_name, trace in (
                ("load", load_phase(program, spec, noise)),
                ("interp", interpret_phase(program, list(inputs), spec, noise,
                                           config.max_steps))):
            trace_path = out_dir / f"{stem}__{phase_name}.trace"
            save_trace(trace, trace_path)
            save_labels(trace.labels, trace_path.with_suffix(".labels"))
            written.append(trace_path)
    return written


def profile_traces(trace_paths: list[Path], workers: int = 4) -> PatternDatabase:
    """Segment labeled traces and fold their patterns into one database."""
    def one(path: Path) -> PatternDatabase:
        labels = load_labels(path.with_suffix(".labels"))
        trace = load_trace(path, labels=labels)
        db = PatternDatabase()
        extract_patterns(segment_with_ground_truth(trace), db)
        return db

    merged = PatternDatabase()
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for db in pool.map(one, trace_paths):
            merged.merge(db)
    merged.metadata["trace_count"] = str(len(trace_paths))
    return merged


def _timing_samples(trace_paths: list[Path]) -> list[tuple[list[int], str]]:
    samples: list[tuple[list[int], str]] = []
    for path in trace_paths:
        labels = load_labels(path.with_suffix(".labels"))
        trace = load_trace(path, labels=labels)
        if trace.phase is not Phase.INTERPRET:
            continue
        for span in labels:
            vec = [im.latency_cycles
                   for im in trace.measurements[span.start:span.end]]
            samples.append((vec, span.opcode))
    return samples


def _phase_stats(segmentation, withheld_labels) -> dict:
    segments = segmentation.segments
    n = len(segments)
    stats = {
        "segments": n,
        "complete": segmentation.complete,
    }
    if n:
        stats["frac_size_1"] = round(
            sum(1 for s in segments if len(s.candidates) == 1) / n, 6)
        stats["frac_size_le_2"] = round(
            sum(1 for s in segments if len(s.candidates) <= 2) / n, 6)
        stats["frac_size_le_3"] = round(
            sum(1 for s in segments if len(s.candidates) <= 3) / n, 6)
    if withheld_labels is not None:
        truth = [(span.start, span.end) for span in withheld_labels]
        got = [(s.start, s.end) for s in segments]
        stats["boundaries_exact"] = got == truth
        if got == truth:
            hits = sum(1 for s, span in zip(segments, withheld_labels)
                       if span.opcode in s.candidates)
            stats["true_in_set"] = round(hits / n, 6) if n else 1.0
    return stats


def run_pipeline(config: RunConfig) -> dict:
    """Execute every stage; returns the summary written to the output dir."""
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "traces").mkdir(exist_ok=True)
    (out / "target").mkdir(exist_ok=True)

    spec = load_spec(config.expansion_spec) if config.expansion_spec \
        else default_spec()

    # -- simulate the profiling suite ------------------------------------
    suite_dir = Path(config.testsuite_dir) if config.testsuite_dir \
        else packaged_testsuite_dir()
    programs = testsuite_programs(suite_dir)
    if not programs:
        raise StageError("profile", f"no test-suite programs in {suite_dir}")
    trace_paths: list[Path] = []
    try:
        for run_index, path in enumerate(programs):
            trace_paths.extend(
                _simulate_program(path, spec, config, out / "traces", run_index))
    except StageError:
        raise
    except LeakscopeError as exc:
        raise StageError("simulate-suite", exc.message) from exc

    # -- profile ----------------------------------------------------------
    try:
        db = profile_traces(trace_paths, config.workers)
    except LeakscopeError as exc:
        raise StageError("profile", exc.message) from exc
    if len(db) == 0:
        raise StageError("profile", "no patterns extracted")
    save_patterns(db, out / "patterns.db")

    # -- generalize ---------------------------------------------------------
    try:
        matchers = compile_matchers(db, config.max_splits, config.slack)
    except LeakscopeError as exc:
        raise StageError("generalize", exc.message) from exc
    save_matchers(matchers, out / "matchers.db")

    # -- simulate the target (labels withheld from the attack) -----------
    target_path = Path(config.target_program) if config.target_program \
        else default_target_program()
    try:
        program = parse_program_file(target_path)
        noise = _noise(config)
        target_traces = {
            "load": load_phase(program, spec, noise),
            "interp": interpret_phase(program, list(config.target_inputs),
                                      spec, noise, config.max_steps),
        }
    except LeakscopeError as exc:
        raise StageError("simulate-target", exc.message) from exc
    withheld: dict[str, tuple] = {}
    for name, trace in target_traces.items():
        withheld[name] = trace.labels
        production = trace.without_ground_truth()
        save_trace(production, out / "target" / f"{name}.trace")
        save_labels(trace.labels, out / "target" / f"{name}.labels")

    # -- attack ------------------------------------------------------------
    classifier = None
    if config.use_timing:
        samples = _timing_samples(trace_paths)
        counts: dict[str, int] = {}
        for _, label in samples:
            counts[label] = counts.get(label, 0) + 1
        usable = [s for s in samples if counts[s[1]] >= 20]
        if len({lbl for _, lbl in usable}) >= 2:
            classifier = train_timing_classifier(
                usable, TimingParams(n_trees=config.timing_trees,
                                     max_depth=config.timing_depth,
                                     seed=config.seed))
            classifier.save(out / "timing_model.json")

    results = {}
    try:
        for name in ("load", "interp"):
            production = load_trace(out / "target" / f"{name}.trace")
            segmentation = segment_trace(production, matchers)
            if classifier is not None and name == "interp":
                segmentation = prune_with_timing(
                    segmentation, production, classifier,
                    config.confidence_floor)
            save_result(segmentation, production.phase.value,
                        out / "target" / f"{name}.result.json")
            results[name] = (segmentation, production)
    except LeakscopeError as exc:
        raise StageError("attack", exc.message) from exc

    # -- report -------------------------------------------------------------
    summary = {
        "seed": config.seed,
        "fusion_probability": config.fusion_probability,
        "latency_jitter": config.latency_jitter,
        "suite_programs": [p.name for p in programs],
        "target_program": target_path.name,
        "pattern_count": len(db),
        "matcher_count": len(matchers),
        "timing_model": classifier is not None,
        "phases": {},
    }
    for name, (segmentation, production) in results.items():
        stats = _phase_stats(segmentation, withheld[name])
        if name == "interp":
            amp = target_traces["interp"].metadata.get("amplification")
            if amp is not None:
                stats["amplification"] = float(amp)
        summary["phases"][name] = stats

    (out / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")
    csv_lines = ["phase,metric,value"]
    for name in sorted(summary["phases"]):
        for metric in sorted(summary["phases"][name]):
            csv_lines.append(f"{name},{metric},{summary['phases'][name][metric]}")
    (out / "summary.csv").write_text("\n".join(csv_lines) + "\n")
    return summary
