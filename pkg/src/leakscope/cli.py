"""leakscope command-line interface.

Commands map onto the pipeline stages: ``simulate`` produces traces,
``profile`` turns labeled traces into a pattern database, ``generalize``
compiles matchers, ``attack`` segments a production trace, ``match`` looks
up known function signatures, ``analyze-isa`` computes native candidate-set
distributions, and ``run`` wires the whole thing end to end.

Every command exits 0 on success; on failure it prints a single line
``leakscope-error:<code>: <message>`` to stderr and exits 1.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import isa_dataset, leakage_analysis
from .attack import (
    load_result,
    match_function,
    prune_with_timing,
    save_result,
    segment_trace,
)
from .errors import LeakscopeError
from .generalization import compile_matchers, load_matchers, save_matchers
from .pipeline import RunConfig, profile_traces, run_pipeline
from .profiling import load_patterns, save_patterns
from .timing import TimingClassifier, TimingParams, train_timing_classifier
from .trace_model import AttackerModel, load_labels, load_trace, save_labels, save_trace
from .victim import NoiseModel, default_spec, interpret_phase, load_phase
from .victim.bytecode import parse_program_file
from .victim.expansion import load_spec


def _parse_ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",")] if text else []


def _cmd_simulate(args) -> int:
    program = parse_program_file(args.program)
    spec = load_spec(args.spec) if args.spec else default_spec()
    noise = NoiseModel(fusion_probability=args.fusion_p,
                       latency_jitter=args.jitter, seed=args.seed)
    if args.inputs is not None:
        inputs = _parse_ints(args.inputs)
    else:
        inputs = list(program.input_sweeps[0]) if program.input_sweeps else []
    out = Path(args.out_prefix)
    out.mkdir(parents=True, exist_ok=True)
    traces = {
        "load": load_phase(program, spec, noise),
        "interp": interpret_phase(program, inputs, spec, noise, args.max_steps),
    }
    for name, trace in traces.items():
        if args.production:
            save_trace(trace.without_ground_truth(), out / f"{name}.trace")
        else:
            save_trace(trace, out / f"{name}.trace")
            save_labels(trace.labels, out / f"{name}.labels")
    if args.verbose:
        for name, trace in traces.items():
            print(f"{name}: {len(trace)} IMs, {len(trace.labels)} instructions",
                  file=sys.stderr)
    return 0


def _cmd_profile(args) -> int:
    trace_paths = sorted(Path(args.traces).glob("*.trace"))
    if not trace_paths:
        raise LeakscopeError(f"no .trace files under {args.traces}")
    db = profile_traces(trace_paths, args.workers)
    save_patterns(db, args.out)
    if args.verbose:
        print(f"{len(db)} patterns from {len(trace_paths)} traces",
              file=sys.stderr)
    return 0


def _cmd_generalize(args) -> int:
    db = load_patterns(args.db)
    matchers = compile_matchers(db, args.max_splits, args.slack)
    save_matchers(matchers, args.out)
    if args.verbose:
        print(f"{len(matchers)} matchers from {len(db)} patterns",
              file=sys.stderr)
    return 0


def _cmd_attack(args) -> int:
    trace = load_trace(args.trace)
    matchers = load_matchers(args.matchers)
    segmentation = segment_trace(trace, matchers)
    if args.timing_model:
        clf = TimingClassifier.load(args.timing_model)
        segmentation = prune_with_timing(segmentation, trace, clf,
                                         args.confidence_floor)
    save_result(segmentation, trace.phase.value, args.out)
    if args.verbose:
        sizes = [len(s.candidates) for s in segmentation.segments]
        solved = sum(1 for n in sizes if n == 1)
        print(f"{len(sizes)} segments, {solved} fully recovered",
              file=sys.stderr)
    return 0


def _cmd_train_timing(args) -> int:
    trace_paths = sorted(Path(args.traces).glob("*.trace"))
    samples = []
    for path in trace_paths:
        labels_path = path.with_suffix(".labels")
        if not labels_path.exists():
            continue
        trace = load_trace(path, labels=load_labels(labels_path))
        if trace.phase.value != args.phase:
            continue
        for span in trace.labels:
            vec = [im.latency_cycles
                   for im in trace.measurements[span.start:span.end]]
            samples.append((vec, span.opcode))
    counts: dict[str, int] = {}
    for _, label in samples:
        counts[label] = counts.get(label, 0) + 1
    usable = [s for s in samples if counts[s[1]] >= 20]
    clf = train_timing_classifier(
        usable, TimingParams(n_trees=args.trees, max_depth=args.depth,
                             seed=args.seed))
    clf.save(args.out)
    if args.verbose:
        print(f"classes: {clf.classes}, holdout accuracy "
              f"{clf.holdout_accuracy}", file=sys.stderr)
    return 0


def _cmd_match(args) -> int:
    needle_seg, needle_phase = load_result(args.needle)
    haystack_seg, haystack_phase = load_result(args.haystack)
    if needle_phase != haystack_phase:
        raise LeakscopeError(
            f"phase mismatch: needle {needle_phase}, haystack {haystack_phase}")
    offsets = match_function(list(needle_seg.label_sequence()), haystack_seg)
    doc = json.dumps({"offsets": offsets}, sort_keys=True)
    if args.out:
        Path(args.out).write_text(doc + "\n")
    else:
        print(doc)
    return 0


def _cmd_analyze_isa(args) -> int:
    tee = isa_dataset.TeeKind(args.tee)
    dataset = isa_dataset.load_dataset(args.dataset, tee, args.march)
    lines = []
    if args.sweep:
        sweep = leakage_analysis.resolution_sweep(
            dataset, _parse_ints(args.sweep), args.weight)
        lines.append("resolution,percentile,min_set_size")
        for res in sorted(sweep):
            for pct, size in sweep[res].points:
                lines.append(f"{res},{pct},{size}")
    else:
        if args.model == "ideal":
            classes = leakage_analysis.ideal_classes(dataset)
        else:
            classes = leakage_analysis.build_classes(
                dataset, AttackerModel.sota(resolution=args.resolution))
        dist = leakage_analysis.size_distribution(classes, dataset, args.weight)
        lines.append("percentile,min_set_size")
        lines.extend(f"{pct},{size}" for pct, size in dist.points)
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_dataset(args) -> int:
    if args.dataset_command == "validate":
        counts = isa_dataset.validate_dataset(args.path)
        total = sum(counts.values())
        print(json.dumps({"records": total, "microarchitectures": counts},
                         sort_keys=True))
        return 0
    raise LeakscopeError(f"unknown dataset command {args.dataset_command!r}")


def _cmd_report(args) -> int:
    result_paths = sorted(Path(args.results).glob("*.result.json"))
    if not result_paths:
        raise LeakscopeError(f"no *.result.json files under {args.results}")
    lines = ["trace,phase,segments,frac_size_1,frac_size_le_2,frac_size_le_3"]
    for path in result_paths:
        segmentation, phase = load_result(path)
        sizes = [len(s.candidates) for s in segmentation.segments]
        n = len(sizes) or 1
        lines.append(",".join((
            path.name.removesuffix(".result.json"), phase, str(len(sizes)),
            f"{sum(1 for v in sizes if v == 1) / n:.6f}",
            f"{sum(1 for v in sizes if v <= 2) / n:.6f}",
            f"{sum(1 for v in sizes if v <= 3) / n:.6f}")))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_run(args) -> int:
    if args.config:
        config = RunConfig.from_json(Path(args.config).read_text())
        if args.out:
            config = replace(config, out_dir=args.out)
    else:
        config = RunConfig(
            seed=args.seed,
            fusion_probability=args.fusion_p,
            latency_jitter=args.jitter,
            max_splits=args.max_splits,
            slack=args.slack,
            testsuite_dir=args.testsuite,
            target_program=args.target,
            target_inputs=tuple(_parse_ints(args.inputs)) if args.inputs
            else (3, 2),
            use_timing=args.timing,
            out_dir=args.out or "out",
        )
    (Path(config.out_dir)).mkdir(parents=True, exist_ok=True)
    (Path(config.out_dir) / "config.json").write_text(config.to_json())
    summary = run_pipeline(config)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="leakscope",
        description="Desk-scale bytecode leakage analysis toolkit")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run the victim and emit traces")
    p.add_argument("--program", required=True)
    p.add_argument("--inputs", default=None,
                   help="comma-separated entry inputs (default: first #input)")
    p.add_argument("--spec", default=None, help="expansion spec JSON")
    p.add_argument("--fusion-p", type=float, default=0.0)
    p.add_argument("--jitter", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-steps", type=int, default=100_000)
    p.add_argument("--production", action="store_true",
                   help="strip ground truth (labels, ips, fusion metadata)")
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("profile", help="extract patterns from labeled traces")
    p.add_argument("--traces", required=True)
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_profile)

    p = sub.add_parser("generalize", help="compile matchers from a pattern db")
    p.add_argument("--db", required=True)
    p.add_argument("--max-splits", type=int, default=3)
    p.add_argument("--slack", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_generalize)

    p = sub.add_parser("attack", help="segment a production trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--matchers", required=True)
    p.add_argument("--timing-model", default=None)
    p.add_argument("--confidence-floor", type=float, default=0.15)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_attack)

    p = sub.add_parser("train-timing",
                       help="fit the latency classifier from labeled traces")
    p.add_argument("--traces", required=True)
    p.add_argument("--phase", choices=("load", "interpret"),
                   default="interpret")
    p.add_argument("--trees", type=int, default=50)
    p.add_argument("--depth", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train_timing)

    p = sub.add_parser("match", help="locate a needle function in a haystack")
    p.add_argument("--needle", required=True)
    p.add_argument("--haystack", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_match)

    p = sub.add_parser("analyze-isa",
                       help="native candidate-set size distributions")
    p.add_argument("--dataset", required=True)
    p.add_argument("--tee", choices=("sgx", "sev", "none"), default="none")
    p.add_argument("--march", required=True)
    p.add_argument("--model", choices=("sota", "ideal"), default="sota")
    p.add_argument("--resolution", type=int, default=10)
    p.add_argument("--sweep", default=None,
                   help="comma-separated resolutions (overrides --model)")
    p.add_argument("--weight", choices=("class", "variant"), default="class")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_analyze_isa)

    p = sub.add_parser("dataset", help="dataset utilities")
    dsub = p.add_subparsers(dest="dataset_command", required=True)
    v = dsub.add_parser("validate", help="parse a dataset and report counts")
    v.add_argument("path")
    v.set_defaults(func=_cmd_dataset)

    p = sub.add_parser("report", help="summarize attack results as CSV")
    p.add_argument("--results", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("run", help="full pipeline")
    p.add_argument("--config", default=None, help="RunConfig JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fusion-p", type=float, default=0.2)
    p.add_argument("--jitter", type=int, default=2)
    p.add_argument("--max-splits", type=int, default=3)
    p.add_argument("--slack", type=int, default=3)
    p.add_argument("--testsuite", default=None)
    p.add_argument("--target", default=None)
    p.add_argument("--inputs", default=None)
    p.add_argument("--timing", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_run)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except LeakscopeError as exc:
        print(f"leakscope-error:{exc.code}: {exc.message}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"leakscope-error:io: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
