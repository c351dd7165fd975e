"""Attack-phase pipeline: segment unlabeled traces and classify segments.

A production trace is a single token string with no instruction boundaries.
Segmentation is string matching with backtracking: starting at offset 0, try
every matcher, prefer the longest match, and recurse; when no matcher fits,
backtrack to the previous choice point. Dead offsets are memoized, so the
search visits each position at most once per distinct failure.

A completed segmentation yields candidate sets for free: the candidates of
a segment are the labels of all matchers that accept exactly that span.
An optional timing classifier then prunes multi-candidate segments using
per-segment latency vectors, and load-phase label sequences of known
functions can be located inside a larger library trace.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

from .errors import ClassifierError, MatcherError, SegmentationError
from .generalization import GeneralizedMatcher
from .timing import TimingClassifier
from .trace_model import ExecutionTrace, Token, format_token_string, tokenize

ORACLE_MAX_TOKENS = 500


@dataclass(frozen=True)
class Segment:
    start: int
    end: int
    candidates: frozenset[str]
    confidence: tuple[tuple[str, float], ...] | None = None

    def top_candidate(self) -> str:
        if self.confidence:
            return max(sorted(dict(self.confidence)),
                       key=lambda lbl: dict(self.confidence)[lbl])
        return min(self.candidates)


@dataclass(frozen=True)
class Segmentation:
    segments: tuple[Segment, ...]
    complete: bool

    def __post_init__(self):
        prev = 0
        for seg in self.segments:
            if seg.start != prev or seg.end <= seg.start:
                raise ValueError("segments must be contiguous and non-empty")
            prev = seg.end

    def boundaries(self) -> tuple[int, ...]:
        return tuple(s.end for s in self.segments)

    def label_sequence(self) -> tuple[str, ...]:
        return tuple(s.top_candidate() for s in self.segments)


@dataclass(frozen=True)
class EnumerationResult:
    segmentations: tuple[Segmentation, ...]
    truncated: bool


def _phase_matchers(trace: ExecutionTrace,
                    matchers: list[GeneralizedMatcher]) -> list[GeneralizedMatcher]:
    if not matchers:
        raise MatcherError("no matchers supplied")
    selected = [m for m in matchers if m.phase is trace.phase]
    if not selected:
        raise MatcherError(f"no matchers for phase {trace.phase.value!r}")
    return selected


def _ends_from(tokens: tuple[Token, ...], offset: int,
               matchers: list[GeneralizedMatcher],
               cache: dict[int, tuple[int, ...]]) -> tuple[int, ...]:
    """Distinct span ends available at ``offset``, ascending."""
    if offset not in cache:
        ends: set[int] = set()
        for m in matchers:
            ends.update(e for e in m.match_ends(tokens, offset) if e > offset)
        cache[offset] = tuple(sorted(ends))
    return cache[offset]


def _span_candidates(tokens: tuple[Token, ...], start: int, end: int,
                     matchers: list[GeneralizedMatcher],
                     semantic_classes: dict[str, str] | None) -> frozenset[str]:
    labels = {m.label for m in matchers if end in m.match_ends(tokens, start)}
    if semantic_classes:
        labels = {semantic_classes.get(lbl, lbl) for lbl in labels}
    return frozenset(labels)


def _to_segments(tokens, cuts: list[int], matchers,
                 semantic_classes) -> tuple[Segment, ...]:
    segments = []
    prev = 0
    for end in cuts:
        segments.append(Segment(
            prev, end,
            _span_candidates(tokens, prev, end, matchers, semantic_classes)))
        prev = end
    return tuple(segments)


def segment_trace(trace: ExecutionTrace, matchers: list[GeneralizedMatcher],
                  semantic_classes: dict[str, str] | None = None) -> Segmentation:
    """First complete segmentation under longest-match-first backtracking."""
    ms = _phase_matchers(trace, matchers)
    tokens = tokenize(trace)
    if not tokens:
        return Segmentation((), complete=True)

    cache: dict[int, tuple[int, ...]] = {}
    dead: set[int] = set()
    cuts: list[int] = []  # cuts[i] is the edge chosen into stack level i+1
    deepest = 0

    def choices(offset: int):
        return iter(reversed(_ends_from(tokens, offset, ms, cache)))

    stack: list[tuple[int, object]] = [(0, choices(0))]
    while stack:
        offset, ends = stack[-1]
        deepest = max(deepest, offset)
        advanced = False
        for end in ends:  # descending: longest match first
            if end in dead:
                continue
            cuts.append(end)
            if end == len(tokens):
                return Segmentation(
                    _to_segments(tokens, cuts, ms, semantic_classes),
                    complete=True)
            stack.append((end, choices(end)))
            advanced = True
            break
        if not advanced:
            dead.add(offset)
            stack.pop()
            if cuts:
                cuts.pop()

    context = format_token_string(tokens[deepest:deepest + 8])
    raise SegmentationError(
        f"no complete segmentation; deepest offset {deepest} of "
        f"{len(tokens)}, tokens there: {context}",
        deepest_offset=deepest, context=context)


def enumerate_segmentations(trace: ExecutionTrace,
                            matchers: list[GeneralizedMatcher],
                            cap: int = 10_000,
                            semantic_classes: dict[str, str] | None = None
                            ) -> EnumerationResult:
    """Exhaustive oracle: every complete tiling, in ascending-end DFS order.

    Independent of ``segment_trace``'s search: no longest-first ordering,
    plain recursive enumeration (capped). Traces are limited to
    ``ORACLE_MAX_TOKENS`` tokens.
    """
    if cap <= 0:
        raise ValueError("cap must be positive")
    ms = _phase_matchers(trace, matchers)
    tokens = tokenize(trace)
    if len(tokens) > ORACLE_MAX_TOKENS:
        raise ValueError(
            f"oracle accepts at most {ORACLE_MAX_TOKENS} tokens, "
            f"got {len(tokens)}")

    cache: dict[int, tuple[int, ...]] = {}
    dead: set[int] = set()
    results: list[Segmentation] = []
    truncated = False

    def recurse(offset: int, cuts: list[int]) -> bool:
        nonlocal truncated
        if offset == len(tokens):
            if len(results) >= cap:
                truncated = True
                return False
            results.append(Segmentation(
                _to_segments(tokens, cuts, ms, semantic_classes),
                complete=True))
            return True
        found = False
        for end in _ends_from(tokens, offset, ms, cache):
            if end in dead:
                continue
            cuts.append(end)
            if recurse(end, cuts):
                found = True
            cuts.pop()
            if truncated:
                return found
        if not found:
            dead.add(offset)
        return found

    recurse(0, [])
    return EnumerationResult(tuple(results), truncated)


def prune_with_timing(segmentation: Segmentation, trace: ExecutionTrace,
                      clf: TimingClassifier,
                      confidence_floor: float = 0.15) -> Segmentation:
    """Drop low-probability members from multi-candidate segments.

    Probabilities are renormalized over the candidate members the classifier
    knows; members it never saw are kept. The predicted-best member always
    survives, so a set can never become empty.
    """
    if not 0.0 <= confidence_floor < 1.0:
        raise ClassifierError("confidence_floor must be in [0, 1)")
    out = []
    for seg in segmentation.segments:
        if len(seg.candidates) <= 1:
            out.append(seg)
            continue
        latencies = [im.latency_cycles
                     for im in trace.measurements[seg.start:seg.end]]
        probs = clf.predict_proba(latencies)
        known = {lbl: probs[lbl] for lbl in seg.candidates if lbl in probs}
        unknown = {lbl for lbl in seg.candidates if lbl not in probs}
        if not known:
            out.append(seg)
            continue
        total = sum(known.values())
        if total <= 0:
            norm = {lbl: 1.0 / len(known) for lbl in known}
        else:
            norm = {lbl: p / total for lbl, p in known.items()}
        best = max(sorted(norm), key=lambda lbl: norm[lbl])
        kept = {lbl for lbl, p in norm.items() if p >= confidence_floor}
        kept.add(best)
        kept |= unknown
        out.append(replace(
            seg, candidates=frozenset(kept),
            confidence=tuple(sorted((lbl, round(p, 6))
                                    for lbl, p in norm.items()))))
    return Segmentation(tuple(out), segmentation.complete)


def match_function(needle: list[str], haystack: Segmentation) -> list[int]:
    """Offsets where the needle's label sequence occurs in the haystack."""
    if not needle:
        raise MatcherError("needle label sequence is empty")
    seq = haystack.label_sequence()
    n = len(needle)
    return [i for i in range(len(seq) - n + 1)
            if list(seq[i:i + n]) == list(needle)]


# ----------------------------------------------------------------------------
# Result (de)serialization for the CLI
# ----------------------------------------------------------------------------

def segmentation_to_dict(segmentation: Segmentation, phase: str) -> dict:
    return {
        "phase": phase,
        "complete": segmentation.complete,
        "segments": [
            {
                "start": s.start,
                "end": s.end,
                "candidates": sorted(s.candidates),
                **({"confidence": {lbl: p for lbl, p in s.confidence}}
                   if s.confidence else {}),
            }
            for s in segmentation.segments
        ],
    }


def segmentation_from_dict(doc: dict) -> tuple[Segmentation, str]:
    segments = tuple(
        Segment(d["start"], d["end"], frozenset(d["candidates"]),
                tuple(sorted(d["confidence"].items()))
                if "confidence" in d else None)
        for d in doc["segments"])
    return Segmentation(segments, doc["complete"]), doc["phase"]


def save_result(segmentation: Segmentation, phase: str, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(segmentation_to_dict(segmentation, phase),
                   indent=2, sort_keys=True) + "\n")


def load_result(path: str | Path) -> tuple[Segmentation, str]:
    return segmentation_from_dict(json.loads(Path(path).read_text()))
