"""Build a pattern database from ground-truth (labeled) traces.

Profiling runs the victim on known programs, cuts each trace at the known
instruction boundaries, and stores one token pattern per observed expansion.
Macro-fusion makes patterns non-deterministic: a fuseable step pair shows up
either as one merged token or as two. Storing every combination explodes
exponentially, so the database keeps only the fully fused form of each
pattern plus the list of positions that may appear unfused; a pattern with k
such positions covers all 2^k observable variants.

Fusion ground truth is available while profiling (the simulator records it
in trace metadata, mirroring how an attacker cross-references instruction
pointers against the victim binary). When a trace lacks that metadata, the
extractor falls back to pairwise inference: two observations of one label
that differ by a single merge/split of adjacent tokens are folded into one
annotated pattern.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

from .errors import IntegrityError, ParseError
from .trace_model import (
    ExecutionTrace,
    MemAccess,
    Phase,
    Token,
    format_token_string,
    parse_token_string,
    tokenize,
)

TokenPair = tuple[Token, Token]
UnfuseMap = dict[int, TokenPair]


def merge_tokens(a: Token, b: Token) -> Token | None:
    """Token observed when a pair fuses, or None if the pair cannot fuse."""
    if a.code_page != b.code_page:
        return None
    if a.mem_access is not MemAccess.NONE and b.mem_access is not MemAccess.NONE:
        return None
    mem = a.mem_access if a.mem_access is not MemAccess.NONE else b.mem_access
    return Token(a.code_page, mem)


@dataclass(frozen=True)
class Pattern:
    """Fully fused token sequence for one opcode, with unfuse annotations."""

    label: str
    phase: Phase
    tokens: tuple[Token, ...]
    unfuse_positions: tuple[tuple[int, TokenPair], ...] = ()
    source_count: int = 1

    def __post_init__(self):
        for pos, (a, b) in self.unfuse_positions:
            if not 0 <= pos < len(self.tokens):
                raise ValueError(f"unfuse position {pos} out of range")
            if merge_tokens(a, b) != self.tokens[pos]:
                raise ValueError(
                    f"unfuse pair {a.text},{b.text} does not merge to "
                    f"{self.tokens[pos].text}")

    @property
    def unfuse_map(self) -> UnfuseMap:
        return dict(self.unfuse_positions)

    def variants(self):
        """Yield every observable token sequence (all 2^k unfuse subsets)."""
        positions = [pos for pos, _ in self.unfuse_positions]
        pairs = dict(self.unfuse_positions)
        for r in range(len(positions) + 1):
            for subset in combinations(positions, r):
                yield expand_variant(self.tokens, pairs, frozenset(subset))[0]

    def matches(self, observed: tuple[Token, ...]) -> bool:
        lo, hi = len(self.tokens), len(self.tokens) + len(self.unfuse_positions)
        if not lo <= len(observed) <= hi:
            return False
        return any(observed == v for v in self.variants())


def expand_variant(tokens: tuple[Token, ...], pairs: UnfuseMap,
                   unfused: frozenset[int]):
    """Expand a fused base sequence, splitting the selected positions.

    Returns the expanded sequence and a back-map from each expanded index to
    (base index, role) with role 0 = unsplit token, 1/2 = halves of a split.
    """
    out: list[Token] = []
    backmap: list[tuple[int, int]] = []
    for i, tok in enumerate(tokens):
        if i in unfused:
            a, b = pairs[i]
            out.extend((a, b))
            backmap.extend(((i, 1), (i, 2)))
        else:
            out.append(tok)
            backmap.append((i, 0))
    return tuple(out), tuple(backmap)


@dataclass
class LabeledSegment:
    """One profiled expansion: tokens plus fusion ground truth, if known."""

    tokens: tuple[Token, ...]
    label: str
    phase: Phase
    fused_at: dict[int, TokenPair] = field(default_factory=dict)
    fuseable_at: frozenset[int] = frozenset()


def _parse_fused_meta(trace: ExecutionTrace) -> tuple[dict[int, TokenPair],
                                                      frozenset[int]]:
    fused: dict[int, TokenPair] = {}
    for item in filter(None, trace.metadata.get("fused_at", "").split(";")):
        idx, _, pair = item.partition("=")
        a, _, b = pair.partition("|")
        fused[int(idx)] = (parse_token_string(a)[0], parse_token_string(b)[0])
    fuseable = frozenset(
        int(v) for v in filter(None, trace.metadata.get("fuseable_at", "").split(",")))
    return fused, fuseable


def segment_with_ground_truth(trace: ExecutionTrace) -> list[LabeledSegment]:
    """Cut a labeled trace at its ground-truth instruction boundaries.

    Interpret-phase spans must each end at a control-flow measurement (the
    dispatch jump); load-phase spans must each start at the parse loop's
    entry instruction pointer when IPs are present.
    """
    if trace.labels is None:
        raise IntegrityError("trace carries no ground-truth labels")
    tokens = tokenize(trace)
    fused, fuseable = _parse_fused_meta(trace)

    if trace.phase is Phase.INTERPRET:
        for span in trace.labels:
            if span.end == span.start:
                continue
            if not trace.measurements[span.end - 1].is_control_flow:
                raise IntegrityError(
                    f"label span for {span.opcode!r} does not end at a "
                    f"control-flow anchor (index {span.end - 1})")
    elif trace.phase is Phase.LOAD and trace.measurements \
            and trace.measurements[0].ip is not None:
        entry_ip = trace.measurements[0].ip
        anchor_indices = {i for i, im in enumerate(trace.measurements)
                          if im.ip == entry_ip}
        span_starts = {span.start for span in trace.labels}
        mismatch = sorted(anchor_indices ^ span_starts)
        if mismatch:
            raise IntegrityError(
                f"loop-entry anchors disagree with label spans at index "
                f"{mismatch[0]}")

    segments: list[LabeledSegment] = []
    for span in trace.labels:
        seg_fused = {i - span.start: pair for i, pair in fused.items()
                     if span.start <= i < span.end}
        seg_fuseable = frozenset(i - span.start for i in fuseable
                                 if span.start <= i < span.end - 1)
        segments.append(LabeledSegment(
            tokens[span.start:span.end], span.opcode, trace.phase,
            seg_fused, seg_fuseable))
    return segments


def _normalize(segment: LabeledSegment) -> tuple[tuple[Token, ...], UnfuseMap]:
    """Fold ground-truth fuseable pairs into the fully fused base form."""
    tokens = list(segment.tokens)
    unfuse: UnfuseMap = dict(segment.fused_at)
    for pos in sorted(segment.fuseable_at, reverse=True):
        a, b = tokens[pos], tokens[pos + 1]
        merged = merge_tokens(a, b)
        if merged is None:
            raise IntegrityError(
                f"{segment.label}: tokens {a.text},{b.text} marked fuseable "
                "but cannot merge")
        tokens[pos:pos + 2] = [merged]
        unfuse = {(p - 1 if p > pos else p): pair for p, pair in unfuse.items()}
        unfuse[pos] = (a, b)
    return tuple(tokens), unfuse


class _Entry:
    __slots__ = ("tokens", "unfuse", "count")

    def __init__(self, tokens: tuple[Token, ...], unfuse: UnfuseMap, count: int):
        self.tokens = tokens
        self.unfuse = unfuse
        self.count = count

    def variants_with_maps(self):
        positions = sorted(self.unfuse)
        for r in range(len(positions) + 1):
            for subset in combinations(positions, r):
                yield expand_variant(self.tokens, self.unfuse, frozenset(subset))


class PatternDatabase:
    """Mutable store of patterns; merging databases is a commutative fold."""

    def __init__(self):
        self._entries: dict[tuple[Phase, str], list[_Entry]] = {}
        self.metadata: dict[str, str] = {}

    def __len__(self) -> int:
        return sum(len(v) for v in self._entries.values())

    def labels(self, phase: Phase) -> list[str]:
        return sorted(lbl for (ph, lbl) in self._entries if ph is phase)

    def patterns(self) -> list[Pattern]:
        out = []
        for (phase, label), entries in self._entries.items():
            for e in entries:
                out.append(Pattern(label, phase, e.tokens,
                                   tuple(sorted(e.unfuse.items())), e.count))
        out.sort(key=lambda p: (p.phase.value, p.label,
                                format_token_string(p.tokens)))
        return out

    def patterns_for(self, label: str, phase: Phase) -> list[Pattern]:
        return [p for p in self.patterns()
                if p.label == label and p.phase is phase]

    # -- insertion ------------------------------------------------------

    def add_observation(self, segment: LabeledSegment) -> None:
        """Insert one observed segment, coalescing fusion variants."""
        key = (segment.phase, segment.label)
        bucket = self._entries.setdefault(key, [])
        if segment.fused_at or segment.fuseable_at:
            tokens, unfuse = _normalize(segment)
            for entry in bucket:
                if entry.tokens == tokens and _compatible(entry.unfuse, unfuse):
                    entry.unfuse.update(unfuse)
                    entry.count += 1
                    return
            bucket.append(_Entry(tokens, unfuse, 1))
            return
        for entry in bucket:
            if _absorb(entry, segment.tokens):
                return
        bucket.append(_Entry(segment.tokens, {}, 1))

    def merge(self, other: "PatternDatabase") -> None:
        for (phase, label), entries in other._entries.items():
            for e in entries:
                self._merge_entry(phase, label, e)
        for k, v in other.metadata.items():
            if k.endswith("_count") and k in self.metadata:
                self.metadata[k] = str(int(self.metadata[k]) + int(v))
            else:
                self.metadata.setdefault(k, v)

    def _merge_entry(self, phase: Phase, label: str, incoming: _Entry) -> None:
        bucket = self._entries.setdefault((phase, label), [])
        for entry in bucket:
            if entry.tokens == incoming.tokens \
                    and _compatible(entry.unfuse, incoming.unfuse):
                entry.unfuse.update(incoming.unfuse)
                entry.count += incoming.count
                return
        # an incoming base may be a fusion variant of a stored one (or vice
        # versa); absorb observation-style, once per source observation
        for entry in bucket:
            if entry.tokens != incoming.tokens and _absorb(entry, incoming.tokens):
                entry.count += incoming.count - 1
                for pos, pair in incoming.unfuse.items():
                    entry.unfuse.setdefault(pos, pair)
                return
        bucket.append(_Entry(incoming.tokens, dict(incoming.unfuse),
                             incoming.count))


def _compatible(a: UnfuseMap, b: UnfuseMap) -> bool:
    return all(a[p] == b[p] for p in a.keys() & b.keys())


def _absorb(entry: _Entry, obs: tuple[Token, ...]) -> bool:
    """Explain an observation against a stored entry, updating it in place.

    Accepts exact variant matches, one extra split (records a new unfuse
    position), or one extra merge (re-bases the entry on the more-fused
    form). Returns False when no single-fusion-event explanation exists.
    """
    for seq, backmap in entry.variants_with_maps():
        if obs == seq:
            entry.count += 1
            return True
    if not entry.tokens:
        return False
    for seq, backmap in entry.variants_with_maps():
        if len(obs) == len(seq) + 1:
            j = _find_split(seq, obs)
            if j is not None:
                base_idx, role = backmap[j]
                if role == 0 and base_idx not in entry.unfuse:
                    entry.unfuse[base_idx] = (obs[j], obs[j + 1])
                    entry.count += 1
                    return True
        elif len(obs) == len(seq) - 1:
            j = _find_merge(seq, obs)
            if j is not None:
                (fi, ri), (fj, rj) = backmap[j], backmap[j + 1]
                if ri == 0 and rj == 0 and fi not in entry.unfuse \
                        and fj not in entry.unfuse:
                    pair = (entry.tokens[fi], entry.tokens[fj])
                    new_tokens = entry.tokens[:fi] + (obs[j],) \
                        + entry.tokens[fj + 1:]
                    entry.unfuse = {(p - 1 if p > fj else p): pr
                                    for p, pr in entry.unfuse.items()}
                    entry.unfuse[fi] = pair
                    entry.tokens = new_tokens
                    entry.count += 1
                    return True
    return False


def _find_split(seq: tuple[Token, ...], obs: tuple[Token, ...]) -> int | None:
    """Leftmost j where obs equals seq with seq[j] split into obs[j], obs[j+1]."""
    for j in range(len(seq)):
        if obs[:j] == seq[:j] and obs[j + 2:] == seq[j + 1:] \
                and merge_tokens(obs[j], obs[j + 1]) == seq[j]:
            return j
    return None


def _find_merge(seq: tuple[Token, ...], obs: tuple[Token, ...]) -> int | None:
    """Leftmost j where obs equals seq with seq[j], seq[j+1] merged."""
    for j in range(len(obs)):
        if obs[:j] == seq[:j] and obs[j + 1:] == seq[j + 2:] \
                and merge_tokens(seq[j], seq[j + 1]) == obs[j]:
            return j
    return None


def extract_patterns(segments: list[LabeledSegment],
                     db: PatternDatabase) -> PatternDatabase:
    """Insert segmented observations into the database (in place)."""
    for segment in segments:
        db.add_observation(segment)
    db.metadata["observation_count"] = str(
        int(db.metadata.get("observation_count", "0")) + len(segments))
    return db


# ----------------------------------------------------------------------------
# Pattern database file format:
#   phase,label,token-string,unfuse:i=(a,b);j=(c,d),count
# ----------------------------------------------------------------------------

def _format_unfuse(positions: tuple[tuple[int, TokenPair], ...]) -> str:
    if not positions:
        return ""
    body = ";".join(f"{pos}=({a.text},{b.text})" for pos, (a, b) in positions)
    return f"unfuse:{body}"


def _parse_unfuse(text: str) -> tuple[tuple[int, TokenPair], ...]:
    if not text:
        return ()
    if not text.startswith("unfuse:"):
        raise ParseError(f"bad unfuse field {text!r}")
    out = []
    for item in filter(None, text[len("unfuse:"):].split(";")):
        pos_text, _, pair = item.partition("=")
        if not (pair.startswith("(") and pair.endswith(")")):
            raise ParseError(f"bad unfuse entry {item!r}")
        a_text, _, b_text = pair[1:-1].partition(",")
        out.append((int(pos_text),
                    (parse_token_string(a_text)[0], parse_token_string(b_text)[0])))
    return tuple(out)


def save_patterns(db: PatternDatabase, path: str | Path) -> None:
    lines = []
    for key in sorted(db.metadata):
        lines.append(f"#meta {key}={db.metadata[key]}")
    for p in db.patterns():
        lines.append(",".join((
            p.phase.value, p.label, format_token_string(p.tokens),
            _format_unfuse(p.unfuse_positions), str(p.source_count))))
    Path(path).write_text("\n".join(lines) + "\n")


def load_patterns(path: str | Path) -> PatternDatabase:
    db = PatternDatabase()
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#meta "):
            key, _, value = line[len("#meta "):].partition("=")
            db.metadata[key] = value
            continue
        if line.startswith("#"):
            continue
        head, _, count_text = line.rpartition(",")
        parts = head.split(",", 3)
        if len(parts) != 4:
            raise ParseError("expected phase,label,tokens,unfuse,count", lineno)
        try:
            phase = Phase(parts[0])
            tokens = parse_token_string(parts[2])
            entry = _Entry(tokens, dict(_parse_unfuse(parts[3])),
                           int(count_text))
        except (ValueError, ParseError) as exc:
            msg = exc.message if isinstance(exc, ParseError) else str(exc)
            raise ParseError(msg, lineno) from None
        db._merge_entry(phase, parts[1], entry)
    return db
