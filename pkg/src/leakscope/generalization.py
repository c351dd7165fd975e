"""Collapse per-opcode pattern sets into bounded wildcard matchers.

Opcodes with data-dependent control flow (loops, branches) produce one
pattern per distinct path, and the profiled set can never cover all loop
counts. Their expansions do share fixed head and tail instructions though,
so the patterns of one opcode are arranged in a token trie (and a second
trie over reversed tokens): the common root chain gives a fixed prefix and
suffix, and everything between collapses into a bounded wildcard over the
tokens observed there. The result accepts every profiled pattern plus
unseen variants whose middle stays inside the widened length bounds.

Matchers are deliberately not a general regex engine: the only supported
shape is fixed-prefix / bounded-wildcard / fixed-suffix with per-position
unfuse alternation inherited from the source patterns.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .errors import GeneralizationRefused, MatcherError, ParseError
from .profiling import Pattern, PatternDatabase, TokenPair
from .trace_model import Phase, Token, format_token_string, parse_token_string


@dataclass
class TrieNode:
    children: dict[Token, "TrieNode"] = field(default_factory=dict)
    count: int = 0
    terminal: int = 0


class TokenTrie:
    """Trie over token sequences of one (label, phase) pattern group."""

    def __init__(self, label: str, phase: Phase, reverse: bool = False):
        self.label = label
        self.phase = phase
        self.reverse = reverse
        self.root = TrieNode()
        self.size = 0

    def insert(self, tokens: tuple[Token, ...]) -> None:
        node = self.root
        node.count += 1
        for tok in (reversed(tokens) if self.reverse else tokens):
            node = node.children.setdefault(tok, TrieNode())
            node.count += 1
        node.terminal += 1
        self.size += 1

    def contains(self, tokens: tuple[Token, ...]) -> bool:
        node = self.root
        for tok in (reversed(tokens) if self.reverse else tokens):
            if tok not in node.children:
                return False
            node = node.children[tok]
        return node.terminal > 0

    def common_chain(self) -> tuple[Token, ...]:
        """Tokens on the single-child chain from the root (stops at the
        first branching node or at a terminal that other patterns extend)."""
        chain: list[Token] = []
        node = self.root
        while len(node.children) == 1 and node.terminal == 0:
            tok, node = next(iter(node.children.items()))
            chain.append(tok)
        return tuple(chain)


def build_trie(patterns: list[Pattern], reverse: bool = False) -> TokenTrie:
    if not patterns:
        raise MatcherError("cannot build a trie from zero patterns")
    label, phase = patterns[0].label, patterns[0].phase
    for p in patterns:
        if p.label != label or p.phase is not phase:
            raise MatcherError(
                f"mixed labels in trie: {label!r} vs {p.label!r}")
    trie = TokenTrie(label, phase, reverse)
    for p in patterns:
        trie.insert(p.tokens)
    return trie


@dataclass(frozen=True)
class GeneralizedMatcher:
    """prefix .{min,max over alphabet} suffix, with unfuse alternation."""

    label: str
    phase: Phase
    prefix: tuple[Token, ...]
    suffix: tuple[Token, ...]
    middle_min: int = 0
    middle_max: int = 0
    middle_alphabet: frozenset[Token] = frozenset()
    prefix_unfuse: tuple[tuple[int, TokenPair], ...] = ()
    suffix_unfuse: tuple[tuple[int, TokenPair], ...] = ()

    def __post_init__(self):
        if self.middle_min > self.middle_max:
            raise MatcherError("middle_min must not exceed middle_max")
        if self.is_wildcard and (not self.prefix or not self.suffix):
            raise MatcherError("wildcard matchers need a prefix and a suffix")
        if not self.prefix:
            raise MatcherError("matcher prefix cannot be empty")

    @property
    def is_wildcard(self) -> bool:
        return self.middle_max > 0

    def match_ends(self, tokens: tuple[Token, ...], start: int) -> tuple[int, ...]:
        """All offsets where a span starting at ``start`` can end."""
        ends: set[int] = set()
        suffix_unfuse = dict(self.suffix_unfuse)
        for p in _piece_ends(tokens, start, self.prefix, dict(self.prefix_unfuse)):
            limit = min(self.middle_max, len(tokens) - p)
            length = 0
            while True:
                if length >= self.middle_min:
                    ends.update(_piece_ends(tokens, p + length, self.suffix,
                                            suffix_unfuse))
                if length >= limit \
                        or tokens[p + length] not in self.middle_alphabet:
                    break
                length += 1
        return tuple(sorted(ends))

    def accepts(self, tokens: tuple[Token, ...]) -> bool:
        return len(tokens) in self.match_ends(tokens, 0)


def _piece_ends(tokens: tuple[Token, ...], start: int,
                piece: tuple[Token, ...], unfuse: dict[int, TokenPair],
                piece_idx: int = 0) -> set[int]:
    """Offsets after matching ``piece`` at ``start``; unfuse positions may
    consume either the fused token or its two-token expansion."""
    pos = start
    for i in range(piece_idx, len(piece)):
        if i in unfuse:
            a, b = unfuse[i]
            ends: set[int] = set()
            if pos < len(tokens) and tokens[pos] == piece[i]:
                ends |= _piece_ends(tokens, pos + 1, piece, unfuse, i + 1)
            if pos + 1 < len(tokens) and tokens[pos] == a and tokens[pos + 1] == b:
                ends |= _piece_ends(tokens, pos + 2, piece, unfuse, i + 1)
            return ends
        if pos >= len(tokens) or tokens[pos] != piece[i]:
            return set()
        pos += 1
    return {pos}


def exact_matcher(pattern: Pattern) -> GeneralizedMatcher:
    """A matcher accepting exactly one pattern (and its unfuse variants)."""
    tokens = pattern.tokens
    if not tokens:
        raise MatcherError(f"{pattern.label}: empty pattern")
    split = len(tokens) - 1 if len(tokens) > 1 else len(tokens)
    prefix, suffix = tokens[:split], tokens[split:]
    p_unf, s_unf = [], []
    for pos, pair in pattern.unfuse_positions:
        if pos < split:
            p_unf.append((pos, pair))
        else:
            s_unf.append((pos - split, pair))
    return GeneralizedMatcher(
        pattern.label, pattern.phase, prefix, suffix,
        prefix_unfuse=tuple(p_unf), suffix_unfuse=tuple(s_unf))


def generalize(trie: TokenTrie, suffix_trie: TokenTrie, max_splits: int,
               patterns: list[Pattern], slack: int = 0) -> GeneralizedMatcher:
    """Collapse a multi-pattern group into one bounded wildcard matcher.

    Refuses (GeneralizationRefused) when the patterns share no usable
    prefix or suffix; the caller keeps them verbatim in that case.
    """
    if max_splits <= 0:
        raise MatcherError("max_splits must be positive (prefix would be empty)")
    if trie.size < 2:
        raise MatcherError("generalization needs at least two patterns")

    prefix = trie.common_chain()
    if not prefix:
        raise GeneralizationRefused(
            f"{trie.label}: patterns share no common first token")
    min_len = min(len(p.tokens) for p in patterns)
    suffix_rev = suffix_trie.common_chain()
    suffix_len = min(len(suffix_rev), min_len - len(prefix))
    if suffix_len < 1:
        raise GeneralizationRefused(
            f"{trie.label}: patterns share no usable suffix")
    suffix = tuple(reversed(suffix_rev[:suffix_len]))

    alphabet: set[Token] = set()
    prefix_unfuse: dict[int, TokenPair] = {}
    suffix_unfuse: dict[int, TokenPair] = {}
    residuals: list[int] = []
    extra_middle = 0
    for p in patterns:
        body_end = len(p.tokens) - len(suffix)
        residuals.append(body_end - len(prefix))
        alphabet.update(p.tokens[len(prefix):body_end])
        middle_unfuse = 0
        for pos, pair in p.unfuse_positions:
            if pos < len(prefix):
                if prefix_unfuse.get(pos, pair) != pair:
                    raise GeneralizationRefused(
                        f"{trie.label}: conflicting unfuse pairs at prefix "
                        f"position {pos}")
                prefix_unfuse[pos] = pair
            elif pos >= body_end:
                spos = pos - body_end
                if suffix_unfuse.get(spos, pair) != pair:
                    raise GeneralizationRefused(
                        f"{trie.label}: conflicting unfuse pairs at suffix "
                        f"position {spos}")
                suffix_unfuse[spos] = pair
            else:
                alphabet.update(pair)
                middle_unfuse += 1
        extra_middle = max(extra_middle, middle_unfuse)

    return GeneralizedMatcher(
        trie.label, trie.phase, prefix, suffix,
        middle_min=max(0, min(residuals) - slack),
        middle_max=max(residuals) + extra_middle + slack,
        middle_alphabet=frozenset(alphabet),
        prefix_unfuse=tuple(sorted(prefix_unfuse.items())),
        suffix_unfuse=tuple(sorted(suffix_unfuse.items())),
    )


def _compile_group(patterns: list[Pattern], max_splits: int, splits_left: int,
                   slack: int) -> list[GeneralizedMatcher]:
    if len(patterns) == 1:
        return [exact_matcher(patterns[0])]
    try:
        trie = build_trie(patterns)
        suffix_trie = build_trie(patterns, reverse=True)
        return [generalize(trie, suffix_trie, max_splits, patterns, slack)]
    except GeneralizationRefused:
        pass
    firsts = {p.tokens[0] for p in patterns if p.tokens}
    if splits_left <= 0 or len(firsts) <= 1:
        return [exact_matcher(p) for p in patterns]
    groups: dict[Token, list[Pattern]] = {}
    for p in patterns:
        groups.setdefault(p.tokens[0], []).append(p)
    out: list[GeneralizedMatcher] = []
    for tok in sorted(groups):
        out.extend(_compile_group(groups[tok], max_splits, splits_left - 1, slack))
    return out


def compile_matchers(db: PatternDatabase, max_splits: int = 3,
                     slack: int = 3) -> list[GeneralizedMatcher]:
    """One or more matchers per (label, phase) covering every stored pattern."""
    if max_splits <= 0:
        raise MatcherError("max_splits must be positive")
    if slack < 0:
        raise MatcherError("slack must be non-negative")
    matchers: list[GeneralizedMatcher] = []
    by_group: dict[tuple[str, str], list[Pattern]] = {}
    for p in db.patterns():
        by_group.setdefault((p.phase.value, p.label), []).append(p)
    for key in sorted(by_group):
        matchers.extend(
            _compile_group(by_group[key], max_splits, max_splits, slack))
    matchers.sort(key=_matcher_sort_key)
    return matchers


def _matcher_sort_key(m: GeneralizedMatcher):
    return (m.phase.value, m.label, format_token_string(m.prefix),
            format_token_string(m.suffix), m.middle_min, m.middle_max)


# ----------------------------------------------------------------------------
# Matcher file format:
#   phase,label,prefix,min,max,alphabet,suffix,unfuse-annotations
# where annotations look like  p0=(1r,1-);s2=(2-,2-)
# ----------------------------------------------------------------------------

def _format_annotations(m: GeneralizedMatcher) -> str:
    items = [f"p{pos}=({a.text},{b.text})" for pos, (a, b) in m.prefix_unfuse]
    items += [f"s{pos}=({a.text},{b.text})" for pos, (a, b) in m.suffix_unfuse]
    return ";".join(items)


def _parse_annotations(text: str):
    prefix_unfuse, suffix_unfuse = [], []
    for item in filter(None, text.split(";")):
        loc, _, pair = item.partition("=")
        if not (pair.startswith("(") and pair.endswith(")")) or len(loc) < 2:
            raise ParseError(f"bad unfuse annotation {item!r}")
        a_text, _, b_text = pair[1:-1].partition(",")
        entry = (int(loc[1:]),
                 (parse_token_string(a_text)[0], parse_token_string(b_text)[0]))
        if loc[0] == "p":
            prefix_unfuse.append(entry)
        elif loc[0] == "s":
            suffix_unfuse.append(entry)
        else:
            raise ParseError(f"bad unfuse annotation location {loc!r}")
    return tuple(prefix_unfuse), tuple(suffix_unfuse)


def save_matchers(matchers: list[GeneralizedMatcher], path: str | Path) -> None:
    lines = []
    for m in sorted(matchers, key=_matcher_sort_key):
        lines.append(",".join((
            m.phase.value, m.label, format_token_string(m.prefix),
            str(m.middle_min), str(m.middle_max),
            format_token_string(sorted(m.middle_alphabet)),
            format_token_string(m.suffix), _format_annotations(m))))
    Path(path).write_text("\n".join(lines) + "\n")


def load_matchers(path: str | Path) -> list[GeneralizedMatcher]:
    matchers = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",", 7)
        if len(parts) != 8:
            raise ParseError("expected 8 matcher fields", lineno)
        try:
            p_unf, s_unf = _parse_annotations(parts[7])
            matchers.append(GeneralizedMatcher(
                label=parts[1], phase=Phase(parts[0]),
                prefix=parse_token_string(parts[2]),
                suffix=parse_token_string(parts[6]),
                middle_min=int(parts[3]), middle_max=int(parts[4]),
                middle_alphabet=frozenset(parse_token_string(parts[5])),
                prefix_unfuse=p_unf, suffix_unfuse=s_unf))
        except (ValueError, ParseError, MatcherError) as exc:
            msg = getattr(exc, "message", str(exc))
            raise ParseError(msg, lineno) from None
    return matchers
