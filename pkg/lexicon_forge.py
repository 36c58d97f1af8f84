from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property, lru_cache, singledispatch
from pathlib import Path
from typing import Iterable, Sequence

from errors import (
    DoubleTaggingError,
    GraphemeParseError,
    InputValidationError,
    InvalidWordError,
    LexiconValidationError,
)

DEFAULT_ALPHABET = "abcdefghijklmnopqrstuvwxyz"
WORD_BOUNDARY = "WB"
SEPARATOR = "_"
SILENCE_UNIT = "sil"
ACCENT_INVENTORY_PATH = Path(__file__).parent / "data" / "accents.tsv"

_ACCENT_CODE = re.compile(r"[A-Z][A-Z0-9]*")


@dataclass(frozen=True, order=True)
class AccentId:
    code: str
    display_name: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        if not self.code:
            raise InputValidationError("Accent code must be non-empty")
        if SEPARATOR in self.code:
            raise InputValidationError(f"Accent code {self.code!r} must not contain '{SEPARATOR}'")
        if not _ACCENT_CODE.fullmatch(self.code) or self.code == WORD_BOUNDARY:
            raise InputValidationError(f"Accent code {self.code!r} must be short uppercase and not {WORD_BOUNDARY!r}")

    def __str__(self) -> str:
        return self.code


@dataclass(frozen=True)
class TaggedGrapheme:
    base: str
    accent: AccentId | None = None
    word_boundary: bool = False

    def __post_init__(self) -> None:
        if len(self.base) != 1 or self.base == SEPARATOR:
            raise GraphemeParseError(f"Grapheme base must be a single character, got {self.base!r}")

    def __str__(self) -> str:
        text = self.base
        if self.accent is not None:
            text += f"{SEPARATOR}{self.accent.code}"
        if self.word_boundary:
            text += f"{SEPARATOR}{WORD_BOUNDARY}"
        return text


@dataclass(frozen=True)
class LexiconEntry:
    word: str
    pronunciation: tuple[TaggedGrapheme, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "pronunciation", tuple(self.pronunciation))
        validate_entry(self)

    @property
    def accent(self) -> AccentId | None:
        return self.pronunciation[0].accent

    @property
    def phones(self) -> tuple[str, ...]:
        return tuple(str(g) for g in self.pronunciation)

    def __str__(self) -> str:
        return f"{self.word}\t{' '.join(self.phones)}"


class LexiconKind(str, Enum):
    BASE = "base"
    TRAINING = "training_multilingual"
    MONO_DECODE = "mono_joint_decode"
    MULTI_DECODE = "multi_joint_decode"


@dataclass(frozen=True)
class Lexicon:
    entries: tuple[LexiconEntry, ...]
    accent_inventory: tuple[AccentId, ...]
    kind: LexiconKind

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))
        object.__setattr__(self, "accent_inventory", tuple(self.accent_inventory))
        validate_lexicon(self)

    @cached_property
    def _by_word(self) -> dict[str, tuple[LexiconEntry, ...]]:
        grouped: dict[str, list[LexiconEntry]] = {}
        for entry in self.entries:
            grouped.setdefault(entry.word, []).append(entry)
        return {word: tuple(items) for word, items in grouped.items()}

    def words(self) -> list[str]:
        return list(self._by_word)

    def pronunciations(self, word: str) -> tuple[LexiconEntry, ...]:
        try:
            return self._by_word[word]
        except KeyError:
            raise LexiconValidationError(f"Word {word!r} is not in the {self.kind.value} lexicon") from None

    def __contains__(self, word: object) -> bool:
        return word in self._by_word

    def __len__(self) -> int:
        return len(self.entries)

    def units(self) -> list[str]:
        return sorted({phone for entry in self.entries for phone in entry.phones})


def _accent_key(accent: AccentId | None) -> str | None:
    return None if accent is None else accent.code


def validate_entry(entry: LexiconEntry) -> None:
    pron = entry.pronunciation
    if not entry.word:
        raise LexiconValidationError("Lexicon entry has an empty word")
    if not pron:
        raise LexiconValidationError(f"Entry {entry.word!r} has an empty pronunciation")
    for index, grapheme in enumerate(pron):
        expected = index == 0 or index == len(pron) - 1
        if grapheme.word_boundary != expected:
            raise LexiconValidationError(
                f"Entry {entry.word!r}: grapheme {index} ({grapheme}) has word_boundary={grapheme.word_boundary}"
            )
    accents = {_accent_key(g.accent) for g in pron}
    if len(accents) != 1:
        raise LexiconValidationError(f"Entry {entry.word!r} mixes accents {sorted(map(str, accents))}")
    _, word_accent = split_word_tag(entry.word)
    if word_accent is not None and word_accent != next(iter(accents)):
        raise LexiconValidationError(
            f"Entry {entry.word!r} is tagged {word_accent} but its graphemes carry {next(iter(accents))}"
        )


def validate_lexicon(lexicon: Lexicon) -> None:
    codes = [a.code for a in lexicon.accent_inventory]
    if len(set(codes)) != len(codes):
        raise LexiconValidationError(f"Accent inventory has duplicate codes: {codes}")

    seen: set[tuple[str, tuple[str, ...]]] = set()
    per_word: dict[str, int] = {}
    for entry in lexicon.entries:
        key = (entry.word, entry.phones)
        if key in seen:
            raise LexiconValidationError(f"Duplicate lexicon entry {entry}")
        seen.add(key)
        per_word[entry.word] = per_word.get(entry.word, 0) + 1

    if lexicon.kind is LexiconKind.MULTI_DECODE:
        repeated = sorted(word for word, count in per_word.items() if count > 1)
        if repeated:
            raise LexiconValidationError(f"Multi-joint lexicon words must be unique: {repeated[:5]}")
    elif lexicon.kind is LexiconKind.MONO_DECODE:
        expected = len(lexicon.accent_inventory)
        wrong = sorted(word for word, count in per_word.items() if count != expected)
        if wrong:
            raise LexiconValidationError(
                f"Mono-joint words need exactly {expected} pronunciations: {wrong[:5]}"
            )
        tagged = sorted(word for word in per_word if split_word_tag(word)[1] is not None)
        if tagged:
            raise LexiconValidationError(f"Mono-joint words must be untagged: {tagged[:5]}")


def parse_grapheme(text: str) -> TaggedGrapheme:
    parts = text.split(SEPARATOR)
    base = parts[0]
    if len(base) != 1:
        raise GraphemeParseError(f"Cannot parse grapheme {text!r}: base must be one character")
    rest = parts[1:]
    word_boundary = False
    if rest and rest[-1] == WORD_BOUNDARY:
        word_boundary = True
        rest = rest[:-1]
    if WORD_BOUNDARY in rest:
        raise GraphemeParseError(f"Cannot parse grapheme {text!r}: accent must precede {WORD_BOUNDARY}")
    if len(rest) > 1:
        raise GraphemeParseError(f"Cannot parse grapheme {text!r}: more than one accent tag")
    accent = None
    if rest:
        try:
            accent = AccentId(rest[0])
        except InputValidationError as exc:
            raise GraphemeParseError(f"Cannot parse grapheme {text!r}: {exc}") from None
    return TaggedGrapheme(base=base, accent=accent, word_boundary=word_boundary)


def split_word_tag(word: str) -> tuple[str, str | None]:
    if SEPARATOR not in word:
        return word, None
    base, code = word.rsplit(SEPARATOR, 1)
    return base, code


def tag_word(word: str, accent: AccentId) -> str:
    return f"{word}{SEPARATOR}{accent.code}"


def graphemize(word: str, alphabet: str = DEFAULT_ALPHABET) -> list[TaggedGrapheme]:
    if not word:
        raise InvalidWordError(word, "empty word")
    folded = word.lower()
    for char in folded:
        if char == SEPARATOR:
            raise InvalidWordError(word, f"contains reserved character {SEPARATOR!r}", SEPARATOR)
        if char not in alphabet:
            raise InvalidWordError(word, f"character {char!r} is outside the alphabet", char)
    last = len(folded) - 1
    return [
        TaggedGrapheme(base=char, word_boundary=index in (0, last))
        for index, char in enumerate(folded)
    ]


def tag_entry(entry: LexiconEntry, accent: AccentId) -> LexiconEntry:
    if entry.accent is not None or split_word_tag(entry.word)[1] is not None:
        raise DoubleTaggingError(f"Entry {entry.word!r} is already accent-tagged")
    return LexiconEntry(
        word=tag_word(entry.word, accent),
        pronunciation=tuple(
            TaggedGrapheme(base=g.base, accent=accent, word_boundary=g.word_boundary)
            for g in entry.pronunciation
        ),
    )


@singledispatch
def strip_tags(item):
    raise TypeError(f"strip_tags does not support {type(item).__name__}")


@strip_tags.register
def _(item: str) -> str:
    return split_word_tag(item)[0]


@strip_tags.register
def _(item: TaggedGrapheme) -> TaggedGrapheme:
    if item.accent is None:
        return item
    return TaggedGrapheme(base=item.base, word_boundary=item.word_boundary)


@strip_tags.register
def _(item: LexiconEntry) -> LexiconEntry:
    return LexiconEntry(
        word=strip_tags(item.word),
        pronunciation=tuple(strip_tags(g) for g in item.pronunciation),
    )


def _checked_vocab(vocab: Sequence[str]) -> list[str]:
    if not vocab:
        raise InputValidationError("Vocabulary must be non-empty")
    folded = [word.lower() for word in vocab]
    duplicates = sorted(w for w, count in Counter(folded).items() if count > 1)
    if duplicates:
        raise InputValidationError(f"Vocabulary must be deduplicated: {duplicates[:5]}")
    return folded


def _checked_accents(accents: Sequence[AccentId]) -> tuple[AccentId, ...]:
    if not accents:
        raise InputValidationError("At least one accent is required")
    return tuple(accents)


def _base_entries(vocab: Sequence[str], alphabet: str) -> list[LexiconEntry]:
    return [LexiconEntry(word, tuple(graphemize(word, alphabet))) for word in _checked_vocab(vocab)]


def build_base_lexicon(vocab: Sequence[str], alphabet: str = DEFAULT_ALPHABET) -> Lexicon:
    return Lexicon(tuple(_base_entries(vocab, alphabet)), (), LexiconKind.BASE)


def _tagged_entries(vocab: Sequence[str], accents: Sequence[AccentId], alphabet: str) -> list[LexiconEntry]:
    inventory = _checked_accents(accents)
    return [tag_entry(entry, accent) for entry in _base_entries(vocab, alphabet) for accent in inventory]


def build_training_lexicon(
    vocab: Sequence[str],
    accents: Sequence[AccentId],
    alphabet: str = DEFAULT_ALPHABET,
) -> Lexicon:
    return Lexicon(tuple(_tagged_entries(vocab, accents, alphabet)), tuple(accents), LexiconKind.TRAINING)


def build_multi_decode_lexicon(
    vocab: Sequence[str],
    accents: Sequence[AccentId],
    alphabet: str = DEFAULT_ALPHABET,
) -> Lexicon:
    return Lexicon(tuple(_tagged_entries(vocab, accents, alphabet)), tuple(accents), LexiconKind.MULTI_DECODE)


def build_mono_decode_lexicon(
    vocab: Sequence[str],
    accents: Sequence[AccentId],
    alphabet: str = DEFAULT_ALPHABET,
) -> Lexicon:
    entries = [
        LexiconEntry(word=strip_tags(entry.word), pronunciation=entry.pronunciation)
        for entry in _tagged_entries(vocab, accents, alphabet)
    ]
    return Lexicon(tuple(entries), tuple(accents), LexiconKind.MONO_DECODE)


# File formats


def _content_lines(text: str) -> Iterable[tuple[int, str]]:
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        yield line_no, line


def write_lexicon(lexicon: Lexicon, path: str | Path) -> None:
    lines = [f"# kind={lexicon.kind.value}"]
    lines.extend(str(entry) for entry in lexicon.entries)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_lexicon(path: str | Path, kind: LexiconKind, accents: Sequence[AccentId]) -> Lexicon:
    entries: list[LexiconEntry] = []
    for line_no, line in _content_lines(Path(path).read_text(encoding="utf-8")):
        word, sep, phones = line.partition("\t")
        if not sep or not phones.strip():
            raise LexiconValidationError(f"{path}:{line_no}: expected 'word<TAB>graphemes'")
        try:
            pron = tuple(parse_grapheme(token) for token in phones.split())
            entries.append(LexiconEntry(word.strip(), pron))
        except InputValidationError as exc:
            raise LexiconValidationError(f"{path}:{line_no}: {exc}") from None
    by_code = {a.code: a for a in accents}
    restored = [
        LexiconEntry(
            e.word,
            tuple(
                TaggedGrapheme(g.base, by_code.get(g.accent.code, g.accent) if g.accent else None, g.word_boundary)
                for g in e.pronunciation
            ),
        )
        for e in entries
    ]
    return Lexicon(tuple(restored), tuple(accents), kind)


def write_accent_inventory(accents: Sequence[AccentId], path: str | Path) -> None:
    lines = ["# code\tdisplay name"]
    lines.extend(f"{a.code}\t{a.display_name}" for a in accents)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def parse_accent_inventory(text: str) -> list[AccentId]:
    accents: list[AccentId] = []
    for line_no, line in _content_lines(text):
        code, _, name = line.partition("\t")
        try:
            accents.append(AccentId(code.strip(), name.strip()))
        except InputValidationError as exc:
            raise InputValidationError(f"accent inventory line {line_no}: {exc}") from None
    codes = [a.code for a in accents]
    if len(set(codes)) != len(codes):
        raise InputValidationError(f"accent inventory has duplicate codes: {codes}")
    return accents


def read_accent_inventory(path: str | Path) -> list[AccentId]:
    return parse_accent_inventory(Path(path).read_text(encoding="utf-8"))


@lru_cache(maxsize=1)
def default_accent_inventory() -> tuple[AccentId, ...]:
    fallback = (
        AccentId("US", "American"),
        AccentId("UK", "British"),
        AccentId("CHN", "Chinese"),
        AccentId("IND", "Indian"),
        AccentId("JAP", "Japanese"),
        AccentId("KOR", "Korean"),
        AccentId("POR", "Portuguese"),
        AccentId("RUS", "Russian"),
        AccentId("ESP", "Spanish"),
        AccentId("CAN", "Canadian"),
    )
    try:
        accents = read_accent_inventory(ACCENT_INVENTORY_PATH)
    except (FileNotFoundError, InputValidationError):
        return fallback
    return tuple(accents) or fallback


def resolve_accents(codes: Iterable[str]) -> list[AccentId]:
    known = {a.code: a for a in default_accent_inventory()}
    return [known.get(code, AccentId(code)) for code in codes]
