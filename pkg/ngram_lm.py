from __future__ import annotations

import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property, reduce
from typing import Iterable, Sequence

from errors import ArpaFormatError, AuditNotApplicableError, EmptyCorpusError
from lexicon_forge import AccentId, split_word_tag, tag_word
from schemas import LmSettings

logger = logging.getLogger(__name__)

BOS = "<s>"
EOS = "</s>"
UNK = "<unk>"
SPECIAL_WORDS = frozenset({BOS, EOS, UNK})
ORDER = 3
LOG_ZERO = -99.0
LN10 = math.log(10.0)

NGram = tuple[str, ...]
NGramTable = dict[NGram, tuple[float, float]]


class LmMode(str, Enum):
    MONO = "mono"
    MULTI = "multi"


@dataclass(frozen=True)
class TextUtterance:
    utterance_id: str
    words: tuple[str, ...]
    accent: AccentId


@dataclass(frozen=True)
class TextCorpus:
    utterances: tuple[TextUtterance, ...]

    def __len__(self) -> int:
        return len(self.utterances)


@dataclass
class NGramCounts:
    counts: list[Counter] = field(default_factory=lambda: [Counter() for _ in range(ORDER)])
    skipped_utterances: int = 0

    def merge(self, other: NGramCounts) -> NGramCounts:
        merged = NGramCounts(
            counts=[mine + theirs for mine, theirs in zip(self.counts, other.counts)],
            skipped_utterances=self.skipped_utterances + other.skipped_utterances,
        )
        return merged

    __add__ = merge


@dataclass(frozen=True)
class CrossAccentAudit:
    count: int
    offenders: tuple[NGram, ...]


def _prepare_words(
    utterance: TextUtterance,
    mode: LmMode,
    vocabulary: frozenset[str] | None,
) -> list[str]:
    prepared = []
    for word in utterance.words:
        if vocabulary is not None and word not in vocabulary:
            prepared.append(UNK)
        elif mode is LmMode.MULTI:
            prepared.append(tag_word(word, utterance.accent))
        else:
            prepared.append(word)
    return prepared


def _accumulate(counts: NGramCounts, words: Sequence[str]) -> None:
    tokens = [BOS, *words, EOS]
    for end in range(1, len(tokens)):
        for n in range(1, ORDER + 1):
            start = end - n + 1
            if start < 0:
                break
            counts.counts[n - 1][tuple(tokens[start : end + 1])] += 1


def _count_chunk(
    utterances: Sequence[TextUtterance],
    mode: LmMode,
    vocabulary: frozenset[str] | None,
) -> NGramCounts:
    total = NGramCounts()
    for utterance in utterances:
        if not utterance.words:
            total.skipped_utterances += 1
            continue
        _accumulate(total, _prepare_words(utterance, mode, vocabulary))
    return total


def count_ngrams(
    corpus: TextCorpus,
    mode: LmMode | str,
    *,
    vocabulary: Iterable[str] | None = None,
    workers: int = 1,
) -> NGramCounts:
    mode = LmMode(mode)
    if not corpus.utterances:
        raise EmptyCorpusError("Cannot train a language model on an empty corpus")
    closed = frozenset(vocabulary) if vocabulary is not None else None

    utterances = corpus.utterances
    if workers > 1 and len(utterances) > workers:
        size = math.ceil(len(utterances) / workers)
        chunks = [utterances[i : i + size] for i in range(0, len(utterances), size)]
        with ThreadPoolExecutor(max_workers=workers) as executor:
            parts = list(executor.map(lambda chunk: _count_chunk(chunk, mode, closed), chunks))
        counts = reduce(NGramCounts.merge, parts, NGramCounts())
    else:
        counts = _count_chunk(utterances, mode, closed)

    if counts.skipped_utterances:
        logger.warning("Skipped %d utterances with zero words", counts.skipped_utterances)
    if counts.skipped_utterances == len(utterances):
        raise EmptyCorpusError("Every utterance in the corpus is empty")
    return counts


def _log10(value: float) -> float:
    return math.log10(value) if value > 0.0 else LOG_ZERO


def estimate_witten_bell(counts: NGramCounts, unk_pseudo_count: float = 1.0) -> NGramModel:
    """Interpolated Witten-Bell estimates written in backoff form.

    For a history h with c(h) continuation tokens and T(h) distinct continuations,
    P(w|h) = (c(h, w) + T(h) * P(w|h')) / (c(h) + T(h)), so the backoff weight of
    h is exactly T(h) / (c(h) + T(h)) and every stored history normalizes.
    """
    unigram_counts: Counter = Counter({ngram[0]: c for ngram, c in counts.counts[0].items()})
    unigram_counts[UNK] += unk_pseudo_count
    unigram_counts.pop(BOS, None)
    total = float(sum(unigram_counts.values()))
    p1 = {word: c / total for word, c in unigram_counts.items()}

    def history_stats(table: Counter) -> dict[NGram, tuple[float, int]]:
        stats: dict[NGram, list[float]] = {}
        for ngram, c in table.items():
            entry = stats.setdefault(ngram[:-1], [0.0, 0])
            entry[0] += c
            entry[1] += 1
        return {h: (c, int(t)) for h, (c, t) in stats.items()}

    bigram_hist = history_stats(counts.counts[1])
    trigram_hist = history_stats(counts.counts[2])

    p2: dict[NGram, float] = {}
    for (u, w), c in counts.counts[1].items():
        c_h, t_h = bigram_hist[(u,)]
        p2[(u, w)] = (c + t_h * p1[w]) / (c_h + t_h)

    p3: dict[NGram, float] = {}
    for (v, u, w), c in counts.counts[2].items():
        c_h, t_h = trigram_hist[(v, u)]
        p3[(v, u, w)] = (c + t_h * p2[(u, w)]) / (c_h + t_h)

    def backoff(stats: dict[NGram, tuple[float, int]], history: NGram) -> float:
        if history not in stats:
            return 0.0
        c_h, t_h = stats[history]
        return math.log10(t_h / (c_h + t_h))

    unigrams: NGramTable = {(BOS,): (LOG_ZERO, backoff(bigram_hist, (BOS,)))}
    for word, prob in p1.items():
        unigrams[(word,)] = (_log10(prob), backoff(bigram_hist, (word,)))
    bigrams: NGramTable = {ng: (_log10(prob), backoff(trigram_hist, ng)) for ng, prob in p2.items()}
    trigrams: NGramTable = {ng: (_log10(prob), 0.0) for ng, prob in p3.items()}
    return NGramModel(tables=(unigrams, bigrams, trigrams))


def train_trigram(
    corpus: TextCorpus,
    mode: LmMode | str,
    config: LmSettings | None = None,
    *,
    vocabulary: Iterable[str] | None = None,
    workers: int = 1,
) -> NGramModel:
    config = config or LmSettings()
    counts = count_ngrams(corpus, mode, vocabulary=vocabulary, workers=workers)
    model = estimate_witten_bell(counts, unk_pseudo_count=config.unk_pseudo_count)
    logger.info(
        "Trained %s trigram: %s n-grams over %d utterances",
        LmMode(mode).value,
        "/".join(str(len(t)) for t in model.tables),
        len(corpus) - counts.skipped_utterances,
    )
    return model


@dataclass(frozen=True, eq=False)
class NGramModel:
    tables: tuple[NGramTable, ...]

    @property
    def order(self) -> int:
        return len(self.tables)

    @cached_property
    def vocabulary(self) -> frozenset[str]:
        return frozenset(ngram[0] for ngram in self.tables[0])

    @cached_property
    def is_tagged(self) -> bool:
        return any(split_word_tag(w)[1] is not None for w in self.vocabulary if w not in SPECIAL_WORDS)

    def map_word(self, word: str) -> str:
        return word if word in self.vocabulary else UNK

    def logprob(self, word: str, history: Sequence[str] = ()) -> float:
        word = self.map_word(word)
        mapped = tuple(self.map_word(h) for h in history)
        context = mapped[len(mapped) - min(len(mapped), self.order - 1) :]
        weight = 0.0
        while True:
            entry = self.tables[len(context)].get(context + (word,))
            if entry is not None:
                return weight + entry[0]
            if not context:
                return weight + LOG_ZERO
            history_entry = self.tables[len(context) - 1].get(context)
            if history_entry is not None:
                weight += history_entry[1]
            context = context[1:]

    def ngrams(self, order: int) -> Iterable[NGram]:
        return self.tables[order - 1].keys()


def score_sequence(model: NGramModel, words: Sequence[str]) -> float:
    history: list[str] = [BOS]
    total = 0.0
    for word in [*words, EOS]:
        total += model.logprob(word, history)
        history.append(model.map_word(word))
    return total


def perplexity(model: NGramModel, sentences: Iterable[Sequence[str]]) -> float:
    log_total = 0.0
    tokens = 0
    for words in sentences:
        log_total += score_sequence(model, words)
        tokens += len(words) + 1
    if not tokens:
        raise EmptyCorpusError("Perplexity needs at least one sentence")
    return 10.0 ** (-log_total / tokens)


def history_mass(model: NGramModel, history: Sequence[str]) -> float:
    return math.fsum(10.0 ** model.logprob(word, history) for word in model.vocabulary if word != BOS)


def _accent_codes(ngram: NGram) -> set[str]:
    codes = set()
    for word in ngram:
        if word in SPECIAL_WORDS:
            continue
        code = split_word_tag(word)[1]
        if code is not None:
            codes.add(code)
    return codes


def audit_cross_accent(model: NGramModel) -> CrossAccentAudit:
    if not model.is_tagged:
        raise AuditNotApplicableError("Cross-accent audit needs an accent-tagged vocabulary")
    offenders = sorted(
        ngram
        for order in range(2, model.order + 1)
        for ngram in model.ngrams(order)
        if len(_accent_codes(ngram)) >= 2
    )
    return CrossAccentAudit(count=len(offenders), offenders=tuple(offenders))


# ARPA serialization


def write_arpa(model: NGramModel) -> str:
    lines = ["\\data\\"]
    for order, table in enumerate(model.tables, start=1):
        lines.append(f"ngram {order}={len(table)}")
    for order, table in enumerate(model.tables, start=1):
        lines.append("")
        lines.append(f"\\{order}-grams:")
        highest = order == model.order
        for ngram in sorted(table):
            lp, bo = table[ngram]
            text = f"{lp!r}\t{' '.join(ngram)}"
            if not highest:
                text += f"\t{bo!r}"
            lines.append(text)
    lines.append("")
    lines.append("\\end\\")
    return "\n".join(lines) + "\n"


def _parse_float(token: str, line_no: int) -> float:
    try:
        return float(token)
    except ValueError:
        raise ArpaFormatError(line_no, f"expected a number, got {token!r}") from None


def read_arpa(text: str) -> NGramModel:
    lines = text.splitlines()
    index = 0

    def next_content() -> tuple[int, str | None]:
        nonlocal index
        while index < len(lines) and not lines[index].strip():
            index += 1
        if index >= len(lines):
            return len(lines), None
        index += 1
        return index, lines[index - 1].strip()

    line_no, line = next_content()
    if line != "\\data\\":
        raise ArpaFormatError(line_no, "expected \\data\\ header")

    declared: dict[int, int] = {}
    line_no, line = next_content()
    while line is not None and line.startswith("ngram "):
        spec = line[len("ngram ") :]
        order_text, _, count_text = spec.partition("=")
        if not order_text.strip().isdigit() or not count_text.strip().isdigit():
            raise ArpaFormatError(line_no, f"malformed count line {line!r}")
        declared[int(order_text)] = int(count_text)
        line_no, line = next_content()
    if not declared or sorted(declared) != list(range(1, max(declared) + 1)):
        raise ArpaFormatError(line_no, "ngram count lines must cover orders 1..N")

    max_order = max(declared)
    tables: list[NGramTable] = []
    entry_lines: list[dict[NGram, int]] = []
    for order in range(1, max_order + 1):
        if line != f"\\{order}-grams:":
            raise ArpaFormatError(line_no, f"expected \\{order}-grams: section, got {line!r}")
        table: NGramTable = {}
        where: dict[NGram, int] = {}
        section_start = line_no
        while True:
            if index >= len(lines):
                raise ArpaFormatError(len(lines), "unexpected end of file, missing \\end\\")
            raw = lines[index]
            index += 1
            line_no = index
            if not raw.strip():
                break
            parts = raw.split()
            if parts[0].startswith("\\"):
                index -= 1
                break
            if len(parts) == order + 1:
                lp, words, bo = parts[0], parts[1:], "0"
            elif len(parts) == order + 2 and order < max_order:
                lp, words, bo = parts[0], parts[1:-1], parts[-1]
            else:
                raise ArpaFormatError(line_no, f"malformed {order}-gram entry {raw!r}")
            table[tuple(words)] = (_parse_float(lp, line_no), _parse_float(bo, line_no))
            where[tuple(words)] = line_no
        if len(table) != declared[order]:
            raise ArpaFormatError(
                section_start,
                f"\\data\\ declares {declared[order]} {order}-grams but the section has {len(table)}",
            )
        tables.append(table)
        entry_lines.append(where)
        line_no, line = next_content()

    if line != "\\end\\":
        raise ArpaFormatError(line_no, "expected \\end\\")
    for order in range(2, max_order + 1):
        for ngram in tables[order - 1]:
            if ngram[:-1] not in tables[order - 2]:
                raise ArpaFormatError(
                    entry_lines[order - 1][ngram],
                    f"history of {' '.join(ngram)} is missing from the {order - 1}-grams",
                )
    return NGramModel(tables=tuple(tables))
