from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from decoder import DecodeResult
from errors import EmptyVoteError, InputValidationError, UndecidableAccentError
from event_log import log_event
from lexicon_forge import SILENCE_UNIT, AccentId, TaggedGrapheme, parse_grapheme, resolve_accents, split_word_tag

logger = logging.getLogger(__name__)

UNDECIDED = "-"


class Granularity(str, Enum):
    WORD = "word"
    PHONE = "phone"


@dataclass(frozen=True)
class AccentVote:
    counts: Mapping[AccentId, int]
    winner: AccentId
    tied: bool

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def _vote(codes: Iterable[str]) -> AccentVote:
    tally = Counter(codes)
    if not tally:
        raise EmptyVoteError("Cannot vote over zero accent-tagged units")
    best = max(tally.values())
    leaders = sorted(code for code, count in tally.items() if count == best)
    accents = {a.code: a for a in resolve_accents(sorted(tally))}
    return AccentVote(
        counts={accents[code]: count for code, count in sorted(tally.items())},
        winner=accents[leaders[0]],
        tied=len(leaders) > 1,
    )


def _grapheme(phone: TaggedGrapheme | str) -> TaggedGrapheme | None:
    if isinstance(phone, TaggedGrapheme):
        return phone
    if phone == SILENCE_UNIT:
        return None
    return parse_grapheme(phone)


def _phone_codes(phones: Iterable[TaggedGrapheme | str]) -> list[str]:
    codes = []
    for phone in phones:
        grapheme = _grapheme(phone)
        if grapheme is not None and grapheme.accent is not None:
            codes.append(grapheme.accent.code)
    return codes


def vote_word_accent(phones: Sequence[TaggedGrapheme | str]) -> AccentId:
    if not phones:
        raise EmptyVoteError("Cannot vote the accent of a word with no phones")
    # pronunciations are single-accent, the majority only matters for malformed input
    return _vote(_phone_codes(phones)).winner


def vote_utterance_accent(result: DecodeResult, granularity: Granularity | str = Granularity.WORD) -> AccentVote:
    granularity = Granularity(granularity)
    if result.is_silence_only:
        raise UndecidableAccentError(result.utterance_id)
    if granularity is Granularity.PHONE:
        return _vote(_phone_codes(p.unit for p in result.phones if p.word_index is not None))
    codes = []
    for accent, phones in zip(result.word_accents, result.word_phones()):
        if accent is None:
            accent = vote_word_accent(phones).code
        codes.append(accent)
    return _vote(codes)


def utterance_accent_multi_joint(result: DecodeResult) -> AccentVote:
    if result.is_silence_only:
        raise UndecidableAccentError(result.utterance_id)
    codes = []
    for word in result.words:
        code = split_word_tag(word)[1]
        if code is None:
            raise InputValidationError(f"{result.utterance_id}: word {word!r} carries no accent tag")
        codes.append(code)
    return _vote(codes)


@dataclass(frozen=True)
class AccentDecision:
    utterance_id: str
    accent: str | None
    tied: bool = False

    @property
    def undecidable(self) -> bool:
        return self.accent is None


def decide(result: DecodeResult, granularity: Granularity | str = Granularity.WORD) -> AccentDecision:
    try:
        if result.method == "multi" and Granularity(granularity) is Granularity.WORD:
            vote = utterance_accent_multi_joint(result)
        else:
            vote = vote_utterance_accent(result, granularity)
    except UndecidableAccentError:
        return AccentDecision(result.utterance_id, None)
    return AccentDecision(result.utterance_id, vote.winner.code, vote.tied)


def decide_batch(results: Iterable[DecodeResult], granularity: Granularity | str = Granularity.WORD) -> list[AccentDecision]:
    decisions = [decide(result, granularity) for result in results]
    undecidable = [d.utterance_id for d in decisions if d.undecidable]
    if undecidable:
        log_event(
            logger,
            "accent_undecidable",
            level=logging.WARNING,
            count=len(undecidable),
            utterances=undecidable[:10],
        )
    log_event(
        logger,
        "accent_decisions",
        granularity=Granularity(granularity).value,
        utterances=len(decisions),
        tied=sum(d.tied for d in decisions),
    )
    return decisions


def write_decisions(decisions: Iterable[AccentDecision], path: str | Path) -> None:
    lines = [f"{d.utterance_id}\t{d.accent or UNDECIDED}\t{int(d.tied)}" for d in decisions]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_decisions(path: str | Path) -> list[AccentDecision]:
    decisions = []
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[2] not in ("0", "1"):
            raise InputValidationError(f"{path}:{line_no}: expected 'utt<TAB>ACCENT<TAB>0|1'")
        accent = None if parts[1] == UNDECIDED else parts[1]
        decisions.append(AccentDecision(parts[0], accent, parts[2] == "1"))
    return decisions
