from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from pydantic import ValidationError

from acoustic_model import AcousticModel, align, path_score
from cache_store import ScoreCache
from errors import (
    DimensionMismatchError,
    EmptyFeaturesError,
    ExhaustiveGuardError,
    GraphMismatchError,
    InputValidationError,
    NoPathError,
    ScoreMismatchError,
)
from event_log import log_event
from feature_archive import FeatureMatrix
from lexicon_forge import SILENCE_UNIT, Lexicon, LexiconKind
from ngram_lm import BOS, EOS, LN10, NGramModel, score_sequence
from schemas import DecodeRecord, DecoderSettings, PhoneRecord

logger = logging.getLogger(__name__)

EXHAUSTIVE_MAX_VOCAB = 8
EXHAUSTIVE_MAX_WORDS = 4
SCORE_TOLERANCE = 1e-6

_SIL_NODE = 0
_STATE = 0
_WORD = 1

WordChoice = tuple[str, int]


@dataclass(frozen=True)
class _PrefixTree:
    # node 0 is the silence unit, tree nodes start at 1
    units: tuple[str, ...]
    children: tuple[tuple[int, ...], ...]
    # (word, pronunciation index) pairs whose pronunciation ends at the node
    ends: tuple[tuple[WordChoice, ...], ...]
    roots: tuple[int, ...]
    # fewest units still to traverse from a node before some pronunciation ends
    tails: tuple[int, ...] = ()


@dataclass(frozen=True, eq=False)
class DecodeGraphSpec:
    lexicon: Lexicon
    lm: NGramModel
    optional_silence: bool = True
    lm_scale: float = 10.0
    word_insertion_penalty: float = 0.0
    silence_penalty: float = 0.0

    def __post_init__(self) -> None:
        kind = self.lexicon.kind
        if kind not in (LexiconKind.MONO_DECODE, LexiconKind.MULTI_DECODE):
            raise GraphMismatchError(f"Decoding needs a mono- or multi-joint lexicon, got {kind.value}")
        if kind is LexiconKind.MULTI_DECODE and not self.lm.is_tagged:
            raise GraphMismatchError("Multi-joint lexicon needs an accent-tagged LM vocabulary")
        if kind is LexiconKind.MONO_DECODE and self.lm.is_tagged:
            raise GraphMismatchError("Mono-joint lexicon needs an untagged LM vocabulary")

    @property
    def method(self) -> str:
        return "multi" if self.lexicon.kind is LexiconKind.MULTI_DECODE else "mono"

    @cached_property
    def tree(self) -> _PrefixTree:
        units = [SILENCE_UNIT]
        children: list[dict[str, int]] = [{}]
        ends: list[list[WordChoice]] = [[]]
        roots: dict[str, int] = {}
        for word in self.lexicon.words():
            for pidx, entry in enumerate(self.lexicon.pronunciations(word)):
                level = roots
                node = -1
                for phone in entry.phones:
                    node = level.get(phone, -1)
                    if node < 0:
                        node = len(units)
                        units.append(phone)
                        children.append({})
                        ends.append([])
                        level[phone] = node
                    level = children[node]
                ends[node].append((word, pidx))
        tails = [0] * len(units)
        # children are always numbered after their parent
        for node in range(len(units) - 1, 0, -1):
            if not ends[node]:
                tails[node] = 1 + min(tails[child] for child in children[node].values())
        return _PrefixTree(
            units=tuple(units),
            children=tuple(tuple(c.values()) for c in children),
            ends=tuple(tuple(e) for e in ends),
            roots=tuple(roots.values()),
            tails=tuple(tails),
        )

    @cached_property
    def acoustic_units(self) -> tuple[str, ...]:
        units = set(self.lexicon.units())
        if self.optional_silence:
            units.add(SILENCE_UNIT)
        return tuple(sorted(units))


def graph_spec(lexicon: Lexicon, lm: NGramModel, settings: DecoderSettings | None = None) -> DecodeGraphSpec:
    settings = settings or DecoderSettings()
    return DecodeGraphSpec(
        lexicon=lexicon,
        lm=lm,
        optional_silence=settings.optional_silence,
        lm_scale=settings.lm_scale,
        word_insertion_penalty=settings.word_insertion_penalty,
        silence_penalty=settings.silence_penalty,
    )


@dataclass(frozen=True)
class PhoneSegment:
    unit: str
    start: int
    end: int
    word_index: Optional[int] = None
    state_starts: tuple[int, ...] = ()


@dataclass(frozen=True)
class DecodeResult:
    utterance_id: str
    words: tuple[str, ...]
    phones: tuple[PhoneSegment, ...]
    word_accents: tuple[Optional[str], ...]
    pronunciation_indices: tuple[int, ...]
    total_log_score: float
    num_frames: int
    method: str = "mono"
    silence_units: int = field(default=0, compare=False)

    @property
    def is_silence_only(self) -> bool:
        return not self.words

    def word_phones(self) -> list[tuple[str, ...]]:
        grouped: list[list[str]] = [[] for _ in self.words]
        for phone in self.phones:
            if phone.word_index is not None:
                grouped[phone.word_index].append(phone.unit)
        return [tuple(g) for g in grouped]

    def to_record(self) -> DecodeRecord:
        return DecodeRecord(
            id=self.utterance_id,
            method=self.method,
            words=list(self.words),
            tagged_words=list(self.words) if self.method == "multi" else None,
            word_accents=list(self.word_accents),
            pronunciation_indices=list(self.pronunciation_indices),
            phones=[
                PhoneRecord(
                    unit=p.unit,
                    start=p.start,
                    end=p.end,
                    word_index=p.word_index,
                    state_starts=list(p.state_starts) or None,
                )
                for p in self.phones
            ],
            num_frames=self.num_frames,
            total_log_score=self.total_log_score,
        )


def result_from_record(record: DecodeRecord | dict) -> DecodeResult:
    if isinstance(record, dict):
        record = DecodeRecord.model_validate(record)
    phones = tuple(
        PhoneSegment(p.unit, p.start, p.end, p.word_index, tuple(p.state_starts or ())) for p in record.phones
    )
    accents = tuple(record.word_accents) if record.word_accents is not None else (None,) * len(record.words)
    indices = tuple(record.pronunciation_indices) or (0,) * len(record.words)
    return DecodeResult(
        utterance_id=record.id,
        words=tuple(record.words),
        phones=phones,
        word_accents=accents,
        pronunciation_indices=indices,
        total_log_score=record.total_log_score,
        num_frames=record.num_frames,
        method=record.method,
        silence_units=sum(1 for p in phones if p.unit == SILENCE_UNIT),
    )


def _as_input(features: FeatureMatrix | np.ndarray, dim: int) -> tuple[str, np.ndarray]:
    if isinstance(features, FeatureMatrix):
        utterance_id, data = features.utterance_id, features.frames
    else:
        utterance_id, data = "utt", np.asarray(features, dtype=np.float64)
    if data.size == 0 or data.ndim != 2 or data.shape[0] == 0:
        raise EmptyFeaturesError(f"{utterance_id}: cannot decode an empty feature matrix")
    if data.shape[1] != dim:
        raise DimensionMismatchError(f"{utterance_id}: feature dimension {data.shape[1]} != model dimension {dim}")
    return utterance_id, data


def _offer(tokens: dict, key, score: float, words: tuple, trace) -> None:
    current = tokens.get(key)
    if current is None or score > current[0] or (score == current[0] and words < current[1]):
        tokens[key] = (score, words, trace)


def _prune(tokens: dict, beam: float, max_active: int) -> dict:
    best = max(token[0] for token in tokens.values())
    threshold = best - beam
    kept = [(key, token) for key, token in tokens.items() if token[0] >= threshold]
    if len(kept) > max_active:
        kept.sort(key=lambda item: (-item[1][0], item[1][1], item[0]))
        kept = kept[:max_active]
    return dict(kept)


class _Search:
    """Token passing over the lexicon prefix tree; tokens are keyed by (node, state, LM history)."""

    def __init__(
        self,
        am: AcousticModel,
        spec: DecodeGraphSpec,
        frames: np.ndarray,
        lm_cache: ScoreCache[float],
    ) -> None:
        self.spec = spec
        self.tree = spec.tree
        self.num_states = am.num_states
        self.lm_weight = spec.lm_scale * LN10
        self.history_len = spec.lm.order - 1
        self.lm_cache = lm_cache

        missing = [u for u in spec.acoustic_units if u not in am.hmms]
        if missing:
            raise GraphMismatchError(f"Acoustic model lacks HMMs for lexicon units: {missing[:5]}")
        table = am.state_logliks(frames, spec.acoustic_units)
        column = {unit: i * self.num_states for i, unit in enumerate(spec.acoustic_units)}
        self.rows = np.concatenate([table[u] for u in spec.acoustic_units], axis=1).tolist()

        units = self.tree.units
        self.base = [column.get(unit, -1) for unit in units]
        self.self_lp = [am.hmms[u].transitions[:, 0].tolist() if u in am.hmms else [] for u in units]
        self.fwd_lp = [am.hmms[u].transitions[:, 1].tolist() if u in am.hmms else [] for u in units]
        self.mapped = {word: spec.lm.map_word(word) for word in spec.lexicon.words()}
        last = self.num_states - 1
        self.frames_to_finish = [
            [last - state + self.num_states * tail for state in range(self.num_states)] for tail in self.tree.tails
        ]

    def _reachable(self, tokens: dict, t: int) -> dict:
        # tokens that cannot finish a word or silence by the last frame never reach a final state
        remaining = len(self.rows) - 1 - t
        return {key: token for key, token in tokens.items() if self.frames_to_finish[key[0]][key[1]] <= remaining}

    def lm(self, history: tuple[str, ...], word: str) -> float:
        return self.lm_cache.get_or_compute(
            (id(self.spec.lm), history, word), lambda: self.spec.lm.logprob(word, history)
        )

    def _enter_words(self, tokens: dict, history, score: float, words, trace, t: int, row) -> None:
        for child in self.tree.roots:
            _offer(tokens, (child, 0, history), score + row[self.base[child]], words, (trace, _STATE, child, 0, t))

    def _enter_boundary(self, tokens: dict, history, score: float, words, trace, t: int, allow_silence: bool) -> None:
        row = self.rows[t]
        self._enter_words(tokens, history, score, words, trace, t, row)
        if allow_silence and self.spec.optional_silence:
            entry = score - self.spec.silence_penalty + row[self.base[_SIL_NODE]]
            _offer(tokens, (_SIL_NODE, 0, history), entry, words, (trace, _STATE, _SIL_NODE, 0, t))

    def _word_exit(self, history, exit_score: float, words, trace, word_choice: WordChoice, t: int):
        word, pidx = word_choice
        mapped = self.mapped[word]
        score = exit_score + self.lm_weight * self.lm(history, mapped) - self.spec.word_insertion_penalty
        new_history = (history + (mapped,))[-self.history_len :] if self.history_len else ()
        return new_history, score, words + (word_choice,), (trace, _WORD, word, pidx, t)

    def run(self, utterance_id: str, beam: float, max_active: int):
        num_frames = len(self.rows)
        last = self.num_states - 1
        active: dict = {}
        self._enter_boundary(active, (BOS,)[-self.history_len :] if self.history_len else (), 0.0, (), None, 0, True)
        active = self._reachable(active, 0)
        if not active:
            raise NoPathError(utterance_id, 0, 0, beam)
        active = _prune(active, beam, max_active)

        for t in range(1, num_frames):
            row = self.rows[t]
            tokens: dict = {}
            word_exits: dict = {}
            silence_exits: dict = {}
            for (node, state, history), (score, words, trace) in active.items():
                col = self.base[node]
                _offer(tokens, (node, state, history), score + self.self_lp[node][state] + row[col + state], words, trace)
                forward = score + self.fwd_lp[node][state]
                if state < last:
                    _offer(
                        tokens,
                        (node, state + 1, history),
                        forward + row[col + state + 1],
                        words,
                        (trace, _STATE, node, state + 1, t),
                    )
                    continue
                if node == _SIL_NODE:
                    _offer(silence_exits, history, forward, words, trace)
                    continue
                for child in self.tree.children[node]:
                    _offer(tokens, (child, 0, history), forward + row[self.base[child]], words, (trace, _STATE, child, 0, t))
                for choice in self.tree.ends[node]:
                    new_history, score_w, words_w, trace_w = self._word_exit(history, forward, words, trace, choice, t)
                    _offer(word_exits, new_history, score_w, words_w, trace_w)

            for history, (score, words, trace) in word_exits.items():
                self._enter_boundary(tokens, history, score, words, trace, t, True)
            for history, (score, words, trace) in silence_exits.items():
                self._enter_words(tokens, history, score, words, trace, t, row)
            tokens = self._reachable(tokens, t)
            if not tokens:
                raise NoPathError(utterance_id, t, len(active), beam)
            active = _prune(tokens, beam, max_active)

        finals: dict = {}
        for (node, state, history), (score, words, trace) in active.items():
            if state != last:
                continue
            forward = score + self.fwd_lp[node][state]
            if node == _SIL_NODE:
                total = forward + self.lm_weight * self.lm(history, EOS)
                _offer(finals, 0, total, words, trace)
                continue
            for choice in self.tree.ends[node]:
                new_history, score_w, words_w, trace_w = self._word_exit(history, forward, words, trace, choice, num_frames)
                _offer(finals, 0, score_w + self.lm_weight * self.lm(new_history, EOS), words_w, trace_w)
        if not finals:
            raise NoPathError(utterance_id, num_frames - 1, len(active), beam)
        return finals[0]

    def traceback(self, utterance_id: str, best) -> DecodeResult:
        score, words, trace = best
        events = []
        while trace is not None:
            events.append(trace[1:])
            trace = trace[0]
        events.reverse()

        phones: list[dict] = []
        pending: list[int] = []
        word_count = 0
        for kind, a, b, t in events:
            if kind == _WORD:
                for index in pending:
                    phones[index]["word_index"] = word_count
                pending = []
                word_count += 1
                continue
            if b == 0:
                if phones:
                    phones[-1]["end"] = t
                phones.append({"unit": self.tree.units[a], "start": t, "state_starts": [t], "word_index": None})
                if a != _SIL_NODE:
                    pending.append(len(phones) - 1)
            else:
                phones[-1]["state_starts"].append(t)
        phones[-1]["end"] = len(self.rows)

        accents = []
        for word, pidx in words:
            accent = self.spec.lexicon.pronunciations(word)[pidx].accent
            accents.append(accent.code if accent is not None else None)
        segments = tuple(
            PhoneSegment(p["unit"], p["start"], p["end"], p["word_index"], tuple(p["state_starts"])) for p in phones
        )
        return DecodeResult(
            utterance_id=utterance_id,
            words=tuple(word for word, _ in words),
            phones=segments,
            word_accents=tuple(accents),
            pronunciation_indices=tuple(pidx for _, pidx in words),
            total_log_score=float(score),
            num_frames=len(self.rows),
            method=self.spec.method,
            silence_units=sum(1 for p in segments if p.unit == SILENCE_UNIT),
        )


def decode(
    am: AcousticModel,
    spec: DecodeGraphSpec,
    features: FeatureMatrix | np.ndarray,
    beam: float = 14.0,
    max_active: int = 7000,
    *,
    lm_cache: ScoreCache[float] | None = None,
) -> DecodeResult:
    if not beam > 0:
        raise InputValidationError(f"beam must be positive, got {beam}")
    if max_active < 1:
        raise InputValidationError(f"max_active must be at least 1, got {max_active}")
    utterance_id, frames = _as_input(features, am.dim)
    search = _Search(am, spec, frames, lm_cache if lm_cache is not None else ScoreCache())
    return search.traceback(utterance_id, search.run(utterance_id, beam, max_active))


def decode_batch(
    am: AcousticModel,
    spec: DecodeGraphSpec,
    features: Sequence[FeatureMatrix],
    beam: float = 14.0,
    max_active: int = 7000,
    *,
    workers: int = 1,
    lm_cache: ScoreCache[float] | None = None,
) -> list[DecodeResult]:
    cache = lm_cache if lm_cache is not None else ScoreCache()

    def run(item: FeatureMatrix) -> DecodeResult:
        return decode(am, spec, item, beam, max_active, lm_cache=cache)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(run, features))
    else:
        results = [run(item) for item in features]
    log_event(logger, "decode_batch", method=spec.method, utterances=len(results), lm_cache=cache.stats())
    return results


# Test oracle


def _silence_patterns(num_words: int, optional_silence: bool) -> Iterable[tuple[bool, ...]]:
    gaps = num_words + 1
    if num_words == 0:
        return [(True,)] if optional_silence else []
    if not optional_silence:
        return [(False,) * gaps]
    return itertools.product((False, True), repeat=gaps)


def _candidate_units(lexicon: Lexicon, choices: Sequence[WordChoice], silences: Sequence[bool]) -> list[str]:
    units: list[str] = []
    for gap, silent in enumerate(silences):
        if silent:
            units.append(SILENCE_UNIT)
        if gap < len(choices):
            word, pidx = choices[gap]
            units.extend(lexicon.pronunciations(word)[pidx].phones)
    return units


def exhaustive_decode(
    am: AcousticModel,
    spec: DecodeGraphSpec,
    features: FeatureMatrix | np.ndarray,
    max_words: int,
) -> DecodeResult:
    """Enumerates every word sequence up to max_words and scores it by forced alignment."""
    vocabulary = spec.lexicon.words()
    if len(vocabulary) > EXHAUSTIVE_MAX_VOCAB or max_words > EXHAUSTIVE_MAX_WORDS:
        raise ExhaustiveGuardError(
            f"Exhaustive decode allows |V| <= {EXHAUSTIVE_MAX_VOCAB} and max_words <= {EXHAUSTIVE_MAX_WORDS}, "
            f"got |V| = {len(vocabulary)} and max_words = {max_words}"
        )
    utterance_id, frames = _as_input(features, am.dim)
    lm_weight = spec.lm_scale * LN10
    options = [(word, pidx) for word in vocabulary for pidx in range(len(spec.lexicon.pronunciations(word)))]

    best: tuple[float, tuple[WordChoice, ...], list[str]] | None = None
    for num_words in range(0, max_words + 1):
        for choices in itertools.product(options, repeat=num_words):
            lm_term = lm_weight * score_sequence(spec.lm, [word for word, _ in choices])
            for silences in _silence_patterns(num_words, spec.optional_silence):
                units = _candidate_units(spec.lexicon, choices, silences)
                if len(units) * am.num_states > len(frames):
                    continue
                penalty = spec.word_insertion_penalty * num_words + spec.silence_penalty * sum(silences)
                score = align(am, units, frames).log_likelihood + lm_term - penalty
                if best is None or score > best[0] or (score == best[0] and choices < best[1]):
                    best = (score, choices, units)
    if best is None:
        raise NoPathError(utterance_id, len(frames) - 1, 0, math.inf)

    score, choices, units = best
    alignment = align(am, units, frames)
    phones = []
    word_index = -1
    unit_word = []
    cursor = 0
    for gap in range(len(choices) + 1):
        if cursor < len(units) and units[cursor] == SILENCE_UNIT:
            unit_word.append(None)
            cursor += 1
        if gap < len(choices):
            word_index += 1
            length = len(spec.lexicon.pronunciations(choices[gap][0])[choices[gap][1]].phones)
            unit_word.extend([word_index] * length)
            cursor += length
    starts_by_unit: dict[int, list[int]] = {}
    for t, position in enumerate(alignment.states):
        if t == 0 or position != alignment.states[t - 1]:
            starts_by_unit.setdefault(int(position // am.num_states), []).append(t)
    for position, start, end in alignment.unit_segments():
        phones.append(PhoneSegment(units[position], start, end, unit_word[position], tuple(starts_by_unit[position])))

    accents = []
    for word, pidx in choices:
        accent = spec.lexicon.pronunciations(word)[pidx].accent
        accents.append(accent.code if accent is not None else None)
    return DecodeResult(
        utterance_id=utterance_id,
        words=tuple(word for word, _ in choices),
        phones=tuple(phones),
        word_accents=tuple(accents),
        pronunciation_indices=tuple(pidx for _, pidx in choices),
        total_log_score=float(score),
        num_frames=len(frames),
        method=spec.method,
        silence_units=units.count(SILENCE_UNIT),
    )


# Score audit


def score_breakdown(
    result: DecodeResult,
    am: AcousticModel,
    spec: DecodeGraphSpec,
    features: FeatureMatrix | np.ndarray,
) -> tuple[float, float, float]:
    """Splits total_log_score into (acoustic, scaled LM, penalties); the parts sum to the total."""
    _, frames = _as_input(features, am.dim)
    if result.num_frames != len(frames):
        raise ScoreMismatchError(f"{result.utterance_id}: decoded {result.num_frames} frames, features have {len(frames)}")
    if not result.phones or result.phones[0].start != 0 or result.phones[-1].end != len(frames):
        raise ScoreMismatchError(f"{result.utterance_id}: phone spans do not cover the utterance")

    expected = []
    for word, pidx in zip(result.words, result.pronunciation_indices):
        if word not in spec.lexicon:
            raise ScoreMismatchError(f"{result.utterance_id}: word {word!r} is not in the decoding lexicon")
        prons = spec.lexicon.pronunciations(word)
        if pidx >= len(prons):
            raise ScoreMismatchError(f"{result.utterance_id}: {word!r} has no pronunciation {pidx}")
        expected.append(prons[pidx].phones)
    if result.word_phones() != expected:
        raise ScoreMismatchError(f"{result.utterance_id}: phone spans disagree with the lexicon pronunciations")

    acoustic = 0.0
    for phone in result.phones:
        if phone.unit not in am.hmms:
            raise ScoreMismatchError(f"{result.utterance_id}: unit {phone.unit!r} is not in the acoustic model")
        span = frames[phone.start : phone.end]
        if len(phone.state_starts) == am.num_states:
            hmm = am.hmms[phone.unit]
            emissions = am.state_logliks(span, [phone.unit])[phone.unit]
            bounds = [*phone.state_starts, phone.end]
            path = np.concatenate(
                [np.full(bounds[s + 1] - bounds[s], s, dtype=np.int64) for s in range(am.num_states)]
            )
            acoustic += path_score(emissions, hmm.transitions[:, 0], hmm.transitions[:, 1], path)
        else:
            acoustic += align(am, [phone.unit], span).log_likelihood

    lm_log = spec.lm_scale * LN10 * score_sequence(spec.lm, result.words)
    silences = sum(1 for phone in result.phones if phone.unit == SILENCE_UNIT)
    penalty = -spec.word_insertion_penalty * len(result.words) - spec.silence_penalty * silences

    total = acoustic + lm_log + penalty
    if abs(total - result.total_log_score) > SCORE_TOLERANCE * max(1.0, abs(result.total_log_score)):
        raise ScoreMismatchError(
            f"{result.utterance_id}: components sum to {total:.6f}, result reports {result.total_log_score:.6f}"
        )
    return acoustic, lm_log, penalty


# Decode output file


def write_decode_results(results: Iterable[DecodeResult], path: str | Path) -> int:
    lines = [result.to_record().model_dump_json(exclude_none=True) for result in results]
    Path(path).write_text("".join(f"{line}\n" for line in lines), encoding="utf-8")
    return len(lines)


def read_decode_results(path: str | Path) -> list[DecodeResult]:
    results = []
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            results.append(result_from_record(DecodeRecord.model_validate_json(line)))
        except ValidationError as exc:
            raise InputValidationError(f"{path}:{line_no}: malformed decode record ({exc.error_count()} errors)") from None
    return results
