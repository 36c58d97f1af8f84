from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from pydantic import ValidationError

from errors import CorpusValidationError, InputValidationError
from event_log import log_event
from feature_archive import FeatureMatrix, read_feature_archive, write_feature_archive
from lexicon_forge import (
    DEFAULT_ALPHABET,
    SILENCE_UNIT,
    AccentId,
    TaggedGrapheme,
    graphemize,
    parse_grapheme,
    read_accent_inventory,
    resolve_accents,
    write_accent_inventory,
)
from ngram_lm import TextCorpus, TextUtterance
from schemas import CorpusMetadata, CorpusSettings

logger = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")
VOCAB_PATH = Path(__file__).parent / "data" / "vocab.txt"
METADATA_FILE = "meta.json"
MEAN_SPREAD = 4.0
SILENCE_LEVEL = -6.0

FrameLabel = tuple[str, int]


@lru_cache(maxsize=1)
def default_vocabulary() -> tuple[str, ...]:
    return tuple(read_word_list(VOCAB_PATH))


def read_word_list(path: str | Path) -> list[str]:
    words = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            words.append(line.lower())
    return words


def read_templates(path: str | Path) -> list[tuple[str, ...]]:
    templates = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        words = tuple(w.lower() for w in line.split())
        if words and not words[0].startswith("#"):
            templates.append(words)
    return templates


@dataclass(frozen=True)
class CorpusSpec:
    accents: tuple[AccentId, ...]
    vocab: tuple[str, ...]
    utterances_per_accent: int = 300
    eval_utterances_per_accent: int = 100
    words_per_utt_mean: float = 9.7
    max_words_per_utt: int = 24
    accent_shift: float = 6.0
    noise_sigma: float = 1.0
    seed: int = 0
    feature_dim: int = 13
    num_states: int = 3
    mean_state_frames: float = 2.0
    silence_state_frames: float = 3.0
    frame_shift_seconds: float = 0.01
    extra_test_accents: tuple[AccentId, ...] = ()
    templates: tuple[tuple[str, ...], ...] = ()
    alphabet: str = DEFAULT_ALPHABET

    def __post_init__(self) -> None:
        object.__setattr__(self, "accents", tuple(self.accents))
        object.__setattr__(self, "vocab", tuple(w.lower() for w in self.vocab))
        object.__setattr__(self, "extra_test_accents", tuple(self.extra_test_accents))
        object.__setattr__(self, "templates", tuple(tuple(t) for t in self.templates))
        if not self.accents:
            raise InputValidationError("Corpus needs at least one accent")
        codes = [a.code for a in self.all_accents]
        if len(set(codes)) != len(codes):
            raise InputValidationError(f"Accent codes must be unique: {codes}")
        if not self.vocab:
            raise InputValidationError("Corpus vocabulary must be non-empty")
        for name in ("utterances_per_accent", "eval_utterances_per_accent", "max_words_per_utt", "feature_dim", "num_states"):
            if getattr(self, name) < 1:
                raise InputValidationError(f"{name} must be positive")
        if self.accent_shift < 0 or self.noise_sigma <= 0:
            raise InputValidationError("accent_shift must be >= 0 and noise_sigma > 0")
        for word in self.vocab:
            graphemize(word, self.alphabet)
        unknown = sorted({w for t in self.templates for w in t if w not in set(self.vocab)})
        if unknown:
            raise InputValidationError(f"Template words missing from the vocabulary: {unknown[:5]}")

    @property
    def all_accents(self) -> tuple[AccentId, ...]:
        return self.accents + self.extra_test_accents


def spec_from_settings(settings: CorpusSettings, seed: int = 0, alphabet: str = DEFAULT_ALPHABET) -> CorpusSpec:
    vocab = read_word_list(settings.vocab_path) if settings.vocab_path else list(default_vocabulary())
    templates = read_templates(settings.template_path) if settings.template_path else []
    return CorpusSpec(
        accents=tuple(resolve_accents(settings.accents)),
        vocab=tuple(vocab),
        utterances_per_accent=settings.utterances_per_accent,
        eval_utterances_per_accent=settings.eval_utterances_per_accent,
        words_per_utt_mean=settings.words_per_utt_mean,
        max_words_per_utt=settings.max_words_per_utt,
        accent_shift=settings.accent_shift,
        noise_sigma=settings.noise_sigma,
        seed=seed,
        feature_dim=settings.feature_dim,
        mean_state_frames=settings.mean_state_frames,
        silence_state_frames=settings.silence_state_frames,
        frame_shift_seconds=settings.frame_shift_seconds,
        extra_test_accents=tuple(resolve_accents(settings.extra_test_accents)),
        templates=tuple(templates),
        alphabet=alphabet,
    )


@dataclass
class Split:
    name: str
    features: dict[str, FeatureMatrix] = field(default_factory=dict)
    transcripts: dict[str, tuple[str, ...]] = field(default_factory=dict)
    accents: dict[str, AccentId] = field(default_factory=dict)

    def ids(self) -> list[str]:
        return sorted(self.transcripts)

    def __len__(self) -> int:
        return len(self.transcripts)

    def validate(self) -> None:
        feature_ids, text_ids, accent_ids = set(self.features), set(self.transcripts), set(self.accents)
        mismatched = (feature_ids | text_ids | accent_ids) - (feature_ids & text_ids & accent_ids)
        if mismatched:
            raise CorpusValidationError(f"{self.name}: utterance ids disagree across text, utt2accent and feats.bin", sorted(mismatched))


@dataclass
class Corpus:
    splits: dict[str, Split]
    accents: tuple[AccentId, ...] = ()

    def split(self, name: str) -> Split:
        try:
            return self.splits[name]
        except KeyError:
            raise InputValidationError(f"Corpus has no {name!r} split") from None

    def metadata(self) -> CorpusMetadata:
        shifts = {m.frame_shift_seconds for part in self.splits.values() for m in part.features.values()}
        dims = {m.dim for part in self.splits.values() for m in part.features.values()}
        if len(shifts) > 1 or len(dims) > 1:
            raise CorpusValidationError(f"Corpus mixes frame shifts {sorted(shifts)} or feature dimensions {sorted(dims)}")
        return CorpusMetadata(
            frame_shift_seconds=shifts.pop() if shifts else 0.01,
            feature_dim=dims.pop() if dims else None,
        )

    def text_corpus(self, split: str = "train") -> TextCorpus:
        part = self.split(split)
        return TextCorpus(
            tuple(TextUtterance(utt, part.transcripts[utt], part.accents[utt]) for utt in part.ids())
        )

    def validate(self) -> None:
        seen: dict[str, str] = {}
        for name, part in self.splits.items():
            part.validate()
            overlap = [utt for utt in part.transcripts if utt in seen]
            if overlap:
                raise CorpusValidationError(f"{name}: utterance ids also appear in {seen[overlap[0]]}", overlap)
            seen.update(dict.fromkeys(part.transcripts, name))


# Emission geometry


def _hash_seed(*parts: object) -> int:
    digest = hashlib.sha256("|".join(map(str, parts)).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


@lru_cache(maxsize=None)
def base_mean(unit: str, state: int, dim: int) -> np.ndarray:
    if unit == SILENCE_UNIT:
        mean = np.full(dim, SILENCE_LEVEL) + np.random.default_rng(_hash_seed("sil", state)).normal(0.0, 0.5, dim)
    else:
        mean = np.random.default_rng(_hash_seed("mean", unit, state)).normal(0.0, MEAN_SPREAD, dim)
    mean.setflags(write=False)
    return mean


@lru_cache(maxsize=None)
def accent_direction(unit: str, accent: AccentId, dim: int) -> np.ndarray:
    vector = np.random.default_rng(_hash_seed("direction", unit, accent.code)).normal(size=dim)
    vector /= np.linalg.norm(vector)
    vector.setflags(write=False)
    return vector


def state_mean(grapheme: TaggedGrapheme | str, state: int, accent_shift: float, dim: int) -> np.ndarray:
    if grapheme == SILENCE_UNIT:
        return base_mean(SILENCE_UNIT, state, dim)
    untagged = str(TaggedGrapheme(grapheme.base, None, grapheme.word_boundary))
    mean = base_mean(untagged, state, dim)
    if grapheme.accent is not None and accent_shift:
        mean = mean + accent_shift * accent_direction(untagged, grapheme.accent, dim)
    return mean


# Generation


def _sample_words(spec: CorpusSpec, rng: np.random.Generator) -> tuple[str, ...]:
    if spec.templates:
        return spec.templates[int(rng.integers(len(spec.templates)))][: spec.max_words_per_utt]
    count = 1 + int(rng.poisson(max(spec.words_per_utt_mean - 1.0, 0.0)))
    count = min(count, spec.max_words_per_utt)
    return tuple(spec.vocab[i] for i in rng.integers(len(spec.vocab), size=count))


def _emit_unit(
    spec: CorpusSpec,
    rng: np.random.Generator,
    unit: TaggedGrapheme | str,
    label: str,
    mean_frames: float,
    frames: list[np.ndarray],
    labels: list[FrameLabel],
) -> None:
    for state in range(spec.num_states):
        duration = int(rng.geometric(1.0 / mean_frames))
        mean = state_mean(unit, state, spec.accent_shift, spec.feature_dim)
        frames.append(mean + spec.noise_sigma * rng.normal(size=(duration, spec.feature_dim)))
        labels.extend([(label, state)] * duration)


def _generate_utterance(
    spec: CorpusSpec,
    accent: AccentId,
    seed_path: Sequence[int],
    utterance_id: str,
) -> tuple[FeatureMatrix, tuple[str, ...], list[FrameLabel]]:
    rng = np.random.default_rng([spec.seed, *seed_path])
    words = _sample_words(spec, rng)
    frames: list[np.ndarray] = []
    labels: list[FrameLabel] = []
    _emit_unit(spec, rng, SILENCE_UNIT, SILENCE_UNIT, spec.silence_state_frames, frames, labels)
    for word in words:
        for grapheme in graphemize(word, spec.alphabet):
            tagged = TaggedGrapheme(grapheme.base, accent, grapheme.word_boundary)
            _emit_unit(spec, rng, tagged, str(tagged), spec.mean_state_frames, frames, labels)
    _emit_unit(spec, rng, SILENCE_UNIT, SILENCE_UNIT, spec.silence_state_frames, frames, labels)
    matrix = FeatureMatrix(utterance_id, np.concatenate(frames, axis=0), spec.frame_shift_seconds)
    return matrix, words, labels


def _split_plan(spec: CorpusSpec) -> list[tuple[int, str, tuple[AccentId, ...], int]]:
    return [
        (0, "train", spec.accents, spec.utterances_per_accent),
        (1, "dev", spec.accents, spec.eval_utterances_per_accent),
        (2, "test", spec.all_accents, spec.eval_utterances_per_accent),
    ]


def generate_with_truth(spec: CorpusSpec) -> tuple[Corpus, dict[str, list[FrameLabel]]]:
    """Generates the corpus plus the generating (unit, state) label of every frame."""
    splits: dict[str, Split] = {}
    truth: dict[str, list[FrameLabel]] = {}
    codes = [a.code for a in spec.all_accents]
    for split_index, name, accents, count in _split_plan(spec):
        part = Split(name)
        for accent in accents:
            accent_index = codes.index(accent.code)
            for i in range(count):
                utterance_id = f"{name}-{accent.code.lower()}-{i:05d}"
                matrix, words, labels = _generate_utterance(spec, accent, (split_index, accent_index, i), utterance_id)
                part.features[utterance_id] = matrix
                part.transcripts[utterance_id] = words
                part.accents[utterance_id] = accent
                truth[utterance_id] = labels
        splits[name] = part
    corpus = Corpus(splits, spec.all_accents)
    log_event(
        logger,
        "corpus_generated",
        seed=spec.seed,
        accent_shift=spec.accent_shift,
        utterances={name: len(part) for name, part in splits.items()},
    )
    return corpus, truth


def generate(spec: CorpusSpec) -> Corpus:
    return generate_with_truth(spec)[0]


def oracle_frame_accent_accuracy(
    spec: CorpusSpec,
    corpus: Corpus,
    truth: Mapping[str, Sequence[FrameLabel]],
    split: str = "test",
) -> float:
    """Nearest-mean frame classifier over the generating means; silence and unseen accents are skipped."""
    known = {a.code for a in spec.accents}
    part = corpus.split(split)
    means_cache: dict[tuple[str, int], np.ndarray] = {}
    correct = total = 0
    for utterance_id in part.ids():
        frames = part.features[utterance_id].frames.astype(np.float64)
        for frame, (label, state) in zip(frames, truth[utterance_id]):
            if label == SILENCE_UNIT:
                continue
            grapheme = parse_grapheme(label)
            if grapheme.accent is None or grapheme.accent.code not in known:
                continue
            key = (str(TaggedGrapheme(grapheme.base, None, grapheme.word_boundary)), state)
            candidates = means_cache.get(key)
            if candidates is None:
                candidates = np.stack(
                    [
                        state_mean(TaggedGrapheme(grapheme.base, accent, grapheme.word_boundary), state, spec.accent_shift, spec.feature_dim)
                        for accent in spec.accents
                    ]
                )
                means_cache[key] = candidates
            predicted = spec.accents[int(np.argmin(((candidates - frame) ** 2).sum(axis=1)))]
            correct += predicted.code == grapheme.accent.code
            total += 1
    if not total:
        raise InputValidationError(f"No accent-bearing frames to classify in the {split} split")
    return correct / total


# Files


def save_corpus(corpus: Corpus, directory: str | Path) -> Path:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    (root / METADATA_FILE).write_text(corpus.metadata().model_dump_json(indent=2) + "\n", encoding="utf-8")
    if corpus.accents:
        write_accent_inventory(corpus.accents, root / "accents.tsv")
    for name, part in corpus.splits.items():
        target = root / name
        target.mkdir(exist_ok=True)
        ids = part.ids()
        (target / "text").write_text(
            "".join(f"{utt}\t{' '.join(part.transcripts[utt])}\n" for utt in ids), encoding="utf-8"
        )
        (target / "utt2accent").write_text(
            "".join(f"{utt}\t{part.accents[utt].code}\n" for utt in ids), encoding="utf-8"
        )
        write_feature_archive((part.features[utt] for utt in ids), target / "feats.bin")
    return root


def _read_table(path: Path) -> Iterable[tuple[int, str, str]]:
    if not path.exists():
        raise CorpusValidationError(f"Missing corpus file {path}")
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        key, _, value = line.partition("\t")
        yield line_no, key.strip(), value


def _read_metadata(path: Path) -> CorpusMetadata | None:
    if not path.exists():
        return None
    try:
        return CorpusMetadata.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as exc:
        raise CorpusValidationError(f"{path}: invalid corpus metadata: {exc.errors()[0]['msg']}") from None


def load_corpus(directory: str | Path, frame_shift_seconds: float = 0.01) -> Corpus:
    """Reads a saved corpus; a stored meta.json frame shift takes precedence over frame_shift_seconds."""
    root = Path(directory)
    if not root.is_dir():
        raise CorpusValidationError(f"Corpus directory {root} does not exist")
    metadata = _read_metadata(root / METADATA_FILE)
    if metadata is not None:
        if metadata.frame_shift_seconds != frame_shift_seconds:
            logger.warning(
                "Corpus %s stores frame shift %s s, ignoring requested %s s",
                root,
                metadata.frame_shift_seconds,
                frame_shift_seconds,
            )
        frame_shift_seconds = metadata.frame_shift_seconds
    inventory = tuple(read_accent_inventory(root / "accents.tsv")) if (root / "accents.tsv").exists() else ()
    by_code = {a.code: a for a in inventory}

    splits: dict[str, Split] = {}
    for name in SPLITS:
        target = root / name
        if not target.is_dir():
            continue
        part = Split(name)
        for _, utt, value in _read_table(target / "text"):
            part.transcripts[utt] = tuple(value.split())
        for line_no, utt, value in _read_table(target / "utt2accent"):
            code = value.strip()
            try:
                part.accents[utt] = by_code.get(code) or AccentId(code)
            except InputValidationError as exc:
                raise CorpusValidationError(f"{target / 'utt2accent'}:{line_no}: {exc}") from None
        if not (target / "feats.bin").exists():
            raise CorpusValidationError(f"Missing corpus file {target / 'feats.bin'}")
        part.features = {m.utterance_id: m for m in read_feature_archive(target / "feats.bin", frame_shift_seconds)}
        part.validate()
        splits[name] = part
    if not splits:
        raise CorpusValidationError(f"{root} holds none of the splits {', '.join(SPLITS)}")
    if not inventory:
        codes = sorted({a.code for part in splits.values() for a in part.accents.values()})
        inventory = tuple(resolve_accents(codes))
    corpus = Corpus(splits, inventory)
    corpus.validate()
    return corpus
