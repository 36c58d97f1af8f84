import tempfile
import unittest
from pathlib import Path

import numpy as np

from errors import CorpusValidationError, InputValidationError
from lexicon_forge import AccentId, TaggedGrapheme
from schemas import CorpusSettings
from synth_corpus import (
    CorpusSpec,
    generate,
    generate_with_truth,
    load_corpus,
    oracle_frame_accent_accuracy,
    save_corpus,
    spec_from_settings,
    state_mean,
)

US = AccentId("US")
UK = AccentId("UK")
ESP = AccentId("ESP")


def _spec(**kwargs) -> CorpusSpec:
    settings = dict(
        accents=(US, UK),
        vocab=("go", "to", "we", "sun"),
        utterances_per_accent=3,
        eval_utterances_per_accent=4,
        words_per_utt_mean=3.0,
        max_words_per_utt=5,
        extra_test_accents=(ESP,),
        seed=7,
    )
    settings.update(kwargs)
    return CorpusSpec(**settings)


class GenerateTests(unittest.TestCase):
    def test_split_sizes_and_ids(self) -> None:
        corpus = generate(_spec())
        self.assertEqual({name: len(part) for name, part in corpus.splits.items()}, {"train": 6, "dev": 8, "test": 12})
        self.assertIn("train-us-00002", corpus.split("train").transcripts)
        self.assertIn("test-esp-00003", corpus.split("test").transcripts)
        train_accents = {a.code for a in corpus.split("train").accents.values()}
        self.assertEqual(train_accents, {"US", "UK"})
        corpus.validate()

    def test_same_seed_same_corpus(self) -> None:
        first, second = generate(_spec()), generate(_spec())
        for name in ("train", "test"):
            self.assertEqual(first.split(name).features, second.split(name).features)
            self.assertEqual(first.split(name).transcripts, second.split(name).transcripts)

    def test_different_seed_changes_features(self) -> None:
        first, second = generate(_spec()), generate(_spec(seed=8))
        self.assertNotEqual(first.split("train").features, second.split("train").features)

    def test_transcripts_respect_vocab_and_length(self) -> None:
        corpus = generate(_spec())
        for part in corpus.splits.values():
            for words in part.transcripts.values():
                self.assertTrue(1 <= len(words) <= 5)
                self.assertTrue(set(words) <= {"go", "to", "we", "sun"})

    def test_every_utterance_starts_and_ends_in_silence(self) -> None:
        corpus, truth = generate_with_truth(_spec())
        for utterance_id, labels in truth.items():
            self.assertEqual(labels[0], ("sil", 0))
            self.assertEqual(labels[-1][0], "sil")
            split = utterance_id.split("-")[0]
            self.assertEqual(len(labels), corpus.split(split).features[utterance_id].num_frames)

    def test_templates_drive_transcripts(self) -> None:
        corpus = generate(_spec(templates=(("we", "go"),)))
        self.assertEqual(set(corpus.split("dev").transcripts.values()), {("we", "go")})

    def test_template_words_must_be_in_vocab(self) -> None:
        with self.assertRaises(InputValidationError):
            _spec(templates=(("moon",),))


class EmissionGeometryTests(unittest.TestCase):
    def test_silence_and_accents(self) -> None:
        sil = state_mean("sil", 0, 6.0, 13)
        self.assertTrue(np.array_equal(sil, state_mean("sil", 0, 0.0, 13)))
        us = state_mean(TaggedGrapheme("a", US, True), 1, 6.0, 13)
        uk = state_mean(TaggedGrapheme("a", UK, True), 1, 6.0, 13)
        base = state_mean(TaggedGrapheme("a", None, True), 1, 6.0, 13)
        self.assertAlmostEqual(float(np.linalg.norm(us - base)), 6.0)
        self.assertFalse(np.allclose(us, uk))

    def test_oracle_accuracy_tracks_accent_shift(self) -> None:
        separable = _spec(eval_utterances_per_accent=10)
        corpus, truth = generate_with_truth(separable)
        self.assertGreater(oracle_frame_accent_accuracy(separable, corpus, truth), 0.95)
        merged = _spec(eval_utterances_per_accent=10, accent_shift=0.0)
        corpus, truth = generate_with_truth(merged)
        self.assertLess(oracle_frame_accent_accuracy(merged, corpus, truth), 0.8)


class CorpusFileTests(unittest.TestCase):
    def test_save_then_load(self) -> None:
        corpus = generate(_spec())
        with tempfile.TemporaryDirectory() as tmp:
            save_corpus(corpus, tmp)
            loaded = load_corpus(tmp)
        self.assertEqual([a.code for a in loaded.accents], ["US", "UK", "ESP"])
        for name, part in corpus.splits.items():
            self.assertEqual(loaded.split(name).transcripts, part.transcripts)
            self.assertEqual(loaded.split(name).features, part.features)
        self.assertEqual(len(loaded.text_corpus("train")), 6)

    def test_frame_shift_is_restored_from_metadata(self) -> None:
        corpus = generate(_spec(frame_shift_seconds=0.025))
        with tempfile.TemporaryDirectory() as tmp:
            save_corpus(corpus, tmp)
            self.assertTrue((Path(tmp) / "meta.json").exists())
            loaded = load_corpus(tmp)
        for part in loaded.splits.values():
            for matrix in part.features.values():
                self.assertEqual(matrix.frame_shift_seconds, 0.025)
        self.assertEqual(loaded.metadata(), corpus.metadata())

    def test_corpus_without_metadata_uses_requested_shift(self) -> None:
        corpus = generate(_spec())
        with tempfile.TemporaryDirectory() as tmp:
            save_corpus(corpus, tmp)
            (Path(tmp) / "meta.json").unlink()
            loaded = load_corpus(tmp, frame_shift_seconds=0.02)
        matrix = next(iter(loaded.split("train").features.values()))
        self.assertEqual(matrix.frame_shift_seconds, 0.02)

    def test_invalid_metadata_is_rejected(self) -> None:
        corpus = generate(_spec())
        with tempfile.TemporaryDirectory() as tmp:
            save_corpus(corpus, tmp)
            (Path(tmp) / "meta.json").write_text('{"frame_shift_seconds": -1}', encoding="utf-8")
            with self.assertRaises(CorpusValidationError):
                load_corpus(tmp)

    def test_mismatched_ids_are_listed(self) -> None:
        corpus = generate(_spec())
        with tempfile.TemporaryDirectory() as tmp:
            save_corpus(corpus, tmp)
            utt2accent = Path(tmp) / "dev" / "utt2accent"
            lines = utt2accent.read_text(encoding="utf-8").splitlines()
            utt2accent.write_text("\n".join(lines[1:]) + "\n", encoding="utf-8")
            with self.assertRaises(CorpusValidationError) as ctx:
                load_corpus(tmp)
        self.assertEqual(ctx.exception.utterance_ids, [lines[0].split("\t")[0]])

    def test_settings_build_a_spec(self) -> None:
        spec = spec_from_settings(CorpusSettings(accents=["US", "KOR"], extra_test_accents=[]), seed=3)
        self.assertEqual([a.display_name for a in spec.accents], ["American", "Korean"])
        self.assertEqual(spec.seed, 3)
        self.assertEqual(len(spec.vocab), 100)


if __name__ == "__main__":
    unittest.main()
