import math
import random
import unittest
from collections import Counter

from errors import ArpaFormatError, AuditNotApplicableError, EmptyCorpusError
from lexicon_forge import AccentId, strip_tags
from ngram_lm import (
    BOS,
    EOS,
    UNK,
    LmMode,
    TextCorpus,
    TextUtterance,
    audit_cross_accent,
    count_ngrams,
    estimate_witten_bell,
    history_mass,
    perplexity,
    read_arpa,
    score_sequence,
    train_trigram,
    write_arpa,
)

US = AccentId("US")
UK = AccentId("UK")


TWO_WORD_ARPA = """\\data\\
ngram 1=4
ngram 2=3

\\1-grams:
-99\t<s>\t-0.25
-0.5\tyes\t-0.2
-0.75\tno
-0.75\t</s>

\\2-grams:
-0.1\t<s> yes
-0.4\tyes no
-0.5\tyes </s>

\\end\\
"""


def _corpus() -> TextCorpus:
    return TextCorpus(
        (
            TextUtterance("u1", ("hello", "world"), US),
            TextUtterance("u2", ("hello", "there"), UK),
            TextUtterance("u3", ("hello", "world", "again"), US),
            TextUtterance("u4", ("world", "hello"), UK),
        )
    )


class CountTests(unittest.TestCase):
    def test_multi_mode_tags_every_word_with_its_accent(self) -> None:
        counts = count_ngrams(_corpus(), LmMode.MULTI)
        self.assertEqual(counts.counts[0][("hello_US",)], 2)
        self.assertEqual(counts.counts[1][("hello_UK", "there_UK")], 1)
        self.assertNotIn(("hello",), counts.counts[0])

    def test_parallel_counts_match_serial(self) -> None:
        serial = count_ngrams(_corpus(), "mono")
        parallel = count_ngrams(_corpus(), "mono", workers=2)
        self.assertEqual(serial.counts, parallel.counts)

    def test_closed_vocabulary_maps_to_unk(self) -> None:
        counts = count_ngrams(_corpus(), "mono", vocabulary={"hello", "world"})
        self.assertEqual(counts.counts[0][(UNK,)], 2)

    def test_empty_corpus_is_rejected(self) -> None:
        with self.assertRaises(EmptyCorpusError):
            count_ngrams(TextCorpus(()), "mono")

    def test_all_empty_utterances_is_rejected(self) -> None:
        with self.assertRaises(EmptyCorpusError):
            count_ngrams(TextCorpus((TextUtterance("u", (), US),)), "mono")

    def test_stripped_multi_counts_equal_mono_counts(self) -> None:
        mono = count_ngrams(_corpus(), LmMode.MONO)
        multi = count_ngrams(_corpus(), LmMode.MULTI)
        for order in range(3):
            stripped: Counter = Counter()
            for ngram, count in multi.counts[order].items():
                stripped[tuple(strip_tags(word) for word in ngram)] += count
            self.assertEqual(stripped, mono.counts[order])


class WittenBellTests(unittest.TestCase):
    def test_every_history_normalizes(self) -> None:
        model = train_trigram(_corpus(), "mono")
        for history in [(BOS,), ("hello",), (BOS, "hello"), ("hello", "world"), ("unseen",)]:
            self.assertAlmostEqual(history_mass(model, history), 1.0, places=9)

    def test_random_corpora_normalize_on_sampled_histories(self) -> None:
        rng = random.Random(3)
        words = ["ant", "bee", "cat", "dog", "eel", "fox"]
        for trial in range(20):
            utterances = tuple(
                TextUtterance(
                    f"r{trial}-{i}",
                    tuple(rng.choice(words) for _ in range(rng.randint(1, 6))),
                    rng.choice([US, UK]),
                )
                for i in range(rng.randint(3, 15))
            )
            model = train_trigram(TextCorpus(utterances), LmMode.MULTI if trial % 2 else LmMode.MONO)
            pool = sorted(model.vocabulary) + ["unseen"]
            for _ in range(100):
                history = tuple(rng.choice(pool) for _ in range(rng.randint(0, 2)))
                with self.subTest(trial=trial, history=history):
                    self.assertAlmostEqual(history_mass(model, history), 1.0, places=9)

    def test_hand_expanded_witten_bell_values(self) -> None:
        corpus = TextCorpus((TextUtterance("h1", ("a", "b"), US), TextUtterance("h2", ("a",), US)))
        model = train_trigram(corpus, "mono")
        # unigrams over a:2 b:1 </s>:2 plus one <unk> pseudo count
        self.assertAlmostEqual(model.logprob("a"), math.log10(2 / 6), places=12)
        self.assertAlmostEqual(model.logprob("a", [BOS]), math.log10(7 / 9), places=12)
        self.assertAlmostEqual(model.logprob("b", ["a"]), math.log10(1 / 3), places=12)
        self.assertAlmostEqual(model.logprob(EOS, ["a"]), math.log10(5 / 12), places=12)
        self.assertAlmostEqual(model.logprob("b", [BOS, "a"]), math.log10(5 / 12), places=12)
        # unseen trigram and bigram: backoff weights 2/4 at both levels
        self.assertAlmostEqual(model.logprob("a", [BOS, "a"]), math.log10(1 / 12), places=12)
        self.assertAlmostEqual(model.logprob(UNK, ["b"]), math.log10(1 / 12), places=12)
        # an unknown history word has no stored history, so no backoff weight is added
        self.assertAlmostEqual(model.logprob(EOS, ["zebra", "a"]), math.log10(5 / 12), places=12)

    def test_doubled_corpus_doubles_counts_and_keeps_probabilities_close(self) -> None:
        corpus = _corpus()
        doubled = TextCorpus(corpus.utterances + corpus.utterances)
        once, twice = count_ngrams(corpus, "mono"), count_ngrams(doubled, "mono")
        for order in range(3):
            self.assertEqual(twice.counts[order], Counter({k: 2 * v for k, v in once.counts[order].items()}))
        small, large = estimate_witten_bell(once), estimate_witten_bell(twice)
        for order in range(3):
            self.assertEqual(set(small.tables[order]), set(large.tables[order]))
            for ngram, (logprob, _) in small.tables[order].items():
                if ngram in ((UNK,), (BOS,)):
                    continue
                with self.subTest(ngram=ngram):
                    self.assertLessEqual(abs(large.tables[order][ngram][0] - logprob), 0.2)

    def test_training_fit_beats_uniform(self) -> None:
        corpus = _corpus()
        model = train_trigram(corpus, "mono")
        sentences = [u.words for u in corpus.utterances]
        uniform = len(model.vocabulary) - 1  # <s> is never predicted
        self.assertLess(perplexity(model, sentences), uniform)

    def test_seen_trigram_scores_above_backoff(self) -> None:
        model = train_trigram(_corpus(), "mono")
        self.assertGreater(model.logprob("world", [BOS, "hello"]), model.logprob("there", [BOS, "world"]))

    def test_unknown_word_maps_to_unk(self) -> None:
        model = train_trigram(_corpus(), "mono")
        self.assertEqual(model.logprob("zebra", ["hello"]), model.logprob(UNK, ["hello"]))
        self.assertGreater(model.logprob(UNK), -99.0)


class CrossAccentAuditTests(unittest.TestCase):
    def test_multi_model_has_no_cross_accent_ngrams(self) -> None:
        model = train_trigram(_corpus(), LmMode.MULTI)
        self.assertEqual(audit_cross_accent(model).count, 0)

    def test_audit_finds_planted_cross_accent_bigram(self) -> None:
        model = train_trigram(_corpus(), LmMode.MULTI)
        lines = write_arpa(model).splitlines()
        index = lines.index("\\2-grams:")
        lines.insert(index + 1, "-1.0\thello_US\tthere_UK\t0.0")
        count_line = next(i for i, line in enumerate(lines) if line.startswith("ngram 2="))
        lines[count_line] = f"ngram 2={int(lines[count_line].split('=')[1]) + 1}"
        planted = read_arpa("\n".join(lines) + "\n")
        audit = audit_cross_accent(planted)
        self.assertEqual(audit.count, 1)
        self.assertEqual(audit.offenders, (("hello_US", "there_UK"),))

    def test_audit_needs_tagged_vocabulary(self) -> None:
        with self.assertRaises(AuditNotApplicableError):
            audit_cross_accent(train_trigram(_corpus(), LmMode.MONO))


class ArpaTests(unittest.TestCase):
    def test_round_trip_preserves_scores_exactly(self) -> None:
        model = train_trigram(_corpus(), LmMode.MULTI)
        restored = read_arpa(write_arpa(model))
        self.assertEqual(restored.tables, model.tables)
        words = ["hello_US", "world_US", "again_US"]
        self.assertEqual(score_sequence(restored, words), score_sequence(model, words))

    def test_header_counts_must_match_sections(self) -> None:
        text = write_arpa(train_trigram(_corpus(), "mono"))
        broken = text.replace("ngram 1=", "ngram 1=1", 1)
        with self.assertRaises(ArpaFormatError):
            read_arpa(broken)

    def test_missing_end_marker(self) -> None:
        text = write_arpa(train_trigram(_corpus(), "mono")).replace("\\end\\", "")
        with self.assertRaises(ArpaFormatError):
            read_arpa(text)

    def test_non_numeric_probability_reports_line(self) -> None:
        lines = write_arpa(train_trigram(_corpus(), "mono")).splitlines()
        index = lines.index("\\1-grams:") + 1
        lines[index] = "abc\t" + lines[index].split("\t", 1)[1]
        with self.assertRaises(ArpaFormatError) as ctx:
            read_arpa("\n".join(lines) + "\n")
        self.assertEqual(ctx.exception.line_no, index + 1)

    def test_hand_written_bigram_file(self) -> None:
        model = read_arpa(TWO_WORD_ARPA)
        self.assertEqual(model.order, 2)
        self.assertEqual(model.vocabulary, frozenset({BOS, EOS, "yes", "no"}))
        self.assertEqual(model.logprob("yes", [BOS]), -0.1)
        self.assertAlmostEqual(model.logprob("no", [BOS]), -0.25 - 0.75, places=12)
        self.assertEqual(model.logprob("no", ["yes", "yes"]), -0.4)
        self.assertEqual(model.logprob(EOS, ["no"]), -0.75)
        self.assertAlmostEqual(score_sequence(model, ["yes", "no"]), -0.1 - 0.4 - 0.75, places=12)

    def test_missing_history_reports_its_line(self) -> None:
        lines = TWO_WORD_ARPA.splitlines()
        lines[lines.index("ngram 2=3")] = "ngram 2=4"
        position = lines.index("-0.5\tyes </s>") + 1
        lines.insert(position, "-0.2\tmaybe yes")
        with self.assertRaises(ArpaFormatError) as ctx:
            read_arpa("\n".join(lines) + "\n")
        self.assertEqual(ctx.exception.line_no, position + 1)
        self.assertIn("maybe yes", str(ctx.exception))

    def test_sentence_score_includes_end_of_sentence(self) -> None:
        model = train_trigram(_corpus(), "mono")
        expected = model.logprob("hello", [BOS]) + model.logprob(EOS, [BOS, "hello"])
        self.assertTrue(math.isclose(score_sequence(model, ["hello"]), expected))


if __name__ == "__main__":
    unittest.main()
